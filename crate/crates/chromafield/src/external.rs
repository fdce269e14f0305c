//! Colorizer running in a child process, spoken to over [`crate::protocol`].

use std::io::{BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use chromafield_core::colorize::{AbPatch, ColorizeError, Colorizer, PatchQuery, Provenance};

use crate::protocol::{encode_request, read_response, ProtocolError, Request, Response};

struct Session {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    responses: Receiver<Result<Response, ProtocolError>>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs `sh -c <command>` and exchanges one request/response pair per query.
/// A failed or timed-out exchange kills the child; the next query starts a
/// fresh one.
pub struct ExternalColorizer {
    command: String,
    timeout: Duration,
    session: Option<Session>,
}

impl ExternalColorizer {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        Self { command: command.into(), timeout, session: None }
    }

    fn spawn(&self) -> Result<Session, ColorizeError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ColorizeError::Query(format!("cannot start {:?}: {e}", self.command)))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || loop {
            let msg = read_response(&mut stdout);
            let stop = msg.is_err();
            if tx.send(msg).is_err() || stop {
                break;
            }
        });
        Ok(Session { child, stdin, responses: rx })
    }

    /// One raw exchange.
    pub fn exchange(&mut self, req: &Request) -> Result<Response, ColorizeError> {
        if self.session.is_none() {
            self.session = Some(self.spawn()?);
        }
        let session = self.session.as_mut().expect("session started");
        let sent = session.stdin.write_all(&encode_request(req)).and_then(|_| session.stdin.flush());
        let result = match sent {
            Err(e) => Err(ColorizeError::Query(format!("writing request: {e}"))),
            Ok(()) => match session.responses.recv_timeout(self.timeout) {
                Ok(Ok(resp)) if (resp.width, resp.height) == (req.width, req.height) => Ok(resp),
                Ok(Ok(resp)) => Err(ColorizeError::Protocol(format!(
                    "response is {}x{} for a {}x{} request",
                    resp.width, resp.height, req.width, req.height
                ))),
                Ok(Err(e)) => Err(ColorizeError::Protocol(e.to_string())),
                Err(RecvTimeoutError::Timeout) => Err(ColorizeError::Timeout(self.timeout.as_millis() as u64)),
                Err(RecvTimeoutError::Disconnected) => Err(ColorizeError::Query("colorizer exited".into())),
            },
        };
        if result.is_err() {
            self.session = None;
        }
        result
    }
}

impl Colorizer for ExternalColorizer {
    fn name(&self) -> &str {
        "external"
    }

    fn colorize(&mut self, query: &PatchQuery<'_>) -> Result<AbPatch, ColorizeError> {
        let size = query.size as u32;
        let req = Request { width: size, height: size, lum: query.lum.iter().map(|&l| l as f32).collect() };
        let resp = self.exchange(&req)?;
        let mut ab = Vec::with_capacity(resp.ab.len());
        for [a, b] in resp.ab {
            if !(a.is_finite() && b.is_finite()) {
                return Err(ColorizeError::Protocol("non-finite ab value".into()));
            }
            ab.push([(a as f64).clamp(-128.0, 128.0), (b as f64).clamp(-128.0, 128.0)]);
        }
        Ok(AbPatch {
            width: query.size,
            height: query.size,
            ab,
            provenance: Provenance { colorizer: "external".into(), query: query.index },
        })
    }
}
