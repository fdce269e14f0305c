//! Subprocess colorizer protocol.
//!
//! Request: `CLRQ`, u32 width, u32 height, then `width·height` f32 L values in
//! [0, 1]. Response: `CLRA`, u32 width, u32 height (echoed), then
//! `width·height` (a, b) f32 pairs. Everything little-endian and row-major.

use std::io::{self, Read, Write};

pub const REQUEST_MAGIC: &[u8; 4] = b"CLRQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"CLRA";
/// Upper bound on `width·height` accepted from a peer.
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub width: u32,
    pub height: u32,
    pub lum: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub width: u32,
    pub height: u32,
    pub ab: Vec<[f32; 2]>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("stream ended mid-message")]
    Truncated,
    #[error("payload of {0} pixels is too large")]
    TooLarge(usize),
    #[error(transparent)]
    Io(io::Error),
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ProtocolError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })
}

/// Reads the magic; `Ok(None)` on a clean end of stream before any byte.
fn read_magic(r: &mut impl Read) -> Result<Option<[u8; 4]>, ProtocolError> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ProtocolError::Io(e)),
        }
    }
    Ok(Some(magic))
}

fn read_header(r: &mut impl Read) -> Result<(u32, u32, usize), ProtocolError> {
    let mut h = [0u8; 8];
    read_exact(r, &mut h)?;
    let w = u32::from_le_bytes(h[..4].try_into().unwrap());
    let ht = u32::from_le_bytes(h[4..].try_into().unwrap());
    let n = (w as usize).saturating_mul(ht as usize);
    if n > MAX_PIXELS {
        return Err(ProtocolError::TooLarge(n));
    }
    Ok((w, ht, n))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>, ProtocolError> {
    let mut bytes = vec![0u8; 4 * n];
    read_exact(r, &mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn encode_request(req: &Request) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * req.lum.len());
    out.extend_from_slice(REQUEST_MAGIC);
    out.extend_from_slice(&req.width.to_le_bytes());
    out.extend_from_slice(&req.height.to_le_bytes());
    for v in &req.lum {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * resp.ab.len());
    out.extend_from_slice(RESPONSE_MAGIC);
    out.extend_from_slice(&resp.width.to_le_bytes());
    out.extend_from_slice(&resp.height.to_le_bytes());
    for [a, b] in &resp.ab {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

/// Next request, or `Ok(None)` at a clean end of input.
pub fn read_request(r: &mut impl Read) -> Result<Option<Request>, ProtocolError> {
    let Some(magic) = read_magic(r)? else { return Ok(None) };
    if &magic != REQUEST_MAGIC {
        return Err(ProtocolError::Magic(magic));
    }
    let (width, height, n) = read_header(r)?;
    Ok(Some(Request { width, height, lum: read_f32s(r, n)? }))
}

pub fn read_response(r: &mut impl Read) -> Result<Response, ProtocolError> {
    let magic = read_magic(r)?.ok_or(ProtocolError::Truncated)?;
    if &magic != RESPONSE_MAGIC {
        return Err(ProtocolError::Magic(magic));
    }
    let (width, height, n) = read_header(r)?;
    let flat = read_f32s(r, 2 * n)?;
    Ok(Response { width, height, ab: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect() })
}

pub fn write_response(w: &mut impl Write, resp: &Response) -> io::Result<()> {
    w.write_all(&encode_response(resp))?;
    w.flush()
}
