//! Protocol server answering every request with the default palette curve.
//! Exits 0 at end of input and 1 on a malformed request.

use std::io::{self, BufReader, BufWriter};
use std::process::ExitCode;

use chromafield::protocol::{read_request, write_response, Response};
use chromafield_core::colorize::PaletteCurve;

fn main() -> ExitCode {
    let curve = PaletteCurve::default();
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    loop {
        match read_request(&mut input) {
            Ok(None) => return ExitCode::SUCCESS,
            Ok(Some(req)) => {
                let ab = req.lum.iter().map(|&l| curve.eval(l as f64).map(|v| v as f32)).collect();
                let resp = Response { width: req.width, height: req.height, ab };
                if let Err(e) = write_response(&mut output, &resp) {
                    eprintln!("palette-colorizer: {e}");
                    return ExitCode::FAILURE;
                }
            }
            Err(e) => {
                eprintln!("palette-colorizer: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
}
