//! Minimal QR decoder executable: prints the payload of the first QR symbol
//! found in the given image to stdout, or exits nonzero if none decodes.

use std::process::ExitCode;

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let path = match args.next() {
        Some(p) if !p.starts_with('-') => p,
        _ => {
            eprintln!("usage: qrdec <image>");
            return ExitCode::from(2);
        }
    };
    let img = match image::open(&path) {
        Ok(i) => i.to_luma8(),
        Err(e) => {
            eprintln!("qrdec: cannot read {}: {}", path, e);
            return ExitCode::from(2);
        }
    };
    let mut prepared = rqrr::PreparedImage::prepare(img);
    for grid in prepared.detect_grids() {
        if let Ok((_meta, content)) = grid.decode() {
            println!("{}", content);
            return ExitCode::SUCCESS;
        }
    }
    ExitCode::FAILURE
}
