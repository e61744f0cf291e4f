//! Standalone front end: framed binary requests on stdin, responses on stdout.

use std::io::{BufReader, BufWriter, Write};

fn main() {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut input = BufReader::new(stdin.lock());
    let mut output = BufWriter::new(stdout.lock());
    if let Err(err) = nnkernel::protocol::serve(&mut input, &mut output) {
        let _ = output.flush();
        eprintln!("nnkernel: {err}");
        std::process::exit(1);
    }
}
