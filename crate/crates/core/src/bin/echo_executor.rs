//! Reference executor: answers every request with the heatmap channel of the
//! fused input, so refinement through it reproduces the upsampled heatmap.

use std::io::{stdin, stdout, BufWriter};
use std::process::ExitCode;

fn main() -> ExitCode {
    let mut input = stdin().lock();
    let mut output = BufWriter::new(stdout().lock());
    match h2g::heatmap::serve(&mut input, &mut output, h2g::heatmap::echo_heatmap_channel) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("echo_executor: {e}");
            ExitCode::FAILURE
        }
    }
}
