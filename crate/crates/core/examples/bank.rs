//! Writes the default Re=100 field bank, one ODRF file per source.
//!
//! Usage: `cargo run --release --example bank -- <out_dir>`

use std::time::Instant;

use odorlab::fieldstore;
use odorlab::flowsim::{run_bank, SimConfig};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "bank".into());
    std::fs::create_dir_all(&out).unwrap();
    let cfg = SimConfig::default();
    let start = Instant::now();
    let run = run_bank(&cfg).expect("solver failed");
    for (k, s) in run.series.iter().enumerate() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(format!("{out}/source_{k}.odrf")).unwrap());
        fieldstore::save(s, &mut f).unwrap();
    }
    println!(
        "St={:.5} max_div={:.2e} min_c={:.2e} elapsed={:.1}s",
        run.diagnostics.strouhal().unwrap_or(f64::NAN),
        run.diagnostics.max_divergence,
        run.diagnostics.min_c,
        start.elapsed().as_secs_f64()
    );
}
