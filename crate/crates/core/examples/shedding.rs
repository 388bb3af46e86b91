//! Runs the velocity solver alone and reports the shedding Strouhal number.
//!
//! Usage: `cargo run --release --example shedding -- [nx] [t_total]`

use std::time::Instant;

use odorlab::flowsim::{run_flow_only, SimConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let nx: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let t_total: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(160.0);
    let cfg = SimConfig {
        nx,
        ny: nx / 2,
        t_total,
        t_record_start: t_total - 60.0,
        ..SimConfig::default()
    };
    let start = Instant::now();
    let diag = run_flow_only(&cfg).expect("solver failed");
    if let Ok(path) = std::env::var("ODORLAB_PROBE_OUT") {
        let text: Vec<String> = diag.probe_v.iter().map(|v| v.to_string()).collect();
        std::fs::write(path, text.join("\n")).unwrap();
    }
    println!(
        "nx={nx} St={:.5} max_div={:.2e} max_cfl={:.3} elapsed={:.1}s",
        diag.strouhal().unwrap_or(f64::NAN),
        diag.max_divergence,
        diag.max_cfl,
        start.elapsed().as_secs_f64()
    );
}
