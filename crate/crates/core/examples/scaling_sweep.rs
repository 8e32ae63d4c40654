//! A reduced data-scaling sweep written to a directory, then aggregated.
//!
//!     cargo run --release --example scaling_sweep -- [out_dir]

use std::path::PathBuf;

use probekd::cli::{run_sweep, ExperimentPlan};
use probekd::distill::Method;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "sweep-out".into()).into();
    let plan = ExperimentPlan {
        methods: vec![Method::Supervised, Method::LogitKd, Method::ProbeKd],
        fractions: vec![0.1, 0.5, 1.0],
        seeds: vec![42, 43],
        output_dir: Some(out),
        ..ExperimentPlan::default()
    };
    let summary = run_sweep(&plan, std::path::Path::new("."), 1)?;
    println!(
        "{} runs: {} completed, {} skipped, {} failed",
        summary.total, summary.completed, summary.skipped, summary.failed
    );
    print!("{}", std::fs::read_to_string(&summary.table)?);
    Ok(())
}
