//! Runs the SOT vs SOT+SD-CTC comparison and prints one row per seed.
//!
//! Usage: `cargo run --release --example benchmark [config.json] [out_dir]`

use std::path::PathBuf;

use sdctc::benchmark::{run_benchmark, BenchmarkConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config: BenchmarkConfig = match args.next() {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => BenchmarkConfig::default(),
    };
    let out = args.next().map(PathBuf::from);
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
    }
    println!("seed  stage1_acc  base_aed  prop_aed  prop_resc  prop_ctc  secs");
    let report = run_benchmark(&config, out.as_deref(), |p| {
        println!(
            "{:>4}  {:>10.4}  {:>8.4}  {:>8.4}  {:>9.4}  {:>8.4}  {:>5.1}",
            p.seed, p.stage1_accuracy, p.baseline_aed, p.proposed_aed, p.proposed_rescored, p.proposed_ctc, p.seconds
        );
    })?;
    println!(
        "proposed <= baseline in {}/{} pairs; rescoring <= aed in {}/{} pairs",
        report.proposed_wins(),
        report.pairs.len(),
        report.rescoring_wins(),
        report.pairs.len()
    );
    Ok(())
}
