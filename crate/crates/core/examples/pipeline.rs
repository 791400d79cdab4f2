//! Runs the full experiment from a config file and prints the report.
//!
//! `cargo run --release --example pipeline -- configs/planted.toml /tmp/out`

use std::path::PathBuf;

use flexkd::harness::{run_pipeline, ExperimentConfig};

fn main() -> flexkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args.next().map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/planted.toml"),
        PathBuf::from,
    );
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(out) = args.next() {
        cfg.out_dir = out.into();
    }
    let report = run_pipeline(&cfg)?;
    print!("{}", report.to_markdown());
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}
