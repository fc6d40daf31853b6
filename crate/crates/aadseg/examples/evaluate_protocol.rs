//! Run the seeded multi-run evaluation protocol and print the report.
//!
//! Uses the perfect-oracle and all-background reference segmenters, so it
//! exercises the whole harness without a training run.
//!
//! ```bash
//! cargo run --example evaluate_protocol
//! ```

use aadseg::dataset::{generate_dataset, GenConfig, Split};
use aadseg::evaluator::{report_csv, run_protocol, AllBackground, PerfectOracle, ProtocolConfig};

fn main() -> aadseg::Result<()> {
    let root = std::env::temp_dir().join("aadseg-example-eval");
    let _ = std::fs::remove_dir_all(&root);
    let index = generate_dataset(&root, &GenConfig::default(), 3)?;

    let cfg = ProtocolConfig { k: 1, tasks: 100, runs: 2, base_seed: 5, ..ProtocolConfig::default() };
    let oracle = run_protocol(&PerfectOracle, &index, Split::Test, &cfg)?;
    let background = run_protocol(&AllBackground, &index, Split::Test, &cfg)?;

    println!("perfect oracle mIoU: {}", oracle.miou);
    println!("all-background mIoU: {}", background.miou);
    println!("segmentation forwards: {}", oracle.seg_forwards);
    println!("\nreport CSV:\n{}", report_csv(&oracle));
    Ok(())
}
