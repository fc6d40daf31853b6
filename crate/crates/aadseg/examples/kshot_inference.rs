//! Compare the two K-shot inference strategies on one model.
//!
//! Voting runs K full forwards and averages per-pixel probabilities;
//! averaging collapses the K supports at the feature/mask level and runs a
//! single forward. The forward counters make the cost difference exact.
//!
//! ```bash
//! cargo run --release --example kshot_inference
//! ```

use aadseg::dataset::{generate_dataset, GenConfig, Split};
use aadseg::evaluator::{run_protocol, ModelSegmenter, ProtocolConfig, Strategy};
use aadseg::model::{AadModel, ModelConfig};

fn main() -> aadseg::Result<()> {
    let root = std::env::temp_dir().join("aadseg-example-kshot");
    let _ = std::fs::remove_dir_all(&root);
    let index = generate_dataset(&root, &GenConfig::default(), 2)?;

    // an untrained model is enough to demonstrate the cost contract
    let model = AadModel::init(ModelConfig::default(), 11)?;
    let k = 10;
    let tasks = 20;
    for strategy in [Strategy::Vote, Strategy::Average] {
        let cfg = ProtocolConfig { k, strategy, tasks, runs: 1, base_seed: 9, task_mean: false };
        let seg = ModelSegmenter { model: &model, strategy };
        let report = run_protocol(&seg, &index, Split::Test, &cfg)?;
        println!(
            "{:<8} K={k}: {} forwards over {tasks} tasks, {:.2}s, mIoU {:.4}",
            strategy.name(),
            report.seg_forwards,
            report.wall_secs,
            report.miou
        );
    }
    Ok(())
}
