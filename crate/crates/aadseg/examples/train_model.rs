//! Meta-train a small model for a handful of episodes and watch the loss.
//!
//! ```bash
//! cargo run --release --example train_model
//! ```

use aadseg::dataset::{generate_dataset, GenConfig};
use aadseg::trainer::{save_model_checkpoint, train, RunConfig};

fn main() -> aadseg::Result<()> {
    let root = std::env::temp_dir().join("aadseg-example-train");
    let _ = std::fs::remove_dir_all(&root);
    let index = generate_dataset(&root, &GenConfig::default(), 1)?;

    let cfg = RunConfig {
        dataset_root: root.clone(),
        episodes_total: 200,
        // a narrow model keeps the example quick; drop these overrides to
        // train the default architecture
        query_width: 32,
        n_queries: 8,
        stem_channels: [16, 32],
        scale_channels: [16, 32, 64],
        ..RunConfig::default()
    };
    let outcome = train(&cfg, &index)?;

    let mean = |rows: &[aadseg::trainer::LossRow]| {
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
    };
    let first = mean(&outcome.loss_log[..50]);
    let last = mean(&outcome.loss_log[outcome.loss_log.len() - 50..]);
    println!("episodes: {}", outcome.episodes);
    println!("mean loss, first 50 episodes: {first:.4}");
    println!("mean loss, last 50 episodes:  {last:.4}");

    let ckpt = root.join("checkpoint.ckpt");
    save_model_checkpoint(&ckpt, &outcome.model, Some(&outcome.optimizer), outcome.episodes)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}
