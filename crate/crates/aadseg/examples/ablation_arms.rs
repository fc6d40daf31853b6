//! Build the ablation arms and compare them on a small budget.
//!
//! The arms mirror the module study: a support-blind baseline, the
//! correlation learner alone, and the full model with distilled queries
//! (plus the two alternative query-update rules).
//!
//! ```bash
//! cargo run --release --example ablation_arms
//! ```

use aadseg::aad::FusionVariant;
use aadseg::dataset::{generate_dataset, GenConfig, Split};
use aadseg::evaluator::{run_protocol, ModelSegmenter, ProtocolConfig, Strategy};
use aadseg::trainer::{train, RunConfig};

fn main() -> aadseg::Result<()> {
    let root = std::env::temp_dir().join("aadseg-example-ablate");
    let _ = std::fs::remove_dir_all(&root);
    let index = generate_dataset(&root, &GenConfig::default(), 1)?;

    let base = RunConfig {
        dataset_root: root,
        episodes_total: 300, // a taste; the acceptance suite uses 2000
        query_width: 32,
        n_queries: 8,
        stem_channels: [16, 32],
        scale_channels: [16, 32, 64],
        ..RunConfig::default()
    };
    let arms = [
        ("baseline", false, false, FusionVariant::Aad),
        ("cl", true, false, FusionVariant::Aad),
        ("aad", true, true, FusionVariant::Aad),
        ("maskadd", true, true, FusionVariant::MaskAdd),
        ("concat", true, true, FusionVariant::Concat),
    ];
    println!("arm       mIoU@K=1");
    for (name, cl, aad, fusion) in arms {
        let cfg = RunConfig { enable_cl: cl, enable_aad: aad, fusion, ..base.clone() };
        let outcome = train(&cfg, &index)?;
        let seg = ModelSegmenter { model: &outcome.model, strategy: Strategy::Average };
        let report = run_protocol(
            &seg,
            &index,
            Split::Test,
            &ProtocolConfig { k: 1, tasks: 60, runs: 1, base_seed: 1, ..ProtocolConfig::default() },
        )?;
        println!("{name:<9} {:.4}", report.miou);
    }
    Ok(())
}
