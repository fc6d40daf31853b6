use aadseg::dataset::{load_manifest, sample_episode, Split};
use aadseg::evaluator::{infer_average, iou, Counters};
use aadseg::trainer::{load_model_checkpoint, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = std::path::Path::new(&args[1]);
    let cfg = RunConfig {
        dataset_root: "/tmp/aad-data".into(),
        batch_episodes: 1,
        ..RunConfig::default()
    };
    let index = load_manifest(&cfg.dataset_root).unwrap();
    let (model, _, _) = load_model_checkpoint(ckpt, &cfg).unwrap();

    for split in [Split::Train, Split::Test] {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut by_tag: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut total = (0.0, 0usize);
        for _ in 0..150 {
            let ep = sample_episode(&index, split, 1, &mut rng).unwrap();
            let mut c = Counters::default();
            let pred = infer_average(&model, &ep, &mut c).unwrap();
            let v = iou(&pred, &ep.query_mask).unwrap();
            total.0 += v;
            total.1 += 1;
            let tag = ep.query_tags.first().map(|t| t.name().to_string()).unwrap_or_default();
            let e = by_tag.entry(tag).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        println!("== split {:?}: mean task IoU {:.4}", split, total.0 / total.1 as f64);
        for (tag, (s, n)) in by_tag {
            println!("   {tag:<12} {:.4}  (n={n})", s / n as f64);
        }
    }
}
