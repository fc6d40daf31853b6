//! Generate a small synthetic benchmark and verify a few of its contracts.
//!
//! ```bash
//! cargo run --example generate_dataset
//! ```

use aadseg::dataset::{generate_dataset, masked_mean, ring_mean, GenConfig, HardTag, Split};

fn main() -> aadseg::Result<()> {
    let root = std::env::temp_dir().join("aadseg-example-data");
    let _ = std::fs::remove_dir_all(&root);

    let cfg = GenConfig {
        base_classes: vec!["disk".into(), "square".into(), "star".into()],
        novel_classes: vec!["crescent".into()],
        train_supports: 6,
        train_queries: 5,
        ..GenConfig::default()
    };
    let index = generate_dataset(&root, &cfg, 7)?;
    println!(
        "wrote {} train / {} test classes under {}",
        index.train.len(),
        index.test.len(),
        root.display()
    );

    // every query carries a hardness tag; measure two of the postconditions
    for class in index.split(Split::Test) {
        for q in &class.queries {
            let tag = q.tags[0];
            let area = q.mask.fg_count() as f64 / (q.mask.width * q.mask.height) as f64;
            match tag {
                HardTag::Small => {
                    println!("  {}: small target, area {:.3}% (< 1% required)", class.name, area * 100.0);
                }
                HardTag::Camouflage => {
                    let contrast =
                        (masked_mean(&q.image, &q.mask).unwrap() - ring_mean(&q.image, &q.mask, 5)).abs();
                    println!("  {}: camouflaged, fg/ring contrast {:.4} (< 0.05)", class.name, contrast);
                }
                other => println!("  {}: {} query, area {:.3}%", class.name, other.name(), area * 100.0),
            }
        }
    }
    Ok(())
}
