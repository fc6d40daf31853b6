//! Deterministic synthetic scene generation.
//!
//! Supports are clean renders of one shape family on textured noise.
//! Queries additionally contain a distractor shape from another family and
//! carry exactly one hardness tag, cycled per class so every class's query
//! pool covers all five tags. The whole dataset is a pure function of
//! (config, seed): regenerating writes byte-identical files.

use super::index::{load_manifest, DatasetIndex, ManifestRecord};
use super::pnm::{write_image_pgm, write_mask_pgm};
use super::raster::{value_noise, Mask, Raster};
use super::shapes::{render_mask, ShapeFamily, ShapeJitter, ALL_FAMILIES};
use super::transforms::{apply_hard_transform, HardTag, ALL_TAGS};
use crate::error::{Error, Result};
use crate::util::fnv1a64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Generator configuration. Defaults give 8 base (train) and 4 held-out
/// novel (test) shape families at 64×64 with enough samples per novel
/// class for 20-shot evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub image_size: usize,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub train_supports: usize,
    pub train_queries: usize,
    pub test_supports: usize,
    pub test_queries: usize,
    pub distractors: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            base_classes: ["disk", "square", "triangle", "cross", "ring", "star", "bar", "l_shape"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            novel_classes: ["ellipse", "diamond", "crescent", "t_shape"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            train_supports: 25,
            train_queries: 12,
            test_supports: 25,
            test_queries: 12,
            distractors: true,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<Vec<(ShapeFamily, bool)>> {
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(Error::Config("both class splits must be nonempty".into()));
        }
        if self.base_classes.len() + self.novel_classes.len() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut families = Vec::new();
        for (names, is_base) in [(&self.base_classes, true), (&self.novel_classes, false)] {
            for name in names {
                let f = ShapeFamily::parse(name)
                    .ok_or_else(|| Error::Config(format!("unknown shape family {name:?}")))?;
                if families.iter().any(|(g, _)| *g == f) {
                    return Err(Error::Config(format!("class {name:?} appears twice")));
                }
                families.push((f, is_base));
            }
        }
        if self.test_supports < 20 || self.test_queries < 10 {
            return Err(Error::Config(
                "test split needs at least 20 supports and 10 queries per class".into(),
            ));
        }
        Ok(families)
    }
}

/// Generate a dataset under `root` and return its validated index.
pub fn generate_dataset(root: &Path, cfg: &GenConfig, seed: u64) -> Result<DatasetIndex> {
    let families = cfg.validate()?;
    let mut records = Vec::new();
    for (family, is_base) in &families {
        let split = if *is_base { "train" } else { "test" };
        let (n_sup, n_qry) = if *is_base {
            (cfg.train_supports, cfg.train_queries)
        } else {
            (cfg.test_supports, cfg.test_queries)
        };
        let class = family.name();
        for role_dir in ["support", "query"] {
            let dir = root.join(split).join(class).join(role_dir);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for idx in 0..n_sup {
            let mut rng = sample_rng(seed, split, class, "support", idx);
            let (image, mask) = compose_support(cfg, *family, &mut rng);
            let rec = write_sample(root, split, class, "support", idx, &image, &mask, &[])?;
            records.push(rec);
        }
        for idx in 0..n_qry {
            let mut rng = sample_rng(seed, split, class, "query", idx);
            let tag = ALL_TAGS[idx % ALL_TAGS.len()];
            let (image, mask) = compose_query(cfg, *family, tag, &mut rng)?;
            let rec = write_sample(root, split, class, "query", idx, &image, &mask, &[tag])?;
            records.push(rec);
        }
    }
    let manifest = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    let manifest_path = root.join("manifest.json");
    std::fs::write(&manifest_path, manifest + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    load_manifest(root)
}

fn sample_rng(seed: u64, split: &str, class: &str, role: &str, idx: usize) -> ChaCha8Rng {
    let key = format!("{seed}/{split}/{class}/{role}/{idx}");
    ChaCha8Rng::seed_from_u64(fnv1a64(key.as_bytes()))
}

#[allow(clippy::too_many_arguments)]
fn write_sample(
    root: &Path,
    split: &str,
    class: &str,
    role: &str,
    idx: usize,
    image: &Raster,
    mask: &Mask,
    tags: &[HardTag],
) -> Result<ManifestRecord> {
    let rel_img = format!("{split}/{class}/{role}/{idx:04}.img.pgm");
    let rel_mask = format!("{split}/{class}/{role}/{idx:04}.mask.pgm");
    write_image_pgm(&root.join(&rel_img), image)?;
    write_mask_pgm(&root.join(&rel_mask), mask)?;
    Ok(ManifestRecord {
        image: rel_img,
        mask: rel_mask,
        class: class.to_string(),
        role: role.to_string(),
        tags: tags.iter().map(|t| t.name().to_string()).collect(),
        split: split.to_string(),
    })
}

fn textured_background(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut bg = value_noise(size, size, rng);
    for v in &mut bg.data {
        *v = (0.5 + (*v - 0.5) * 0.7).clamp(0.2, 0.8);
    }
    bg
}

/// Characteristic foreground intensity band per family. Classes in real
/// scenes carry appearance signatures; the bands give support exemplars a
/// cue that transfers to queries of the same class (camouflage deliberately
/// destroys it). The band order interleaves the family list so neither
/// split monopolizes an end of the range.
fn family_intensity(family: ShapeFamily) -> f64 {
    const ORDER: [usize; 12] = [0, 6, 3, 9, 1, 7, 4, 10, 2, 8, 5, 11];
    let idx = ALL_FAMILIES.iter().position(|f| *f == family).unwrap();
    0.58 + 0.32 * ORDER[idx] as f64 / 11.0
}

fn sample_intensity(family: ShapeFamily, rng: &mut ChaCha8Rng) -> f64 {
    family_intensity(family) + 0.015 * (2.0 * rng.random::<f64>() - 1.0)
}

struct Placement {
    cx: f64,
    cy: f64,
    extent: f64,
}

fn place(rng: &mut ChaCha8Rng, size: usize, lo_frac: f64, hi_frac: f64) -> Placement {
    let s = size as f64;
    let extent = s * (lo_frac + (hi_frac - lo_frac) * rng.random::<f64>());
    let margin = extent + 3.0;
    let cx = margin + (s - 2.0 * margin) * rng.random::<f64>();
    let cy = margin + (s - 2.0 * margin) * rng.random::<f64>();
    Placement { cx, cy, extent }
}

/// Supports are the clean, controlled captures of the split: the target
/// sits near the frame center (small jitter only). Centered supports also
/// keep K-shot feature/mask averages overlapping instead of diluting.
fn place_centered(rng: &mut ChaCha8Rng, size: usize, lo_frac: f64, hi_frac: f64) -> Placement {
    let s = size as f64;
    let extent = s * (lo_frac + (hi_frac - lo_frac) * rng.random::<f64>());
    let jitter = 0.05 * s;
    let cx = s / 2.0 + jitter * (2.0 * rng.random::<f64>() - 1.0);
    let cy = s / 2.0 + jitter * (2.0 * rng.random::<f64>() - 1.0);
    Placement { cx, cy, extent }
}

fn paint_shape(image: &mut Raster, mask: &Mask, intensity: f64, texture: &Raster) {
    for i in 0..mask.data.len() {
        if mask.data[i] != 0 {
            image.data[i] = (intensity + 0.08 * (texture.data[i] - 0.5)).clamp(0.0, 1.0);
        }
    }
}

fn compose_support(cfg: &GenConfig, family: ShapeFamily, rng: &mut ChaCha8Rng) -> (Raster, Mask) {
    let size = cfg.image_size;
    let mut image = textured_background(size, rng);
    let texture = value_noise(size, size, rng);
    let jitter = ShapeJitter::sample(rng);
    let p = place_centered(rng, size, 0.16, 0.25);
    let intensity = sample_intensity(family, rng);
    let mask = render_mask(family, p.cx, p.cy, p.extent, p.extent, size, size, &jitter);
    paint_shape(&mut image, &mask, intensity, &texture);
    (image, mask)
}

fn compose_query(
    cfg: &GenConfig,
    family: ShapeFamily,
    tag: HardTag,
    rng: &mut ChaCha8Rng,
) -> Result<(Raster, Mask)> {
    let size = cfg.image_size;
    let mut image = textured_background(size, rng);
    let texture = value_noise(size, size, rng);
    let jitter = ShapeJitter::sample(rng);
    let p = place(rng, size, 0.13, 0.2);
    let intensity = sample_intensity(family, rng);
    let mut mask = render_mask(family, p.cx, p.cy, p.extent, p.extent, size, size, &jitter);
    paint_shape(&mut image, &mask, intensity, &texture);

    if cfg.distractors {
        for _ in 0..4 {
            add_distractor(&mut image, &mask, family, size, &texture, rng);
        }
    }
    apply_hard_transform(&mut image, &mut mask, tag, rng)?;
    if mask.fg_count() == 0 {
        return Err(Error::Contract("query mask became empty".into()));
    }
    Ok((image, mask))
}

/// Draw one shape of a different family into the image only. The distractor
/// keeps a clear gap to the target so camouflage statistics stay local.
fn add_distractor(
    image: &mut Raster,
    target_mask: &Mask,
    target_family: ShapeFamily,
    size: usize,
    texture: &Raster,
    rng: &mut ChaCha8Rng,
) {
    let others: Vec<ShapeFamily> =
        ALL_FAMILIES.into_iter().filter(|f| *f != target_family).collect();
    let family = others[rng.random_range(0..others.len())];
    let jitter = ShapeJitter::sample(rng);
    let intensity = sample_intensity(family, rng);
    let gap = (8 * size / 64).max(6);
    let target_box = target_mask.bbox().expect("target rendered nonempty");

    let mut shrink = 1.0;
    for attempt in 0..120 {
        if attempt > 0 && attempt % 40 == 0 {
            shrink *= 0.8;
        }
        let p = place(rng, size, 0.10 * shrink, 0.16 * shrink);
        let mask = render_mask(family, p.cx, p.cy, p.extent, p.extent, size, size, &jitter);
        let Some(dbox) = mask.bbox() else { continue };
        if box_gap(target_box, dbox) >= gap {
            paint_shape(image, &mask, intensity, texture);
            return;
        }
    }
    // no admissible placement; leave the scene without a distractor
}

/// Largest axis-aligned gap between two inclusive boxes; 0 when they touch
/// or overlap on both axes.
fn box_gap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> usize {
    let gx = if b.0 > a.2 {
        b.0 - a.2
    } else if a.0 > b.2 {
        a.0 - b.2
    } else {
        0
    };
    let gy = if b.1 > a.3 {
        b.1 - a.3
    } else if a.1 > b.3 {
        a.1 - b.3
    } else {
        0
    };
    gx.max(gy)
}
