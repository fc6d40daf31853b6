//! The five hardness transforms applied to query samples.
//!
//! Each transform comes with a measurable postcondition, checked by the
//! dataset tests directly on the emitted pixels:
//! - camouflage: |mean(fg) − mean(surrounding ring)| < 0.05
//! - small:      foreground area < 1% of the image
//! - elongated:  foreground bounding-box aspect ratio ≥ 8
//! - missing:    an occluding bar covers ≥ 30% of the target pixels
//!               (the ground-truth mask keeps the full extent)
//! - blur:       5×5 box blur applied twice, image only

use super::raster::{box_blur, masked_mean, ring_mean, value_noise, Mask, Raster};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Intensity painted by the occluder bar; exactly representable in PGM so
/// erasure stays measurable after quantization.
pub const OCCLUDER_VALUE: f64 = 0.0;

/// Target gap left between foreground and ring means by the camouflage
/// transform (the contract allows up to 0.05).
pub const CAMOUFLAGE_GAP: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HardTag {
    Camouflage,
    Small,
    Elongated,
    Missing,
    Blur,
}

pub const ALL_TAGS: [HardTag; 5] =
    [HardTag::Camouflage, HardTag::Small, HardTag::Elongated, HardTag::Missing, HardTag::Blur];

impl HardTag {
    pub fn name(&self) -> &'static str {
        match self {
            HardTag::Camouflage => "camouflage",
            HardTag::Small => "small",
            HardTag::Elongated => "elongated",
            HardTag::Missing => "missing",
            HardTag::Blur => "blur",
        }
    }

    pub fn parse(s: &str) -> Result<HardTag> {
        ALL_TAGS
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown hardness tag {s:?}")))
    }
}

/// Apply one hardness transform in place. Deterministic under a seeded rng.
pub fn apply_hard_transform(
    image: &mut Raster,
    mask: &mut Mask,
    tag: HardTag,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if mask.fg_count() == 0 {
        return Err(Error::Contract("hard transform requires a nonempty mask".into()));
    }
    match tag {
        HardTag::Camouflage => camouflage(image, mask, rng),
        HardTag::Small => rescale_target(image, mask, rng, ScaleMode::Small),
        HardTag::Elongated => rescale_target(image, mask, rng, ScaleMode::Elongated),
        HardTag::Missing => missing(image, mask, rng),
        HardTag::Blur => {
            *image = box_blur(&box_blur(image, 2), 2);
            Ok(())
        }
    }
}

/// Replace the foreground with fresh texture whose mean sits within
/// `CAMOUFLAGE_GAP` of the surrounding ring mean. The texture is blurred
/// only once, so a faint statistical cue survives even though the mean
/// contrast is gone.
fn camouflage(image: &mut Raster, mask: &Mask, rng: &mut ChaCha8Rng) -> Result<()> {
    let target_ring = ring_mean(image, mask, 5);
    // unsmoothed noise: the mean contrast vanishes but the foreground keeps
    // a rougher texture than the blurred background
    let noise = value_noise_unsmoothed(image.width, image.height, rng);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mask.data.len() {
        if mask.data[i] != 0 {
            sum += noise.data[i];
            n += 1;
        }
    }
    let noise_mean = sum / n as f64;
    for i in 0..mask.data.len() {
        if mask.data[i] != 0 {
            let centered = noise.data[i] - noise_mean;
            image.data[i] = (target_ring + CAMOUFLAGE_GAP + 0.6 * centered).clamp(0.0, 1.0);
        }
    }
    // clamping can nudge the mean; one corrective shift keeps the gap exact
    for _ in 0..2 {
        let fg = masked_mean(image, mask).unwrap();
        let ring = ring_mean(image, mask, 5);
        let offset = (ring + CAMOUFLAGE_GAP) - fg;
        if offset.abs() < 1e-9 {
            break;
        }
        for i in 0..mask.data.len() {
            if mask.data[i] != 0 {
                image.data[i] = (image.data[i] + offset).clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

fn value_noise_unsmoothed(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut img = Raster::filled(width, height, 0.0);
    for v in &mut img.data {
        *v = rng.random::<f64>();
    }
    img
}

enum ScaleMode {
    Small,
    Elongated,
}

/// Nearest-neighbor warp of the target about its centroid. Vacated pixels
/// are filled with background-statistics texture.
fn rescale_target(
    image: &mut Raster,
    mask: &mut Mask,
    rng: &mut ChaCha8Rng,
    mode: ScaleMode,
) -> Result<()> {
    let (w, h) = (image.width, image.height);
    let total = (w * h) as f64;
    let fill = background_fill(image, mask, rng);
    let horizontal = rng.random::<f64>() < 0.5;

    let mut attempt = 0usize;
    loop {
        let area = mask.fg_count() as f64;
        let (x0, y0, x1, y1) = mask.bbox().unwrap();
        let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        let (cx, cy) = mask.centroid().unwrap();

        let (sx, sy, ncx, ncy) = match mode {
            ScaleMode::Small => {
                let shrink = 0.9f64.powi(attempt as i32);
                let s = (0.0093 * total / area).sqrt().min(1.0) * shrink;
                (s, s, cx, cy)
            }
            ScaleMode::Elongated => {
                let tighten = 0.85f64.powi(attempt as i32);
                let long = 0.72 * w.min(h) as f64;
                let short = (long / 10.0).max(2.0) * tighten;
                let (sx, sy) = if horizontal { (long / bw, short / bh) } else { (short / bw, long / bh) };
                // recenter so the stretched target stays inside the frame
                (sx, sy, w as f64 / 2.0, h as f64 / 2.0)
            }
        };

        let mut new_mask = Mask::empty(w, h);
        let mut new_vals = vec![None::<f64>; w * h];
        for y in 0..h {
            for x in 0..w {
                let su = cx + (x as f64 + 0.5 - ncx) / sx;
                let sv = cy + (y as f64 + 0.5 - ncy) / sy;
                let (ix, iy) = (su.floor() as isize, sv.floor() as isize);
                if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                    continue;
                }
                let (ix, iy) = (ix as usize, iy as usize);
                if mask.at(ix, iy) {
                    new_mask.set(x, y, true);
                    new_vals[y * w + x] = Some(image.at(ix, iy));
                }
            }
        }
        if new_mask.fg_count() == 0 {
            // degenerate shrink: keep the pixel nearest the centroid
            let px = (cx as usize).min(w - 1);
            let py = (cy as usize).min(h - 1);
            new_mask.set(px, py, true);
            new_vals[py * w + px] = masked_mean(image, mask);
        }

        let ok = match mode {
            ScaleMode::Small => (new_mask.fg_count() as f64) < 0.01 * total,
            ScaleMode::Elongated => {
                let (nx0, ny0, nx1, ny1) = new_mask.bbox().unwrap();
                let (nw, nh) = ((nx1 - nx0 + 1) as f64, (ny1 - ny0 + 1) as f64);
                nw.max(nh) / nw.min(nh) >= 8.0
            }
        };
        if ok || attempt >= 6 {
            apply_warp(image, mask, &new_mask, &new_vals, &fill);
            if !ok {
                return Err(Error::Contract("target rescale failed to meet its bound".into()));
            }
            return Ok(());
        }
        attempt += 1;
    }
}

fn apply_warp(image: &mut Raster, mask: &mut Mask, new_mask: &Mask, new_vals: &[Option<f64>], fill: &Raster) {
    for i in 0..mask.data.len() {
        match (new_vals[i], mask.data[i]) {
            (Some(v), _) => image.data[i] = v,
            (None, 1) => image.data[i] = fill.data[i], // vacated by the warp
            _ => {}
        }
    }
    *mask = new_mask.clone();
}

/// Texture matched to the current background statistics, used to fill
/// pixels the target vacates.
fn background_fill(image: &Raster, mask: &Mask, rng: &mut ChaCha8Rng) -> Raster {
    let bg_mean = super::raster::background_mean(image, mask);
    let mut noise = value_noise(image.width, image.height, rng);
    for v in &mut noise.data {
        *v = (bg_mean + 0.5 * (*v - 0.5)).clamp(0.0, 1.0);
    }
    noise
}

/// Paint a full-height (or full-width) occluder bar through the target so
/// that it hides at least a third of the foreground pixels. The mask is
/// left untouched: the occluder sits in front of the target, not in place
/// of it.
fn missing(image: &mut Raster, mask: &Mask, rng: &mut ChaCha8Rng) -> Result<()> {
    let (w, h) = (image.width, image.height);
    let area = mask.fg_count();
    let need = (area as f64 * 0.34).ceil() as usize;
    let vertical = rng.random::<f64>() < 0.5;

    let lanes = if vertical { w } else { h };
    let mut counts = vec![0usize; lanes];
    for y in 0..h {
        for x in 0..w {
            if mask.at(x, y) {
                counts[if vertical { x } else { y }] += 1;
            }
        }
    }
    // weighted median lane, then grow the window greedily toward the side
    // with more remaining target pixels
    let mut acc = 0usize;
    let mut median = 0usize;
    for (i, &c) in counts.iter().enumerate() {
        acc += c;
        if acc * 2 >= area {
            median = i;
            break;
        }
    }
    let (mut lo, mut hi) = (median, median);
    let mut covered = counts[median];
    while covered < need {
        let left = if lo > 0 { counts[lo - 1] } else { 0 };
        let right = if hi + 1 < lanes { counts[hi + 1] } else { 0 };
        if left == 0 && right == 0 {
            if lo > 0 {
                lo -= 1;
            } else if hi + 1 < lanes {
                hi += 1;
            } else {
                break;
            }
            continue;
        }
        if left >= right {
            lo -= 1;
            covered += left;
        } else {
            hi += 1;
            covered += right;
        }
    }
    if covered < need {
        return Err(Error::Contract("occluder cannot reach the erasure bound".into()));
    }
    for y in 0..h {
        for x in 0..w {
            let lane = if vertical { x } else { y };
            if lane >= lo && lane <= hi {
                image.set(x, y, OCCLUDER_VALUE);
            }
        }
    }
    Ok(())
}
