//! Finite-difference verification suite: every differentiable op, and the
//! full model forward on a small synthetic episode.
//!
//! Central differences evaluate the forward map only, so they stay
//! independent of the adjoints they certify.

use crate::dataset::{Episode, Mask, Raster};
use crate::error::Result;
use crate::model::{AadModel, ModelConfig};
use crate::tensor::{finite_diff_check, finite_diff_check_params, ParamId, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Per-op finite-difference checks on random double-precision inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64| results.push(CheckResult { name: name.into(), max_rel_err: err });

    let b = random_tensor(&mut rng, vec![4, 3]);
    let x = random_tensor(&mut rng, vec![5, 4]);
    push(
        "matmul",
        finite_diff_check(
            |g, t| {
                let y = g.matmul(t, &b)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let x = random_tensor(&mut rng, vec![3, 5]);
    push(
        "softmax_lastdim",
        finite_diff_check(
            |g, t| {
                let s = g.softmax_lastdim(t)?;
                let sq = g.mul(&s, &s)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let gamma = random_tensor(&mut rng, vec![6]);
    let beta = random_tensor(&mut rng, vec![6]);
    let x = random_tensor(&mut rng, vec![4, 6]);
    push(
        "layer_norm",
        finite_diff_check(
            |g, t| {
                let y = g.layer_norm(t, &gamma, &beta)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let w = random_tensor(&mut rng, vec![3, 2, 3, 3]);
    let bias = random_tensor(&mut rng, vec![3]);
    let x = random_tensor(&mut rng, vec![2, 6, 6]);
    push(
        "conv2d",
        finite_diff_check(
            |g, t| {
                let y = g.conv2d(t, &w, &bias, 2, 1)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let x = random_tensor(&mut rng, vec![2, 3, 3]);
    push(
        "bilinear_upsample",
        finite_diff_check(
            |g, t| {
                let y = g.upsample_bilinear(t, 2)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    // relu probed away from the kink
    let data: Vec<f64> = (0..12)
        .map(|_| {
            let v = rng.random::<f64>() * 2.0 - 1.0;
            if v.abs() < 1e-2 {
                v + 0.2 * if v >= 0.0 { 1.0 } else { -1.0 }
            } else {
                v
            }
        })
        .collect();
    let x = Tensor::new(vec![12], data).unwrap();
    push(
        "relu",
        finite_diff_check(
            |g, t| {
                let y = g.relu(t)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let x = random_tensor(&mut rng, vec![3, 4]);
    push(
        "sigmoid",
        finite_diff_check(
            |g, t| {
                let y = g.sigmoid(t)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let m = random_tensor(&mut rng, vec![3, 2]);
    let x = random_tensor(&mut rng, vec![4, 3, 2]);
    push(
        "mul_channels",
        finite_diff_check(
            |g, t| {
                let y = g.mul_channels(t, &m)?;
                let sq = g.mul(&y, &y)?;
                g.sum_all(&sq)
            },
            &x,
            FD_EPS,
        )?,
    );

    let target = Tensor::new(
        vec![3, 3],
        (0..9).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect(),
    )
    .unwrap();
    let x = random_tensor(&mut rng, vec![2, 3, 3]);
    push("bce_with_logits", finite_diff_check(|g, t| g.bce_with_logits(t, &target), &x, FD_EPS)?);

    Ok(results)
}

/// A compact synthetic episode for model-level checks: bright target on
/// textured noise, one distractor in the query.
pub fn synthetic_episode(size: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = |cx: usize, cy: usize, r: usize, distract: bool| {
        let mut img = Raster::filled(size, size, 0.0);
        for v in &mut img.data {
            *v = 0.35 + 0.3 * rng.random::<f64>();
        }
        let mut mask = Mask::empty(size, size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
                if dx * dx + dy * dy <= (r * r) as f64 {
                    mask.set(x, y, true);
                    img.set(x, y, 0.88);
                }
            }
        }
        if distract {
            let (ox, oy) = (size - cx, size - cy);
            for y in oy.saturating_sub(3)..(oy + 3).min(size) {
                for x in ox.saturating_sub(3)..(ox + 3).min(size) {
                    img.set(x, y, 0.85);
                }
            }
        }
        (img, mask)
    };
    let support = scene(size / 3, size / 2, size / 7, false);
    let (qi, qm) = scene(2 * size / 3, size / 3, size / 8, true);
    Episode {
        class: "probe".into(),
        supports: vec![support],
        query_image: qi,
        query_mask: qm,
        query_tags: vec![],
        seed: seed ^ 0x5eed,
    }
}

/// Finite-difference check of the complete forward (episode loss) against
/// `coords` randomly sampled parameter coordinates.
pub fn model_suite(size: usize, coords: usize, seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig::default();
    let model = AadModel::init(cfg, seed)?;
    let episode = synthetic_episode(size, seed.wrapping_add(1));

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let all_ids: Vec<ParamId> = model.params.ids().collect();
    let picked: Vec<(ParamId, usize)> = (0..coords)
        .map(|_| {
            let id = all_ids[rng.random_range(0..all_ids.len())];
            let idx = rng.random_range(0..model.params.value(id).len());
            (id, idx)
        })
        .collect();

    let mut params = model.params.clone();
    let err = finite_diff_check_params(
        |g, ps| model.episode_loss(g, ps, &episode),
        &mut params,
        &picked,
        FD_EPS,
    )?;
    Ok(CheckResult { name: format!("model_forward_{size}x{size}"), max_rel_err: err })
}

/// The whole verification suite, ops first.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(seed)?;
    results.push(model_suite(32, 20, seed)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_is_green() {
        for r in op_suite(3).unwrap() {
            assert!(r.passed(), "{} failed with {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn small_model_suite_is_green() {
        let r = model_suite(32, 6, 5).unwrap();
        assert!(r.passed(), "model FD check failed with {}", r.max_rel_err);
    }
}
