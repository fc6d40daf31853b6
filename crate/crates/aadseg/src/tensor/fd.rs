//! Central-difference gradient verification.
//!
//! The checks here are the independent oracle for every adjoint in the
//! engine: they evaluate the forward map twice per coordinate and never
//! consult the backward implementation they are validating.

use super::graph::Graph;
use super::params::{ParamId, ParamSet};
use super::Tensor;
use crate::error::{Error, Result};

pub const FD_EPS_MIN: f64 = 1e-6;
pub const FD_EPS_MAX: f64 = 1e-4;

fn check_eps(eps: f64) -> Result<()> {
    if !(FD_EPS_MIN..=FD_EPS_MAX).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference eps {eps} outside [{FD_EPS_MIN}, {FD_EPS_MAX}]"
        )));
    }
    Ok(())
}

fn rel_err(analytic: f64, estimate: f64) -> f64 {
    (analytic - estimate).abs() / analytic.abs().max(1.0)
}

/// Compare the analytic gradient of a scalar-valued map against central
/// differences over every coordinate of `x`. Returns the maximum relative
/// error `|analytic − fd| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &Tensor) -> Result<Tensor>,
{
    check_eps(eps)?;
    let mut ps = ParamSet::new();
    let id = ps.add("fd_input", x.shape().to_vec(), x.data().to_vec())?;

    let g = Graph::new();
    let leaf = g.leaf(&ps, id);
    let out = f(&g, &leaf)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    g.backward(&out, &mut ps)?;
    let analytic = ps.grad(id).unwrap_or(&[]).to_vec();
    if analytic.is_empty() {
        return Err(Error::DetachedLoss);
    }

    let eval = |values: &[f64]| -> Result<f64> {
        let g = Graph::new();
        let t = Tensor::new(x.shape().to_vec(), values.to_vec())?;
        f(&g, &t)?.item()
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = eval(&probe)?;
        probe[i] = orig - eps;
        let lo = eval(&probe)?;
        probe[i] = orig;
        let fd = (hi - lo) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic[i], fd));
    }
    Ok(max_err)
}

/// Finite-difference check over selected coordinates of a parameter set.
///
/// `build_loss` must rebuild the full forward pass from scratch; it is
/// invoked once for the analytic gradients and twice per probed coordinate.
pub fn finite_diff_check_params<F>(
    build_loss: F,
    params: &mut ParamSet,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&Graph, &ParamSet) -> Result<Tensor>,
{
    check_eps(eps)?;
    params.clear_grads();
    let g = Graph::new();
    let loss = build_loss(&g, params)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    g.backward(&loss, params)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, j)| params.grad(id).map(|g| g[j]).unwrap_or(0.0))
        .collect();

    let mut max_err: f64 = 0.0;
    for (c, &(id, j)) in coords.iter().enumerate() {
        let orig = params.value(id)[j];
        let mut bumped = params.value(id).to_vec();

        bumped[j] = orig + eps;
        params.set_value(id, bumped.clone())?;
        let g = Graph::new();
        let hi = build_loss(&g, params)?.item()?;

        bumped[j] = orig - eps;
        params.set_value(id, bumped.clone())?;
        let g = Graph::new();
        let lo = build_loss(&g, params)?.item()?;

        bumped[j] = orig;
        params.set_value(id, bumped)?;

        let fd = (hi - lo) / (2.0 * eps);
        max_err = max_err.max(rel_err(analytic[c], fd));
    }
    params.clear_grads();
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::ones(vec![2]);
        let err = finite_diff_check(|g, t| g.sum_all(t), &x, 1e-3);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn linear_functional_is_exact() {
        let x = Tensor::new(vec![3], vec![0.4, -2.0, 1.0]).unwrap();
        let err = finite_diff_check(|g, t| g.sum_all(t), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "linear map should be FD-exact, err {err}");
    }

    #[test]
    fn sum_of_softmax_has_vanishing_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -0.8, 0.1, 0.5]).unwrap();
        let err = finite_diff_check(
            |g, t| {
                let s = g.softmax_lastdim(t)?;
                g.sum_all(&s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        // Analytic gradient is ~0 and the FD estimate agrees.
        assert!(err < 1e-6, "softmax-sum constant functional, err {err}");
    }

    #[test]
    fn non_scalar_map_is_rejected() {
        let x = Tensor::ones(vec![2]);
        let r = finite_diff_check(|g, t| g.relu(t), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
    }

    /// Every differentiable op passes the finite-difference oracle on
    /// several random double-precision inputs.
    #[test]
    fn all_ops_pass_fd_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let seed_b = random_tensor(&mut rng, vec![4, 3]);
            let x = random_tensor(&mut rng, vec![5, 4]);
            let err = finite_diff_check(
                |g, t| {
                    let y = g.matmul(t, &seed_b)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "matmul trial {trial}: err {err}");

            let x = random_tensor(&mut rng, vec![3, 4]);
            let err = finite_diff_check(
                |g, t| {
                    let s = g.softmax_lastdim(t)?;
                    let sq = g.mul(&s, &s)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "softmax trial {trial}: err {err}");

            let gamma = random_tensor(&mut rng, vec![4]);
            let beta = random_tensor(&mut rng, vec![4]);
            let x = random_tensor(&mut rng, vec![3, 4]);
            let err = finite_diff_check(
                |g, t| {
                    let y = g.layer_norm(t, &gamma, &beta)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "layer_norm trial {trial}: err {err}");

            let w = random_tensor(&mut rng, vec![3, 2, 3, 3]);
            let b = random_tensor(&mut rng, vec![3]);
            let x = random_tensor(&mut rng, vec![2, 6, 6]);
            let err = finite_diff_check(
                |g, t| {
                    let y = g.conv2d(t, &w, &b, 1, 1)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "conv2d trial {trial}: err {err}");

            let x = random_tensor(&mut rng, vec![2, 3, 3]);
            let err = finite_diff_check(
                |g, t| {
                    let y = g.upsample_bilinear(t, 2)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "upsample trial {trial}: err {err}");

            // relu probed away from the kink
            let n = 12;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
                    if v.abs() < 1e-2 {
                        v + 0.5 * v.signum().max(0.5)
                    } else {
                        v
                    }
                })
                .collect();
            let x = Tensor::new(vec![n], data).unwrap();
            let err = finite_diff_check(
                |g, t| {
                    let y = g.relu(t)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "relu trial {trial}: err {err}");

            let x = random_tensor(&mut rng, vec![2, 5]);
            let err = finite_diff_check(
                |g, t| {
                    let y = g.sigmoid(t)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "sigmoid trial {trial}: err {err}");

            let m = random_tensor(&mut rng, vec![3, 2]);
            let x = random_tensor(&mut rng, vec![4, 3, 2]);
            let err = finite_diff_check(
                |g, t| {
                    let y = g.mul_channels(t, &m)?;
                    let sq = g.mul(&y, &y)?;
                    g.sum_all(&sq)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "mul_channels trial {trial}: err {err}");

            let target =
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            let x = random_tensor(&mut rng, vec![2, 2, 2]);
            let err = finite_diff_check(|g, t| g.bce_with_logits(t, &target), &x, 1e-5).unwrap();
            assert!(err < 1e-3, "bce trial {trial}: err {err}");
        }
    }
}
