//! Fusion of the coarse mask pyramid with distilled queries, the mixing
//! decoder, the training loss, and prediction.
//!
//! At each scale the decoder input concatenates mask-gated projected query
//! features (l channels) with mask-gated query response maps (N channels,
//! one per distilled query: the logistic of ⟨q̂_n, P(x,y)⟩/√l). Three
//! mixing modules of two 3×3 convs compress (l+N) → l/2 → l/4 → 16 → 2
//! while two learned-path ×2 upsamples climb 1/32 → 1/8; a final bilinear
//! ×8 restores full resolution.

use crate::dataset::Mask;
use crate::encoder::{ConvLayer, Pyramid};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;

/// Per-query spatial response maps: r_n(x,y) = σ(⟨q̂_n, P(·,x,y)⟩/√l).
pub fn query_response_maps(g: &Graph, q_hat: &Tensor, proj: &Tensor) -> Result<Tensor> {
    let qs = q_hat.shape();
    let ps = proj.shape();
    if qs.len() != 2 || ps.len() != 3 || qs[1] != ps[0] {
        return Err(Error::Dimension(format!(
            "response maps need q̂ [N,l] and P [l,h,w], got {qs:?} / {ps:?}"
        )));
    }
    let (n, l) = (qs[0], qs[1]);
    let (h, w) = (ps[1], ps[2]);
    let p_rows = g.to_rows(proj)?; // (h·w) × l
    let logits = g.scale(&g.matmul_nt(q_hat, &p_rows)?, 1.0 / (l as f64).sqrt())?;
    let resp = g.sigmoid(&logits)?;
    g.reshape(&resp, vec![n, h, w])
}

/// Fuse one scale: mask-gated features, and (when queries are present)
/// mask-gated response maps concatenated on top.
pub fn fuse(g: &Graph, coarse: &Tensor, q_hat: Option<&Tensor>, proj: &Tensor) -> Result<Tensor> {
    let base = g.mul_channels(proj, coarse)?;
    match q_hat {
        None => Ok(base),
        Some(q) => {
            let resp = query_response_maps(g, q, proj)?;
            let gated = g.mul_channels(&resp, coarse)?;
            g.concat_channels(&base, &gated)
        }
    }
}

/// The mixing decoder. `entry_channels` is l (+N when the query path is
/// enabled); `l` must be divisible by 4.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub entry_channels: usize,
    mix1a: ConvLayer,
    mix1b: ConvLayer,
    proj16: ConvLayer,
    mix2a: ConvLayer,
    mix2b: ConvLayer,
    proj8: ConvLayer,
    mix3a: ConvLayer,
    mix3b: ConvLayer,
}

impl Decoder {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        entry_channels: usize,
        l: usize,
    ) -> Result<Self> {
        if l < 8 || l % 4 != 0 {
            return Err(Error::Config(format!("query width {l} must be a multiple of 4, at least 8")));
        }
        let c1 = l / 2;
        let c2 = l / 4;
        let decoder = Decoder {
            entry_channels,
            mix1a: ConvLayer::init(params, rng, "decoder.mix1a", entry_channels, c1, 3, 1, 1)?,
            mix1b: ConvLayer::init(params, rng, "decoder.mix1b", c1, c1, 3, 1, 1)?,
            proj16: ConvLayer::init(params, rng, "decoder.proj16", entry_channels, c1, 1, 1, 0)?,
            mix2a: ConvLayer::init(params, rng, "decoder.mix2a", c1, c2, 3, 1, 1)?,
            mix2b: ConvLayer::init(params, rng, "decoder.mix2b", c2, c2, 3, 1, 1)?,
            proj8: ConvLayer::init(params, rng, "decoder.proj8", entry_channels, c2, 1, 1, 0)?,
            mix3a: ConvLayer::init(params, rng, "decoder.mix3a", c2, 16, 3, 1, 1)?,
            mix3b: ConvLayer::init(params, rng, "decoder.mix3b", 16, 2, 3, 1, 1)?,
        };
        // background-prior bias on the logit layer: targets cover a small
        // pixel fraction, so starting near the base rate frees the first
        // optimizer steps for localization instead of calibration
        params.set_value(decoder.mix3b.b, vec![1.5, -1.5])?;
        Ok(decoder)
    }

    /// Fused pyramid → 2×H×W logits at the input resolution.
    pub fn decode(&self, g: &Graph, params: &ParamSet, fused: &Pyramid<Tensor>) -> Result<Tensor> {
        for t in fused.as_array() {
            if t.shape().first() != Some(&self.entry_channels) {
                return Err(Error::Dimension(format!(
                    "fused map has {:?} channels, decoder expects {}",
                    t.shape().first(),
                    self.entry_channels
                )));
            }
        }
        let x = g.relu(&self.mix1a.apply(g, params, &fused.s32)?)?;
        let x = g.relu(&self.mix1b.apply(g, params, &x)?)?;
        let x = g.upsample_bilinear(&x, 2)?;
        let x = g.add(&x, &self.proj16.apply(g, params, &fused.s16)?)?;
        let x = g.relu(&self.mix2a.apply(g, params, &x)?)?;
        let x = g.relu(&self.mix2b.apply(g, params, &x)?)?;
        let x = g.upsample_bilinear(&x, 2)?;
        let x = g.add(&x, &self.proj8.apply(g, params, &fused.s8)?)?;
        let x = g.relu(&self.mix3a.apply(g, params, &x)?)?;
        let logits = self.mix3b.apply(g, params, &x)?;
        g.upsample_bilinear(&logits, 8)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            &self.mix1a, &self.mix1b, &self.proj16, &self.mix2a, &self.mix2b, &self.proj8,
            &self.mix3a, &self.mix3b,
        ]
        .iter()
        .flat_map(|c| c.ids())
        .collect()
    }
}

/// Mean binary cross-entropy between two-channel logits and a binary mask.
pub fn bce_loss(g: &Graph, logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    g.bce_with_logits(logits, gt)
}

/// Per-pixel argmax over the two channels; exact logit ties go to
/// background.
pub fn predict(logits: &Tensor) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Dimension(format!("predict expects [2,h,w] logits, got {s:?}")));
    }
    let pixels = s[1] * s[2];
    let (bg, fg) = logits.data().split_at(pixels);
    let data = bg.iter().zip(fg).map(|(&b, &f)| (f > b) as u8).collect();
    Ok(Mask { width: s[2], height: s[1], data })
}

/// Per-pixel foreground probability (softmax over the two channels).
pub fn foreground_prob(logits: &Tensor) -> Result<Vec<f64>> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::Dimension(format!("expected [2,h,w] logits, got {s:?}")));
    }
    let pixels = s[1] * s[2];
    let (bg, fg) = logits.data().split_at(pixels);
    Ok(bg
        .iter()
        .zip(fg)
        .map(|(&b, &f)| {
            let m = b.max(f);
            let (eb, ef) = ((b - m).exp(), (f - m).exp());
            ef / (eb + ef)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn zero_queries_or_features_give_half_responses() {
        let g = Graph::new();
        let q = Tensor::zeros(vec![3, 4]);
        let p = Tensor::new(vec![4, 2, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let r = query_response_maps(&g, &q, &p).unwrap();
        assert_eq!(r.shape(), &[3, 2, 2]);
        for v in r.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let q = Tensor::ones(vec![3, 4]);
        let p = Tensor::zeros(vec![4, 2, 2]);
        let r = query_response_maps(&g, &q, &p).unwrap();
        for v in r.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_response_matches_logistic() {
        let g = Graph::new();
        let q = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let p = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let r = query_response_maps(&g, &q, &p).unwrap();
        let expected = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((r.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn fuse_masks_annihilate_and_identity() {
        let g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::new(vec![4, 2, 2], (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
        let q = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random::<f64>()).collect()).unwrap();

        let zeros = Tensor::zeros(vec![2, 2]);
        let fused = fuse(&g, &zeros, Some(&q), &p).unwrap();
        assert_eq!(fused.shape(), &[7, 2, 2]);
        assert!(fused.data().iter().all(|&v| v == 0.0));

        let ones = Tensor::ones(vec![2, 2]);
        let fused = fuse(&g, &ones, Some(&q), &p).unwrap();
        assert_eq!(&fused.data()[..16], p.data());
    }

    #[test]
    fn fused_channel_count_is_width_plus_queries() {
        let g = Graph::new();
        let p = Tensor::ones(vec![64, 2, 2]);
        let q = Tensor::ones(vec![15, 64]);
        let ones = Tensor::ones(vec![2, 2]);
        let fused = fuse(&g, &ones, Some(&q), &p).unwrap();
        assert_eq!(fused.shape()[0], 79);
    }

    #[test]
    fn decode_restores_input_resolution_and_zero_maps_to_zero() {
        let mut params = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::init(&mut params, &mut rng, 12, 64).unwrap();
        // the logit layer carries a prior bias; zero it for the linear-path probe
        params.set_value(dec.mix3b.b, vec![0.0, 0.0]).unwrap();
        let g = Graph::new();
        let fused = Pyramid {
            s8: Tensor::zeros(vec![12, 8, 8]),
            s16: Tensor::zeros(vec![12, 4, 4]),
            s32: Tensor::zeros(vec![12, 2, 2]),
        };
        let logits = dec.decode(&g, &params, &fused).unwrap();
        assert_eq!(logits.shape(), &[2, 64, 64]);
        // with zero biases the all-zero pyramid stays zero
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn response_alignment_is_monotone_in_the_fused_channel() {
        // increasing ⟨q̂, P⟩ at a pixel must not decrease the gated value
        let g = Graph::new();
        let coarse = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let mut last = -1.0;
        for k in 0..10 {
            let q = Tensor::new(vec![1, 2], vec![k as f64 * 0.3, 0.1]).unwrap();
            let p = Tensor::new(vec![2, 1, 1], vec![1.0, 0.5]).unwrap();
            let fused = fuse(&g, &coarse, Some(&q), &p).unwrap();
            let v = fused.data()[2]; // the response channel
            assert!(v >= last - 1e-12, "gated response decreased");
            last = v;
        }
    }

    #[test]
    fn predictions_threshold_and_tie_to_background() {
        let logits = Tensor::zeros(vec![2, 2, 2]);
        let m = predict(&logits).unwrap();
        assert!(m.data.iter().all(|&v| v == 0), "exact ties go to background");

        let mut data = vec![0.0; 8];
        for p in 4..8 {
            data[p] = 1.0;
        }
        let logits = Tensor::new(vec![2, 2, 2], data).unwrap();
        let m = predict(&logits).unwrap();
        assert!(m.data.iter().all(|&v| v == 1));

        // shifting both channels by a constant changes nothing
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let logits = Tensor::new(vec![2, 2, 2], data.clone()).unwrap();
        let shifted =
            Tensor::new(vec![2, 2, 2], data.iter().map(|v| v + 3.7).collect()).unwrap();
        assert_eq!(predict(&logits).unwrap().data, predict(&shifted).unwrap().data);
    }

    #[test]
    fn bce_matches_direct_formula_on_random_instance() {
        let g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let gt: Vec<f64> = (0..16).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect();
        let logits = Tensor::new(vec![2, 4, 4], data.clone()).unwrap();
        let target = Tensor::new(vec![4, 4], gt.clone()).unwrap();
        let loss = bce_loss(&g, &logits, &target).unwrap().item().unwrap();

        let mut expected = 0.0;
        for p in 0..16 {
            let (z0, z1) = (data[p], data[16 + p]);
            let z = (z0.exp() + z1.exp()).ln();
            let (lp_bg, lp_fg) = (z0 - z, z1 - z);
            expected -= gt[p] * lp_fg + (1.0 - gt[p]) * lp_bg;
        }
        expected /= 16.0;
        assert!((loss - expected).abs() < 1e-12);
    }
}
