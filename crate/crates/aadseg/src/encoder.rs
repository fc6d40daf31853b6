//! Shared-weight multi-scale feature extractor.
//!
//! A small trainable CNN stands in for a pretrained backbone: two stride-2
//! 3×3 stem convs down to 1/4, then three stride-2 conv+relu stages
//! emitting the 1/8, 1/16 and 1/32 maps. Support and query images run
//! through the same parameters. A per-scale 1×1 projection reconciles the
//! differing scale widths with the common query width `l`.

use crate::dataset::{Mask, Raster};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SCALE_DIVISORS: [usize; 3] = [8, 16, 32];

/// Per-scale triple covering the 1/8, 1/16, 1/32 pyramid.
#[derive(Clone, Debug)]
pub struct Pyramid<T> {
    pub s8: T,
    pub s16: T,
    pub s32: T,
}

impl<T> Pyramid<T> {
    pub fn as_array(&self) -> [&T; 3] {
        [&self.s8, &self.s16, &self.s32]
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Pyramid<U>> {
        Ok(Pyramid { s8: f(&self.s8)?, s16: f(&self.s16)?, s32: f(&self.s32)? })
    }

    pub fn try_zip<U, V>(
        &self,
        other: &Pyramid<U>,
        mut f: impl FnMut(&T, &U) -> Result<V>,
    ) -> Result<Pyramid<V>> {
        Ok(Pyramid {
            s8: f(&self.s8, &other.s8)?,
            s16: f(&self.s16, &other.s16)?,
            s32: f(&self.s32, &other.s32)?,
        })
    }
}

/// One convolution layer: weight + bias handles plus geometry.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::init_with(params, rng, name, c_in, c_out, k, stride, pad, 0.0, 0.0)
    }

    /// He-normal weights mixed with a Dirac component of weight `carry`:
    /// output channel o additionally passes input channel o % c_in through
    /// the center tap. With carry > 0 a relu stack propagates a smoothed
    /// copy of its input from the first step, which gives the attention
    /// modules an informative intensity channel before any training.
    #[allow(clippy::too_many_arguments)]
    pub fn init_with(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        carry: f64,
        bias_std: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut w: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
            .collect();
        if carry > 0.0 {
            let center = (k / 2) * k + k / 2;
            for o in 0..c_out {
                let i = o % c_in;
                w[(o * c_in + i) * k * k + center] += carry;
            }
        }
        let b: Vec<f64> = (0..c_out)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * bias_std)
            .collect();
        let w = params.add(format!("{name}.w"), vec![c_out, c_in, k, k], w)?;
        let b = params.add(format!("{name}.b"), vec![c_out], b)?;
        Ok(ConvLayer { w, b, stride, pad })
    }

    pub fn apply(&self, g: &Graph, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = g.leaf(params, self.w);
        let b = g.leaf(params, self.b);
        g.conv2d(x, &w, &b, self.stride, self.pad)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: [usize; 2],
    pub scale_channels: [usize; 3],
    /// Dirac component mixed into the He-normal conv init; see
    /// [`ConvLayer::init_with`].
    pub carry: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            stem_channels: [32, 96],
            scale_channels: [32, 64, 128],
            carry: Encoder::CARRY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stem1: ConvLayer,
    stem2: ConvLayer,
    stage8: ConvLayer,
    stage16: ConvLayer,
    stage32: ConvLayer,
}

impl Encoder {
    /// Default Dirac carry weight; calibrated so the untrained attention
    /// logits neither flatten out nor saturate.
    pub const CARRY: f64 = 0.6;

    pub fn init(params: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Result<Self> {
        let [s1, s2] = cfg.stem_channels;
        let [c8, c16, c32] = cfg.scale_channels;
        let carry = cfg.carry;
        let mk = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name, ci, co| {
            ConvLayer::init_with(params, rng, name, ci, co, 3, 2, 1, carry, 0.1)
        };
        Ok(Encoder {
            stem1: mk(params, rng, "encoder.stem1", cfg.in_channels, s1)?,
            stem2: mk(params, rng, "encoder.stem2", s1, s2)?,
            stage8: mk(params, rng, "encoder.stage8", s2, c8)?,
            stage16: mk(params, rng, "encoder.stage16", c8, c16)?,
            stage32: mk(params, rng, "encoder.stage32", c16, c32)?,
            cfg,
        })
    }

    /// Multi-scale features for one image. The same parameters serve every
    /// call, so support and query branches share weights by construction.
    pub fn encode(&self, g: &Graph, params: &ParamSet, image: &Tensor) -> Result<Pyramid<Tensor>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(Error::Dimension(format!(
                "encoder expects [{}, H, W], got {s:?}",
                self.cfg.in_channels
            )));
        }
        if s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Dimension(format!(
                "encoder input {}x{} must be divisible by 32",
                s[1], s[2]
            )));
        }
        let x = g.relu(&self.stem1.apply(g, params, image)?)?;
        let x = g.relu(&self.stem2.apply(g, params, &x)?)?;
        let f8 = g.relu(&self.stage8.apply(g, params, &x)?)?;
        let f16 = g.relu(&self.stage16.apply(g, params, &f8)?)?;
        let f32_ = g.relu(&self.stage32.apply(g, params, &f16)?)?;
        // emitted maps are centered per channel: signed deviations from the
        // scene mean make the downstream attention contrastive instead of
        // compressing everything into the relu-positive orthant
        Ok(Pyramid {
            s8: g.center_channels(&f8)?,
            s16: g.center_channels(&f16)?,
            s32: g.center_channels(&f32_)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.stem1, &self.stem2, &self.stage8, &self.stage16, &self.stage32]
            .iter()
            .flat_map(|c| c.ids())
            .collect()
    }
}

/// Per-scale 1×1 projections onto the common query width.
#[derive(Clone, Debug)]
pub struct ScaleProjection {
    pub width: usize,
    projs: [ConvLayer; 3],
}

impl ScaleProjection {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        scale_channels: [usize; 3],
        width: usize,
    ) -> Result<Self> {
        let mk = |params: &mut ParamSet, rng: &mut ChaCha8Rng, i: usize, c_in: usize| {
            ConvLayer::init(params, rng, &format!("project.s{}", SCALE_DIVISORS[i]), c_in, width, 1, 1, 0)
        };
        Ok(ScaleProjection {
            width,
            projs: [
                mk(params, rng, 0, scale_channels[0])?,
                mk(params, rng, 1, scale_channels[1])?,
                mk(params, rng, 2, scale_channels[2])?,
            ],
        })
    }

    pub fn project(&self, g: &Graph, params: &ParamSet, feats: &Pyramid<Tensor>) -> Result<Pyramid<Tensor>> {
        Ok(Pyramid {
            s8: self.projs[0].apply(g, params, &feats.s8)?,
            s16: self.projs[1].apply(g, params, &feats.s16)?,
            s32: self.projs[2].apply(g, params, &feats.s32)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.projs.iter().flat_map(|c| c.ids()).collect()
    }
}

/// Average-pool a full-resolution binary mask down by `divisor`, giving a
/// soft occupancy map in [0,1]. Averaging (rather than nearest neighbor)
/// keeps sub-block targets visible.
pub fn downsample_mask(mask: &Mask, divisor: usize) -> Result<Tensor> {
    if mask.height % divisor != 0 || mask.width % divisor != 0 {
        return Err(Error::Dimension(format!(
            "mask {}x{} not divisible by {divisor}",
            mask.width, mask.height
        )));
    }
    let (oh, ow) = (mask.height / divisor, mask.width / divisor);
    let mut out = vec![0.0; oh * ow];
    let norm = (divisor * divisor) as f64;
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = 0usize;
            for dy in 0..divisor {
                for dx in 0..divisor {
                    sum += mask.at(bx * divisor + dx, by * divisor + dy) as usize;
                }
            }
            out[by * ow + bx] = sum as f64 / norm;
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// The soft mask at all three scales.
pub fn scaled_mask_pyramid(mask: &Mask) -> Result<Pyramid<Tensor>> {
    Ok(Pyramid {
        s8: downsample_mask(mask, SCALE_DIVISORS[0])?,
        s16: downsample_mask(mask, SCALE_DIVISORS[1])?,
        s32: downsample_mask(mask, SCALE_DIVISORS[2])?,
    })
}

/// Adapt a grayscale raster to a [1, H, W] tensor.
pub fn image_tensor(img: &Raster) -> Result<Tensor> {
    Tensor::new(vec![1, img.height, img.width], img.data.clone())
}

/// Adapt a binary mask to an [H, W] tensor of exact zeros and ones.
pub fn mask_tensor(mask: &Mask) -> Result<Tensor> {
    Tensor::new(
        vec![mask.height, mask.width],
        mask.data.iter().map(|&v| v as f64).collect(),
    )
}
