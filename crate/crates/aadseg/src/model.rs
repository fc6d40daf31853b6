//! The wired segmentation model and its ablation arms.
//!
//! Arms share one skeleton:
//! - baseline: no correlation learner, no query path. The coarse pyramid is
//!   replaced by constant one-maps, so the decoder sees unfiltered query
//!   features and support images are ignored entirely.
//! - +CL: attention mask transfer gates the query features.
//! - full: +CL plus the distilled-query response channels, with the update
//!   rule chosen by the fusion variant.

use crate::aad::{AadLearner, FusionVariant};
use crate::correlation::{average_supports, correlation_forward};
use crate::dataset::{Episode, Mask, Raster};
use crate::decoder::{bce_loss, fuse, Decoder};
use crate::encoder::{
    image_tensor, mask_tensor, scaled_mask_pyramid, Encoder, EncoderConfig, Pyramid,
    ScaleProjection,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor};
use crate::util::fnv1a64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Common query width l shared by projections, queries and decoder.
    pub query_width: usize,
    /// Number of distilled class queries N.
    pub n_queries: usize,
    pub enable_cl: bool,
    pub enable_aad: bool,
    pub fusion: FusionVariant,
    pub stem_channels: [usize; 2],
    pub scale_channels: [usize; 3],
    /// Dirac carry mixed into the encoder conv init.
    pub carry: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        ModelConfig {
            in_channels: enc.in_channels,
            query_width: 64,
            n_queries: 15,
            enable_cl: true,
            enable_aad: true,
            fusion: FusionVariant::Aad,
            stem_channels: enc.stem_channels,
            scale_channels: enc.scale_channels,
            carry: enc.carry,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enable_aad && !self.enable_cl {
            return Err(Error::Config(
                "the query path consumes the coarse pyramid; enable_aad requires enable_cl".into(),
            ));
        }
        if self.enable_aad && self.n_queries == 0 {
            return Err(Error::Config("n_queries must be at least 1 when the query path is on".into()));
        }
        Ok(())
    }

    /// Architecture fingerprint stored in checkpoints: loading under a
    /// different architecture is an error, not a silent mismatch.
    pub fn fingerprint(&self) -> u64 {
        let key = format!(
            "{}|{}|{}|{}|{}|{}|{:?}|{:?}",
            self.in_channels,
            self.query_width,
            self.n_queries,
            self.enable_cl,
            self.enable_aad,
            self.fusion.name(),
            self.stem_channels,
            self.scale_channels,
        );
        fnv1a64(key.as_bytes())
    }
}

pub struct AadModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub projection: ScaleProjection,
    pub aad: Option<AadLearner>,
    pub decoder: Decoder,
}

impl AadModel {
    /// Build an arm with seeded-normal initialization.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(
            &mut params,
            &mut rng,
            EncoderConfig {
                in_channels: cfg.in_channels,
                stem_channels: cfg.stem_channels,
                scale_channels: cfg.scale_channels,
                carry: cfg.carry,
            },
        )?;
        let projection =
            ScaleProjection::init(&mut params, &mut rng, cfg.scale_channels, cfg.query_width)?;
        let aad = if cfg.enable_aad {
            Some(AadLearner::init(&mut params, &mut rng, cfg.query_width, cfg.n_queries)?)
        } else {
            None
        };
        let entry = cfg.query_width + if cfg.enable_aad { cfg.n_queries } else { 0 };
        let decoder = Decoder::init(&mut params, &mut rng, entry, cfg.query_width)?;
        Ok(AadModel { cfg, params, encoder, projection, aad, decoder })
    }

    pub fn entry_channels(&self) -> usize {
        self.decoder.entry_channels
    }

    pub fn encode_image(&self, g: &Graph, params: &ParamSet, image: &Raster) -> Result<Pyramid<Tensor>> {
        self.encoder.encode(g, params, &image_tensor(image)?)
    }

    /// Core forward from already-encoded pyramids. `support` carries the
    /// (features, scaled-masks) pair and may be None only for the baseline
    /// arm, which ignores supports.
    pub fn forward_parts(
        &self,
        g: &Graph,
        params: &ParamSet,
        support: Option<(&Pyramid<Tensor>, &Pyramid<Tensor>)>,
        query_feats: &Pyramid<Tensor>,
        episode_seed: u64,
    ) -> Result<Tensor> {
        let coarse = if self.cfg.enable_cl {
            let (sf, sm) = support.ok_or_else(|| {
                Error::Config("this arm uses the correlation learner; supports are required".into())
            })?;
            correlation_forward(g, sf, query_feats, sm)?
        } else {
            query_feats.try_map(|f| {
                let s = f.shape();
                Ok(Tensor::ones(vec![s[1], s[2]]))
            })?
        };
        let query_proj = self.projection.project(g, params, query_feats)?;
        let q_hat = match &self.aad {
            Some(learner) => {
                let (sf, sm) = support.ok_or_else(|| {
                    Error::Config("the query path distills from supports; supports are required".into())
                })?;
                let support_proj = self.projection.project(g, params, sf)?;
                Some(learner.distill(
                    g,
                    params,
                    self.cfg.fusion,
                    &support_proj,
                    &query_proj,
                    sm,
                    &coarse,
                    episode_seed,
                )?)
            }
            None => None,
        };
        let fused = Pyramid {
            s8: fuse(g, &coarse.s8, q_hat.as_ref(), &query_proj.s8)?,
            s16: fuse(g, &coarse.s16, q_hat.as_ref(), &query_proj.s16)?,
            s32: fuse(g, &coarse.s32, q_hat.as_ref(), &query_proj.s32)?,
        };
        self.decoder.decode(g, params, &fused)
    }

    /// One full segmentation forward for an episode's query. With several
    /// supports, `average` collapses them at the feature/mask level before
    /// a single pass (per-support voting instead loops single-support
    /// calls).
    pub fn forward_episode(
        &self,
        g: &Graph,
        params: &ParamSet,
        supports: &[(Raster, Mask)],
        query_image: &Raster,
        episode_seed: u64,
        average: bool,
    ) -> Result<Tensor> {
        let query_feats = self.encode_image(g, params, query_image)?;
        let needs_support = self.cfg.enable_cl || self.cfg.enable_aad;
        let support = if needs_support {
            if supports.is_empty() {
                return Err(Error::Contract("episode has no support samples".into()));
            }
            if supports.len() > 1 && !average {
                return Err(Error::Config(
                    "multiple supports need feature averaging; voting loops single-support passes"
                        .into(),
                ));
            }
            let mut feats = Vec::with_capacity(supports.len());
            let mut masks = Vec::with_capacity(supports.len());
            for (img, mask) in supports {
                feats.push(self.encode_image(g, params, img)?);
                masks.push(scaled_mask_pyramid(mask)?);
            }
            if supports.len() == 1 {
                Some((feats.remove(0), masks.remove(0)))
            } else {
                let (f, m) = average_supports(g, &feats, &masks)?;
                Some((f, m))
            }
        } else {
            None
        };
        self.forward_parts(
            g,
            params,
            support.as_ref().map(|(f, m)| (f, m)),
            &query_feats,
            episode_seed,
        )
    }

    /// One-shot training objective: BCE of the query logits against the
    /// ground-truth mask, using the episode's first support.
    pub fn episode_loss(&self, g: &Graph, params: &ParamSet, episode: &Episode) -> Result<Tensor> {
        let logits = self.forward_episode(
            g,
            params,
            &episode.supports[..1],
            &episode.query_image,
            episode.seed,
            false,
        )?;
        let gt = mask_tensor(&episode.query_mask)?;
        bce_loss(g, &logits, &gt)
    }

    /// Parameter handles grouped by subsystem, for gradient-flow checks and
    /// diagnostics.
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let mut groups = vec![
            ("encoder", self.encoder.param_ids()),
            ("projection", self.projection.param_ids()),
        ];
        if let Some(aad) = &self.aad {
            groups.push(("aad", aad.param_ids()));
        }
        groups.push(("decoder", self.decoder.param_ids()));
        groups
    }
}
