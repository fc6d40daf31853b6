//! Episodic meta-training on the base classes.
//!
//! Every optimizer step accumulates gradients from a batch of 1-shot
//! episodes (loss averaged over the batch), then applies one AdamW update.
//! The reference path is single-threaded and fully deterministic under the
//! run seed: the loss log reproduces bytewise.

use crate::aad::FusionVariant;
use crate::dataset::{sample_episode, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::evaluator::{run_protocol, ModelSegmenter, ProtocolConfig, Strategy};
use crate::model::{AadModel, ModelConfig};
use crate::tensor::{
    read_checkpoint, write_checkpoint, AdamW, AdamWConfig, CheckpointEntry, Graph,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Flat run configuration; this is the JSON config-file schema, and
/// command-line flags override individual fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub image_size: usize,
    pub in_channels: usize,
    /// Common query width l.
    pub query_width: usize,
    /// Number of learnable class queries N.
    pub n_queries: usize,
    pub fusion: FusionVariant,
    pub enable_cl: bool,
    pub enable_aad: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub episodes_total: usize,
    /// Episodes per optimizer step.
    pub batch_episodes: usize,
    /// Validation cadence in episodes; 0 disables validation.
    pub val_interval: usize,
    pub val_tasks: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub stem_channels: [usize; 2],
    pub scale_channels: [usize; 3],
    /// Dirac carry mixed into the encoder conv init.
    pub carry: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 1,
            dataset_root: PathBuf::from("data"),
            image_size: 64,
            in_channels: model.in_channels,
            query_width: model.query_width,
            n_queries: model.n_queries,
            fusion: model.fusion,
            enable_cl: model.enable_cl,
            enable_aad: model.enable_aad,
            lr: 1e-4,
            weight_decay: 0.05,
            episodes_total: 2000,
            // one episode per step: at lr 1e-4 the 2000-episode budget needs
            // every optimizer step it can get (batching to 8 leaves only 250
            // steps, which stalls in the all-background regime)
            batch_episodes: 1,
            val_interval: 0,
            val_tasks: 40,
            checkpoint_path: None,
            stem_channels: model.stem_channels,
            scale_channels: model.scale_channels,
            carry: model.carry,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels,
            query_width: self.query_width,
            n_queries: self.n_queries,
            enable_cl: self.enable_cl,
            enable_aad: self.enable_aad,
            fusion: self.fusion,
            stem_channels: self.stem_channels,
            scale_channels: self.scale_channels,
            carry: self.carry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return Err(Error::Config("image_size must be a positive multiple of 32".into()));
        }
        if self.episodes_total == 0 || self.batch_episodes == 0 {
            return Err(Error::Config("episode budget and batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub episode: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ValidationPoint {
    pub episode: u64,
    pub miou: f64,
}

pub struct TrainOutcome {
    pub model: AadModel,
    pub optimizer: AdamW,
    pub episodes: u64,
    pub loss_log: Vec<LossRow>,
    pub validation: Vec<ValidationPoint>,
}

/// Run the episodic training loop on the train split.
pub fn train(cfg: &RunConfig, index: &DatasetIndex) -> Result<TrainOutcome> {
    cfg.validate()?;
    if index.train.is_empty() {
        return Err(Error::Contract("train split is empty".into()));
    }
    let mut model = AadModel::init(cfg.model_config(), cfg.seed)?;
    let mut optimizer = AdamW::new(&model.params, cfg.optimizer_config());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut loss_log = Vec::with_capacity(cfg.episodes_total);
    let mut validation = Vec::new();
    let mut episode_no: u64 = 0;

    while (episode_no as usize) < cfg.episodes_total {
        let batch = cfg.batch_episodes.min(cfg.episodes_total - episode_no as usize);
        model.params.clear_grads();
        for _ in 0..batch {
            let episode = sample_episode(index, Split::Train, 1, &mut rng)?;
            let g = Graph::new();
            let loss = model.episode_loss(&g, &model.params, &episode)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at episode {} (class {})",
                    episode_no + 1,
                    episode.class
                )));
            }
            let scaled = g.scale(&loss, 1.0 / batch as f64)?;
            g.backward(&scaled, &mut model.params)?;
            episode_no += 1;
            loss_log.push(LossRow { episode: episode_no, loss: value, lr: cfg.lr });
        }
        optimizer.step(&mut model.params)?;

        if cfg.val_interval > 0 && (episode_no as usize) % cfg.val_interval == 0 {
            let seg = ModelSegmenter { model: &model, strategy: Strategy::Average };
            let report = run_protocol(
                &seg,
                index,
                Split::Test,
                &ProtocolConfig {
                    k: 1,
                    tasks: cfg.val_tasks,
                    runs: 1,
                    base_seed: cfg.seed.wrapping_add(episode_no),
                    ..ProtocolConfig::default()
                },
            )?;
            validation.push(ValidationPoint { episode: episode_no, miou: report.miou });
        }
    }
    model.params.clear_grads();
    Ok(TrainOutcome { model, optimizer, episodes: episode_no, loss_log, validation })
}

/// Loss-log CSV: header `episode,loss,lr`, one row per training episode.
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("episode,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.episode, r.loss, r.lr));
    }
    out
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    std::fs::write(path, loss_csv(rows)).map_err(|e| Error::io(path, e))
}

// ── checkpointing ──────────────────────────────────────────────────────

fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn join_u64(parts: &[f64]) -> u64 {
    ((parts[0] as u64) << 32) | (parts[1] as u64)
}

/// Serialize parameters, optimizer state, the episode counter and the
/// architecture fingerprint into the flat checkpoint container.
pub fn save_model_checkpoint(
    path: &Path,
    model: &AadModel,
    optimizer: Option<&AdamW>,
    episode: u64,
) -> Result<()> {
    let mut entries = Vec::new();
    for id in model.params.ids() {
        entries.push(CheckpointEntry::new(
            format!("param/{}", model.params.name(id)),
            model.params.shape(id).to_vec(),
            model.params.value(id).to_vec(),
        ));
    }
    if let Some(opt) = optimizer {
        entries.push(CheckpointEntry::new("opt/t", vec![1], vec![opt.step_count() as f64]));
        entries.push(CheckpointEntry::new(
            "opt/hyper",
            vec![5],
            vec![opt.cfg.lr, opt.cfg.weight_decay, opt.cfg.beta1, opt.cfg.beta2, opt.cfg.eps],
        ));
        let (m, v) = opt.moments();
        for (i, id) in model.params.ids().enumerate() {
            let name = model.params.name(id);
            entries.push(CheckpointEntry::new(format!("opt/m/{name}"), vec![m[i].len()], m[i].clone()));
            entries.push(CheckpointEntry::new(format!("opt/v/{name}"), vec![v[i].len()], v[i].clone()));
        }
    }
    entries.push(CheckpointEntry::new("meta/episode", vec![2], split_u64(episode).to_vec()));
    entries.push(CheckpointEntry::new(
        "meta/fingerprint",
        vec![2],
        split_u64(model.cfg.fingerprint()).to_vec(),
    ));
    write_checkpoint(path, &entries)
}

/// Rebuild a model from a checkpoint. The architecture is reconstructed
/// from the run config and must match the stored fingerprint; every stored
/// parameter must map onto a parameter of the same name and shape.
pub fn load_model_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(AadModel, Option<AdamW>, u64)> {
    let entries = read_checkpoint(path)?;
    let find = |name: &str| entries.iter().find(|e| e.name == name);

    let fingerprint = find("meta/fingerprint")
        .ok_or_else(|| Error::format(path, "missing meta/fingerprint"))?;
    let mut model = AadModel::init(cfg.model_config(), cfg.seed)?;
    if join_u64(&fingerprint.data) != model.cfg.fingerprint() {
        return Err(Error::Config(
            "checkpoint was written by a different architecture (fingerprint mismatch)".into(),
        ));
    }
    let episode = find("meta/episode")
        .map(|e| join_u64(&e.data))
        .ok_or_else(|| Error::format(path, "missing meta/episode"))?;

    let mut loaded = 0usize;
    for e in &entries {
        if let Some(name) = e.name.strip_prefix("param/") {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {name} not in model")))?;
            if model.params.shape(id) != e.shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    e.shape,
                    model.params.shape(id)
                )));
            }
            model.params.set_value(id, e.data.clone())?;
            loaded += 1;
        }
    }
    if loaded != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint provides {loaded} parameters, model has {}",
            model.params.len()
        )));
    }

    let optimizer = match find("opt/t") {
        None => None,
        Some(t) => {
            let hyper = find("opt/hyper").ok_or_else(|| Error::format(path, "missing opt/hyper"))?;
            let opt_cfg = AdamWConfig {
                lr: hyper.data[0],
                weight_decay: hyper.data[1],
                beta1: hyper.data[2],
                beta2: hyper.data[3],
                eps: hyper.data[4],
            };
            let mut opt = AdamW::new(&model.params, opt_cfg);
            let mut m = Vec::new();
            let mut v = Vec::new();
            for id in model.params.ids() {
                let name = model.params.name(id).to_string();
                let me = find(&format!("opt/m/{name}"))
                    .ok_or_else(|| Error::format(path, format!("missing opt/m/{name}")))?;
                let ve = find(&format!("opt/v/{name}"))
                    .ok_or_else(|| Error::format(path, format!("missing opt/v/{name}")))?;
                m.push(me.data.clone());
                v.push(ve.data.clone());
            }
            opt.restore(t.data[0] as u64, m, v)?;
            Some(opt)
        }
    };
    Ok((model, optimizer, episode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GenConfig};

    fn tiny_dataset(dir: &Path) -> DatasetIndex {
        let cfg = GenConfig {
            base_classes: vec!["disk".into(), "square".into()],
            novel_classes: vec!["diamond".into()],
            train_supports: 6,
            train_queries: 5,
            test_supports: 20,
            test_queries: 10,
            ..GenConfig::default()
        };
        generate_dataset(dir, &cfg, 77).unwrap()
    }

    fn small_run_config() -> RunConfig {
        RunConfig {
            episodes_total: 8,
            batch_episodes: 4,
            query_width: 16,
            n_queries: 4,
            stem_channels: [6, 8],
            scale_channels: [8, 12, 16],
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad = RunConfig { enable_cl: false, enable_aad: true, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { n_queries: 0, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { episodes_total: 0, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_round_trips_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, "{\"seed\": 7, \"n_queries\": 5}").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n_queries, 5);
        assert_eq!(cfg.query_width, 64, "unset fields take defaults");
        cfg.save(&dir.path().join("resolved.json")).unwrap();
        let back = RunConfig::load(&dir.path().join("resolved.json")).unwrap();
        assert_eq!(back.seed, 7);
    }

    #[test]
    fn identical_seeds_give_bytewise_identical_loss_logs() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(dir.path());
        let cfg = small_run_config();
        let a = train(&cfg, &index).unwrap();
        let b = train(&cfg, &index).unwrap();
        assert_eq!(loss_csv(&a.loss_log), loss_csv(&b.loss_log));
        assert_eq!(a.episodes, 8);
    }

    #[test]
    fn zero_lr_and_zero_decay_leave_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(dir.path());
        let cfg = RunConfig { lr: 0.0, weight_decay: 0.0, ..small_run_config() };
        let fresh = AadModel::init(cfg.model_config(), cfg.seed).unwrap();
        let outcome = train(&cfg, &index).unwrap();
        for id in fresh.params.ids() {
            assert_eq!(
                fresh.params.value(id),
                outcome.model.params.value(id),
                "parameter {} drifted",
                fresh.params.name(id)
            );
        }
    }

    #[test]
    fn every_group_receives_gradient_signal_after_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(dir.path());
        let cfg = RunConfig { episodes_total: 1, batch_episodes: 1, ..small_run_config() };
        let model = AadModel::init(cfg.model_config(), cfg.seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let episode = sample_episode(&index, Split::Train, 1, &mut rng).unwrap();
        let g = Graph::new();
        let mut params = model.params.clone();
        let loss = model.episode_loss(&g, &params, &episode).unwrap();
        g.backward(&loss, &mut params).unwrap();
        for (name, ids) in model.param_groups() {
            let norm: f64 = ids.iter().map(|&id| params.grad_sq_norm(id)).sum();
            assert!(norm > 1e-12, "group {name} has zero gradient");
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_parameters_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_dataset(dir.path());
        let cfg = small_run_config();
        let outcome = train(&cfg, &index).unwrap();
        let path = dir.path().join("model.ckpt");
        save_model_checkpoint(&path, &outcome.model, Some(&outcome.optimizer), outcome.episodes)
            .unwrap();
        let (loaded, opt, episodes) = load_model_checkpoint(&path, &cfg).unwrap();
        assert_eq!(episodes, outcome.episodes);
        assert_eq!(opt.as_ref().map(|o| o.step_count()), Some(outcome.optimizer.step_count()));
        for id in outcome.model.params.ids() {
            let a: Vec<u64> = outcome.model.params.value(id).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = loaded.params.value(id).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "parameter {} not bit-exact", outcome.model.params.name(id));
        }
        // save → load → save is byte-identical
        let path2 = dir.path().join("model2.ckpt");
        save_model_checkpoint(&path2, &loaded, opt.as_ref(), episodes).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config();
        let model = AadModel::init(cfg.model_config(), cfg.seed).unwrap();
        let path = dir.path().join("model.ckpt");
        save_model_checkpoint(&path, &model, None, 0).unwrap();
        let other = RunConfig { n_queries: 7, ..cfg };
        assert!(matches!(load_model_checkpoint(&path, &other), Err(Error::Config(_))));
    }
}
