//! Evaluation harness: IoU/mIoU, the two K-shot inference strategies, and
//! the seeded multi-run task protocol.
//!
//! Per-class counts accumulate as exact integers and divide once at the
//! end, so reports are order-independent and bytewise reproducible for a
//! fixed base seed.

use crate::dataset::{sample_episode, DatasetIndex, Episode, Mask, Split};
use crate::decoder::{foreground_prob, predict};
use crate::error::{Error, Result};
use crate::model::AadModel;
use crate::tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vote,
    Average,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Vote => "vote",
            Strategy::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vote" => Ok(Strategy::Vote),
            "average" => Ok(Strategy::Average),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Inference cost counters.
#[derive(Clone, Copy, Debug, Default)]
pub struct Counters {
    /// Full segmentation forwards (one complete pipeline pass each).
    pub seg_forwards: u64,
}

/// Anything that can answer an episode with a segmentation mask.
pub trait Segmenter {
    fn segment(&self, episode: &Episode, counters: &mut Counters) -> Result<Mask>;
}

/// A trained model bound to one K-shot inference strategy.
pub struct ModelSegmenter<'a> {
    pub model: &'a AadModel,
    pub strategy: Strategy,
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, episode: &Episode, counters: &mut Counters) -> Result<Mask> {
        match self.strategy {
            Strategy::Vote => infer_vote(self.model, episode, counters),
            Strategy::Average => infer_average(self.model, episode, counters),
        }
    }
}

/// K independent single-support forwards; per-pixel foreground
/// probabilities are averaged and thresholded at 0.5 (exact ties are
/// background). Costs K segmentation forwards.
pub fn infer_vote(model: &AadModel, episode: &Episode, counters: &mut Counters) -> Result<Mask> {
    if episode.supports.is_empty() {
        return Err(Error::Contract("vote inference needs at least one support".into()));
    }
    let mut prob_sets = Vec::with_capacity(episode.supports.len());
    for support in &episode.supports {
        let g = Graph::new();
        let logits = model.forward_episode(
            &g,
            &model.params,
            std::slice::from_ref(support),
            &episode.query_image,
            episode.seed,
            false,
        )?;
        counters.seg_forwards += 1;
        prob_sets.push(foreground_prob(&logits)?);
    }
    let (h, w) = (episode.query_image.height, episode.query_image.width);
    Ok(threshold_mean_probs(&prob_sets, w, h))
}

/// Average the K supports at the feature/mask level and run a single
/// forward. Costs exactly one segmentation forward.
pub fn infer_average(model: &AadModel, episode: &Episode, counters: &mut Counters) -> Result<Mask> {
    if episode.supports.is_empty() {
        return Err(Error::Contract("average inference needs at least one support".into()));
    }
    let g = Graph::new();
    let logits = model.forward_episode(
        &g,
        &model.params,
        &episode.supports,
        &episode.query_image,
        episode.seed,
        true,
    )?;
    counters.seg_forwards += 1;
    predict(&logits)
}

/// Mean of per-pass foreground probabilities, thresholded at strictly
/// above 0.5.
pub fn threshold_mean_probs(prob_sets: &[Vec<f64>], width: usize, height: usize) -> Mask {
    let n = prob_sets.len() as f64;
    let mut data = vec![0u8; width * height];
    for (i, slot) in data.iter_mut().enumerate() {
        let mean: f64 = prob_sets.iter().map(|p| p[i]).sum::<f64>() / n;
        *slot = (mean > 0.5) as u8;
    }
    Mask { width, height, data }
}

/// Ideal and degenerate reference segmenters for harness sanity checks.
pub struct PerfectOracle;

impl Segmenter for PerfectOracle {
    fn segment(&self, episode: &Episode, counters: &mut Counters) -> Result<Mask> {
        counters.seg_forwards += 1;
        Ok(episode.query_mask.clone())
    }
}

pub struct AllBackground;

impl Segmenter for AllBackground {
    fn segment(&self, episode: &Episode, counters: &mut Counters) -> Result<Mask> {
        counters.seg_forwards += 1;
        Ok(Mask::empty(episode.query_mask.width, episode.query_mask.height))
    }
}

/// Exact pixel counts (true positive, false positive, false negative).
pub fn iou_counts(pred: &Mask, gt: &Mask) -> Result<(u64, u64, u64)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fneg))
}

/// IoU = TP/(TP+FP+FN) as an exact integer-count ratio; 1.0 when the union
/// is empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (tp, fp, fneg) = iou_counts(pred, gt)?;
    Ok(iou_from_counts(tp, fp, fneg))
}

fn iou_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    let union = tp + fp + fneg;
    if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProtocolConfig {
    pub k: usize,
    pub strategy: Strategy,
    pub tasks: usize,
    pub runs: usize,
    pub base_seed: u64,
    /// When set, mIoU averages per-task IoUs instead of per-class count
    /// ratios.
    pub task_mean: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            k: 1,
            strategy: Strategy::Average,
            tasks: 1000,
            runs: 2,
            base_seed: 1,
            task_mean: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassIou {
    pub class: String,
    pub run: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub k: usize,
    pub strategy: Strategy,
    pub tasks_per_run: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub run_seeds: Vec<u64>,
    pub task_mean: bool,
    pub per_class: Vec<ClassIou>,
    pub run_miou: Vec<f64>,
    /// Mean of the per-run mIoUs — the headline number.
    pub miou: f64,
    /// Per-run means of per-task IoUs (the alternative aggregation).
    pub run_task_mean: Vec<f64>,
    pub seg_forwards: u64,
    pub wall_secs: f64,
}

/// Seeded multi-run evaluation: for run r, tasks are sampled with seed
/// `base_seed + r`; per-class pixel counts accumulate across the run and
/// divide once at the end.
pub fn run_protocol(
    segmenter: &dyn Segmenter,
    index: &DatasetIndex,
    split: Split,
    cfg: &ProtocolConfig,
) -> Result<MetricsReport> {
    if cfg.tasks == 0 || cfg.runs == 0 {
        return Err(Error::Config("protocol needs at least one task and one run".into()));
    }
    let started = Instant::now();
    let mut counters = Counters::default();
    let mut per_class = Vec::new();
    let mut run_miou = Vec::with_capacity(cfg.runs);
    let mut run_task_mean = Vec::with_capacity(cfg.runs);
    let mut run_seeds = Vec::with_capacity(cfg.runs);

    for run in 0..cfg.runs {
        let seed = cfg.base_seed + run as u64;
        run_seeds.push(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
        let mut task_iou_sum = 0.0;
        for _ in 0..cfg.tasks {
            let episode = sample_episode(index, split, cfg.k, &mut rng)?;
            let pred = segmenter.segment(&episode, &mut counters)?;
            let (tp, fp, fneg) = iou_counts(&pred, &episode.query_mask)?;
            let slot = counts.entry(episode.class.clone()).or_insert((0, 0, 0));
            slot.0 += tp;
            slot.1 += fp;
            slot.2 += fneg;
            task_iou_sum += iou_from_counts(tp, fp, fneg);
        }
        let mut class_sum = 0.0;
        for (class, (tp, fp, fneg)) in &counts {
            let v = iou_from_counts(*tp, *fp, *fneg);
            class_sum += v;
            per_class.push(ClassIou { class: class.clone(), run, iou: v });
        }
        run_miou.push(class_sum / counts.len() as f64);
        run_task_mean.push(task_iou_sum / cfg.tasks as f64);
    }

    let headline = if cfg.task_mean { &run_task_mean } else { &run_miou };
    let miou = headline.iter().sum::<f64>() / cfg.runs as f64;
    Ok(MetricsReport {
        k: cfg.k,
        strategy: cfg.strategy,
        tasks_per_run: cfg.tasks,
        runs: cfg.runs,
        base_seed: cfg.base_seed,
        run_seeds,
        task_mean: cfg.task_mean,
        per_class,
        run_miou,
        miou,
        run_task_mean,
        seg_forwards: counters.seg_forwards,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Deterministic CSV body: one row per class and run, per-run summary
/// rows, then the overall summary row.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class,run,K,strategy,iou\n");
    for row in &report.per_class {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.class,
            row.run,
            report.k,
            report.strategy.name(),
            row.iou
        ));
    }
    for (run, miou) in report.run_miou.iter().enumerate() {
        out.push_str(&format!("ALL,{run},{},{},{miou}\n", report.k, report.strategy.name()));
    }
    out.push_str(&format!("ALL,mean,{},{},{}\n", report.k, report.strategy.name(), report.miou));
    out
}

pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

/// Timing and cost sidecar (not part of the determinism contract).
pub fn write_report_sidecar(path: &Path, report: &MetricsReport) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        k: usize,
        strategy: &'a str,
        tasks_per_run: usize,
        runs: usize,
        base_seed: u64,
        run_seeds: &'a [u64],
        task_mean: bool,
        miou: f64,
        run_miou: &'a [f64],
        run_task_mean: &'a [f64],
        seg_forwards: u64,
        wall_secs: f64,
    }
    let side = Sidecar {
        k: report.k,
        strategy: report.strategy.name(),
        tasks_per_run: report.tasks_per_run,
        runs: report.runs,
        base_seed: report.base_seed,
        run_seeds: &report.run_seeds,
        task_mean: report.task_mean,
        miou: report.miou,
        run_miou: &report.run_miou,
        run_task_mean: &report.run_task_mean,
        seg_forwards: report.seg_forwards,
        wall_secs: report.wall_secs,
    };
    let text = serde_json::to_string_pretty(&side)
        .map_err(|e| Error::Config(format!("sidecar serialization: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GenConfig};

    fn mask_from(bits: &[u8], w: usize, h: usize) -> Mask {
        Mask { width: w, height: h, data: bits.to_vec() }
    }

    #[test]
    fn iou_identity_disjoint_and_half() {
        let a = mask_from(&[1, 1, 0, 0], 2, 2);
        let b = mask_from(&[0, 0, 1, 1], 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);

        let gt = mask_from(&[1, 1, 1, 1, 0, 0, 0, 0, 0], 3, 3);
        let pred = mask_from(&[1, 1, 1, 1, 1, 1, 1, 1, 0], 3, 3);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn mean_probability_tie_goes_to_background() {
        let sets = vec![vec![0.6], vec![0.6], vec![0.3]];
        let m = threshold_mean_probs(&sets, 1, 1);
        assert_eq!(m.data, vec![0], "mean 0.5 is not strictly above threshold");
        let sets = vec![vec![0.6], vec![0.6], vec![0.31]];
        assert_eq!(threshold_mean_probs(&sets, 1, 1).data, vec![1]);
    }

    #[test]
    fn count_accumulation_is_order_free() {
        let tasks = [
            ("a", (3u64, 1u64, 2u64)),
            ("b", (5, 0, 0)),
            ("a", (2, 2, 2)),
            ("b", (0, 3, 1)),
        ];
        let fold = |order: &[usize]| {
            let mut m: BTreeMap<&str, (u64, u64, u64)> = BTreeMap::new();
            for &i in order {
                let (c, (tp, fp, fneg)) = tasks[i];
                let e = m.entry(c).or_insert((0, 0, 0));
                e.0 += tp;
                e.1 += fp;
                e.2 += fneg;
            }
            m.into_iter()
                .map(|(c, (tp, fp, fneg))| (c, iou_from_counts(tp, fp, fneg)))
                .collect::<Vec<_>>()
        };
        assert_eq!(fold(&[0, 1, 2, 3]), fold(&[3, 2, 1, 0]));
    }

    fn protocol_fixture() -> (tempfile::TempDir, DatasetIndex) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            base_classes: vec!["disk".into(), "square".into()],
            novel_classes: vec!["diamond".into(), "ellipse".into()],
            train_supports: 3,
            train_queries: 3,
            test_supports: 20,
            test_queries: 10,
            ..GenConfig::default()
        };
        let idx = generate_dataset(dir.path(), &cfg, 21).unwrap();
        (dir, idx)
    }

    #[test]
    fn oracle_scores_one_and_all_background_scores_zero() {
        let (_dir, idx) = protocol_fixture();
        let cfg = ProtocolConfig { tasks: 25, runs: 2, base_seed: 5, ..ProtocolConfig::default() };
        let report = run_protocol(&PerfectOracle, &idx, Split::Test, &cfg).unwrap();
        assert_eq!(report.miou, 1.0);
        for r in &report.per_class {
            assert_eq!(r.iou, 1.0);
        }
        let report = run_protocol(&AllBackground, &idx, Split::Test, &cfg).unwrap();
        assert_eq!(report.miou, 0.0);
        assert_eq!(report.seg_forwards, 50);
    }

    #[test]
    fn same_base_seed_reproduces_the_csv_bytewise() {
        let (_dir, idx) = protocol_fixture();
        let cfg = ProtocolConfig { tasks: 15, runs: 2, base_seed: 9, ..ProtocolConfig::default() };
        let a = report_csv(&run_protocol(&PerfectOracle, &idx, Split::Test, &cfg).unwrap());
        let b = report_csv(&run_protocol(&PerfectOracle, &idx, Split::Test, &cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("class,run,K,strategy,iou\n"));
        assert!(a.trim_end().ends_with(&format!("ALL,mean,1,average,{}", 1.0)));
    }

    #[test]
    fn task_mean_flag_switches_the_aggregation() {
        let (_dir, idx) = protocol_fixture();
        let base = ProtocolConfig { tasks: 10, runs: 1, base_seed: 3, ..ProtocolConfig::default() };
        let class_mean = run_protocol(&PerfectOracle, &idx, Split::Test, &base).unwrap();
        let task_mean = run_protocol(
            &PerfectOracle,
            &idx,
            Split::Test,
            &ProtocolConfig { task_mean: true, ..base },
        )
        .unwrap();
        // oracle scores 1.0 under both aggregations; the fields must agree
        assert_eq!(class_mean.miou, 1.0);
        assert_eq!(task_mean.miou, 1.0);
        assert_eq!(class_mean.run_task_mean, task_mean.run_task_mean);
    }
}
