//! Command-line entry point: `gen-data`, `train`, `eval`, `ablate`,
//! `grad-check`.
//!
//! Every subcommand resolves its configuration as config-file values
//! overridden by flags, then snapshots the resolved merge next to its
//! outputs (`<out>/<subcommand>.config.json`), so any run can be
//! reproduced from the snapshot alone.
//!
//! Exit codes: 0 success, 1 contract violation or runtime failure, 2 usage
//! errors.

use crate::aad::FusionVariant;
use crate::dataset::{generate_dataset, load_manifest, DatasetIndex, GenConfig, Split};
use crate::error::{Error, Result};
use crate::evaluator::{
    run_protocol, write_report_csv, write_report_sidecar, ModelSegmenter, ProtocolConfig, Strategy,
};
use crate::gradcheck;
use crate::model::AadModel;
use crate::trainer::{
    load_model_checkpoint, save_model_checkpoint, train, write_loss_csv, RunConfig, TrainOutcome,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "aadseg",
    version,
    about = "Few-shot segmentation on a synthetic environment-robust benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    GenData(CommonArgs),
    /// Meta-train on the base classes and write a checkpoint.
    Train(CommonArgs),
    /// Evaluate a trained checkpoint on the novel classes.
    Eval(CommonArgs),
    /// Train and evaluate the ablation arms under one budget.
    Ablate(CommonArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shot count for evaluation.
    #[arg(long)]
    k: Option<usize>,
    /// K-shot inference strategy.
    #[arg(long, value_parser = Strategy::parse)]
    strategy: Option<Strategy>,
    /// Query-update rule.
    #[arg(long, value_parser = FusionVariant::parse)]
    fusion: Option<FusionVariant>,
    /// Evaluation tasks per run.
    #[arg(long)]
    tasks: Option<usize>,
    /// Evaluation runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Training episode budget.
    #[arg(long)]
    episodes: Option<usize>,
}

/// The resolved merge of config file and flags; serialized verbatim as the
/// snapshot.
#[derive(Clone, Serialize)]
struct Resolved {
    subcommand: String,
    out: PathBuf,
    k: usize,
    strategy: Strategy,
    tasks: usize,
    runs: usize,
    run: RunConfig,
}

impl Resolved {
    fn from_args(sub: &str, default_out: &str, args: &CommonArgs) -> Result<Resolved> {
        let mut run = match &args.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            run.seed = seed;
        }
        if let Some(episodes) = args.episodes {
            run.episodes_total = episodes;
        }
        if let Some(fusion) = args.fusion {
            run.fusion = fusion;
        }
        run.validate()?;
        Ok(Resolved {
            subcommand: sub.to_string(),
            out: args.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
            k: args.k.unwrap_or(1),
            strategy: args.strategy.unwrap_or(Strategy::Average),
            tasks: args.tasks.unwrap_or(1000),
            runs: args.runs.unwrap_or(2),
            run,
        })
    }

    fn snapshot(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(format!("{}.config.json", self.subcommand));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("snapshot serialization: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap routes --help/--version to stdout with code 0 and usage
            // errors to stderr with code 2
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::GradCheck(args) => cmd_grad_check(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_index(run: &RunConfig) -> Result<DatasetIndex> {
    load_manifest(&run.dataset_root).map_err(|e| match e {
        Error::Io { path, source } => Error::Io { path, source },
        other => other,
    })
}

fn cmd_gen_data(args: &CommonArgs) -> Result<i32> {
    let mut resolved = Resolved::from_args("gen-data", "data", args)?;
    // the dataset lands in --out; keep the config pointing at it
    if args.out.is_none() {
        resolved.out = resolved.run.dataset_root.clone();
    }
    resolved.run.dataset_root = resolved.out.clone();
    resolved.snapshot()?;
    let gen = GenConfig { image_size: resolved.run.image_size, ..GenConfig::default() };
    let index = generate_dataset(&resolved.out, &gen, resolved.run.seed)?;
    let count = |cs: &[crate::dataset::ClassEntry]| -> (usize, usize) {
        cs.iter().fold((0, 0), |(s, q), c| (s + c.supports.len(), q + c.queries.len()))
    };
    let (ts, tq) = count(&index.train);
    let (ns, nq) = count(&index.test);
    println!(
        "generated {} train classes ({ts} supports, {tq} queries) and {} test classes ({ns} supports, {nq} queries) under {}",
        index.train.len(),
        index.test.len(),
        resolved.out.display()
    );
    Ok(0)
}

fn checkpoint_path(resolved: &Resolved) -> PathBuf {
    resolved
        .run
        .checkpoint_path
        .clone()
        .unwrap_or_else(|| resolved.out.join("checkpoint.ckpt"))
}

fn cmd_train(args: &CommonArgs) -> Result<i32> {
    let mut resolved = Resolved::from_args("train", "runs/train", args)?;
    let ckpt = checkpoint_path(&resolved);
    resolved.run.checkpoint_path = Some(ckpt.clone());
    resolved.snapshot()?;
    let index = load_index(&resolved.run)?;
    let outcome = train(&resolved.run, &index)?;
    write_loss_csv(&resolved.out.join("loss.csv"), &outcome.loss_log)?;
    save_model_checkpoint(&ckpt, &outcome.model, Some(&outcome.optimizer), outcome.episodes)?;
    let first: f64 = outcome.loss_log.iter().take(50).map(|r| r.loss).sum::<f64>()
        / outcome.loss_log.len().min(50) as f64;
    let last_n = outcome.loss_log.len().min(50);
    let last: f64 =
        outcome.loss_log.iter().rev().take(50).map(|r| r.loss).sum::<f64>() / last_n as f64;
    println!(
        "trained {} episodes; mean loss first 50: {first:.4}, last 50: {last:.4}; checkpoint at {}",
        outcome.episodes,
        ckpt.display()
    );
    for v in &outcome.validation {
        println!("validation @ episode {}: mIoU {:.4}", v.episode, v.miou);
    }
    Ok(0)
}

fn cmd_eval(args: &CommonArgs) -> Result<i32> {
    let mut resolved = Resolved::from_args("eval", "runs/eval", args)?;
    let ckpt = checkpoint_path(&resolved);
    if !ckpt.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {}; set checkpoint_path in the config or --out to a train directory",
            ckpt.display()
        )));
    }
    resolved.run.checkpoint_path = Some(ckpt.clone());
    resolved.snapshot()?;
    let index = load_index(&resolved.run)?;
    let (model, _, _) = load_model_checkpoint(&ckpt, &resolved.run)?;
    let report = evaluate_model(&model, &index, &resolved)?;
    write_report_csv(&resolved.out.join("metrics.csv"), &report)?;
    write_report_sidecar(&resolved.out.join("metrics.json"), &report)?;
    println!(
        "mIoU {:.4} over {} runs x {} tasks (K={}, strategy={}), {} segmentation forwards, {:.1}s",
        report.miou,
        report.runs,
        report.tasks_per_run,
        report.k,
        report.strategy.name(),
        report.seg_forwards,
        report.wall_secs
    );
    Ok(0)
}

fn evaluate_model(
    model: &AadModel,
    index: &DatasetIndex,
    resolved: &Resolved,
) -> Result<crate::evaluator::MetricsReport> {
    let seg = ModelSegmenter { model, strategy: resolved.strategy };
    run_protocol(
        &seg,
        index,
        Split::Test,
        &ProtocolConfig {
            k: resolved.k,
            strategy: resolved.strategy,
            tasks: resolved.tasks,
            runs: resolved.runs,
            base_seed: resolved.run.seed,
            task_mean: false,
        },
    )
}

fn cmd_ablate(args: &CommonArgs) -> Result<i32> {
    let resolved = Resolved::from_args("ablate", "runs/ablate", args)?;
    resolved.snapshot()?;
    let index = load_index(&resolved.run)?;

    let variant = match resolved.run.fusion {
        FusionVariant::Aad => FusionVariant::MaskAdd,
        other => other,
    };
    let arms: Vec<(&str, bool, bool, FusionVariant)> = vec![
        ("baseline", false, false, FusionVariant::Aad),
        ("cl", true, false, FusionVariant::Aad),
        ("aad", true, true, FusionVariant::Aad),
        (variant.name(), true, true, variant),
    ];

    let mut csv = String::from("arm,k,miou\n");
    for (name, cl, aad, fusion) in arms {
        let arm_dir = resolved.out.join(name);
        std::fs::create_dir_all(&arm_dir).map_err(|e| Error::io(&arm_dir, e))?;
        let run = RunConfig {
            enable_cl: cl,
            enable_aad: aad,
            fusion,
            ..resolved.run.clone()
        };
        let outcome: TrainOutcome = train(&run, &index)?;
        write_loss_csv(&arm_dir.join("loss.csv"), &outcome.loss_log)?;
        save_model_checkpoint(
            &arm_dir.join("checkpoint.ckpt"),
            &outcome.model,
            Some(&outcome.optimizer),
            outcome.episodes,
        )?;
        let report = evaluate_model(&outcome.model, &index, &resolved)?;
        write_report_csv(&arm_dir.join("metrics.csv"), &report)?;
        write_report_sidecar(&arm_dir.join("metrics.json"), &report)?;
        println!("arm {name}: mIoU {:.4} at K={}", report.miou, resolved.k);
        csv.push_str(&format!("{name},{},{}\n", resolved.k, report.miou));
    }
    let path = resolved.out.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("ablation table at {}", path.display());
    Ok(0)
}

fn cmd_grad_check(args: &CommonArgs) -> Result<i32> {
    let resolved = Resolved::from_args("grad-check", "runs/grad-check", args)?;
    resolved.snapshot()?;
    let results = gradcheck::full_suite(resolved.run.seed)?;
    let mut all_green = true;
    for r in &results {
        println!(
            "{:<24} max_rel_err {:.3e}  [{}]",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        all_green &= r.passed();
    }
    if all_green {
        println!("all gradients verified below {:.0e}", gradcheck::FD_TOLERANCE);
        Ok(0)
    } else {
        eprintln!("gradient verification failed");
        Ok(1)
    }
}

/// Write `path` only if the parent exists; tiny helper shared by tests.
pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_exit_with_usage_error() {
        assert_eq!(run(["aadseg", "train", "--bogus"]), 2);
        assert_eq!(run(["aadseg", "no-such-command"]), 2);
        assert_eq!(run(["aadseg"]), 2);
    }

    #[test]
    fn help_is_exit_zero() {
        assert_eq!(run(["aadseg", "--help"]), 0);
    }

    #[test]
    fn missing_checkpoint_is_a_contract_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("eval");
        let code = run([
            "aadseg".to_string(),
            "eval".to_string(),
            "--out".to_string(),
            out.display().to_string(),
        ]);
        assert_eq!(code, 1);
    }
}
