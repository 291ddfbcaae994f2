//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_config, Ablation, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_suite, DEFAULT_TOLERANCE};
use crate::io::{emit_metrics, load_checkpoint, save_checkpoint, write_json, write_matrix_csv, RunManifest};
use crate::lab::{batch_size_sweep, sweep_eval_tasks, sweep_world, theorem1_experiment};
use crate::meta::{meta_evaluate, meta_train_with, Evaluation, MetricsRow};
use crate::models::ModelBundle;
use crate::rng;
use crate::tasks::{sample_sinusoid_task, ConfoundedSource, SinusoidSource, Task, TaskKind, TaskSource};

#[derive(Debug, Parser)]
#[command(name = "metacrl", version, about = "Meta-learning causal representation learner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub ablate: Option<AblateArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Plain,
    Causal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblateArg {
    None,
    Xi,
    Fgr,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train, evaluate, and write metrics and a checkpoint.
    Train,
    /// Evaluate a checkpoint on fresh tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Least-squares weights in the two-task setting.
    Theorem1,
    /// Train at batch sizes B and 2B across seeds and modes.
    SweepBatch,
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        nets: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Write |ΞᵀΞ| of a causal checkpoint as CSV.
    ExportGram {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Theorem1 => "theorem1",
            Command::SweepBatch => "sweep-batch",
            Command::Gradcheck { .. } => "gradcheck",
            Command::ExportGram { .. } => "export-gram",
        }
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(common: &Common, command: &Command) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None if matches!(command, Command::SweepBatch) => ExperimentConfig::classification_defaults(),
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.mode = match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Causal => Mode::Causal,
        };
    }
    if let Some(a) = common.ablate {
        cfg.ablate = match a {
            AblateArg::None => Ablation::None,
            AblateArg::Xi => Ablation::Xi,
            AblateArg::Fgr => Ablation::Fgr,
            AblateArg::Both => Ablation::Both,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training source and evaluation tasks for a config. Classification uses
/// the seed's factor world with confounded training pairs and held-out
/// evaluation tasks.
pub fn source_and_eval_tasks(cfg: &ExperimentConfig) -> Result<(Box<dyn TaskSource>, Vec<Task>)> {
    match cfg.task_kind {
        TaskKind::Regression => {
            let mut g = rng::stream(cfg.seed, rng::STREAM_EVAL);
            let tasks = (0..cfg.eval_tasks)
                .map(|_| sample_sinusoid_task(&cfg.sinusoid, &mut g))
                .collect::<Result<Vec<_>>>()?;
            Ok((Box::new(SinusoidSource { spec: cfg.sinusoid.clone() }), tasks))
        }
        TaskKind::Classification => {
            let world = sweep_world(cfg, cfg.seed)?;
            let (_, held_out) = sweep_eval_tasks(&world, cfg.eval_tasks, cfg.seed)?;
            if held_out.is_empty() {
                return Err(Error::Config("world.heldout_tasks: evaluation needs held-out tasks".into()));
            }
            let source = ConfoundedSource {
                world,
                agreement: cfg.world.agreement,
            };
            Ok((Box::new(source), held_out))
        }
    }
}

fn eval_row(iteration: usize, ev: &Evaluation) -> MetricsRow {
    MetricsRow {
        iteration,
        split: "eval".into(),
        pred_loss: ev.loss.mean,
        score: ev.score.mean,
        dm_xi: 0.0,
        dm_fgr: 0.0,
        seconds: 0.0,
    }
}

fn out_file(dir: &Path, manifest: &mut RunManifest, name: &str) -> PathBuf {
    manifest.outputs.push(name.into());
    dir.join(name)
}

fn ensure_not_input(path: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    if let Some(c) = canon(path) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&c)) {
            return Err(Error::Invalid(format!("refusing to overwrite input file {}", path.display())));
        }
    }
    Ok(())
}

/// Runs one subcommand; returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let dir = &cli.common.out;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = RunManifest::new(cli.command.name(), &cfg);
    let mut inputs: Vec<&Path> = cli.common.config.iter().map(PathBuf::as_path).collect();
    let mut code = 0;
    match &cli.command {
        Command::Train => {
            let (mut source, eval_tasks) = source_and_eval_tasks(&cfg)?;
            let mut rows = Vec::with_capacity(cfg.iterations + 1);
            let bundle = meta_train_with(&cfg, source.as_mut(), |r| rows.push(r.clone()))?;
            let ev = meta_evaluate(&bundle, &eval_tasks, &cfg)?;
            rows.push(eval_row(cfg.iterations, &ev));
            emit_metrics(&rows, &out_file(dir, &mut manifest, "metrics.csv"))?;
            save_checkpoint(&bundle, &cfg, &out_file(dir, &mut manifest, "checkpoint.bin"))?;
            write_json(&ev, &out_file(dir, &mut manifest, "eval.json"))?;
            println!(
                "train: {} iterations, eval score {:.6} ± {:.6}",
                cfg.iterations, ev.score.mean, ev.score.half_width
            );
        }
        Command::Eval { checkpoint } => {
            inputs.push(checkpoint);
            let (ck, _) = load_checkpoint(checkpoint, cli.common.config.as_ref().map(|_| &cfg))?;
            let mut run_cfg = ck.config.clone();
            if let Some(s) = cli.common.seed {
                run_cfg.seed = s;
            }
            if cli.common.config.is_some() {
                run_cfg.eval_tasks = cfg.eval_tasks;
            }
            let (_, eval_tasks) = source_and_eval_tasks(&run_cfg)?;
            let ev = meta_evaluate(&ck.bundle, &eval_tasks, &run_cfg)?;
            let metrics = out_file(dir, &mut manifest, "metrics.csv");
            ensure_not_input(&metrics, &inputs)?;
            emit_metrics(&[eval_row(0, &ev)], &metrics)?;
            write_json(&ev, &out_file(dir, &mut manifest, "eval.json"))?;
            println!("eval: score {:.6} ± {:.6}", ev.score.mean, ev.score.half_width);
        }
        Command::Theorem1 => {
            let reports = theorem1_experiment(&cfg.theorem1, cfg.seed)?;
            write_json(&reports, &out_file(dir, &mut manifest, "theorem1.json"))?;
            for r in &reports {
                let n = r.n.map_or("population".to_string(), |n| n.to_string());
                println!("theorem1: q={} n={} non-causal norm {:.6e}", r.q, n, r.noncausal_norm);
            }
        }
        Command::SweepBatch => {
            let report = batch_size_sweep(&cfg)?;
            write_json(&report, &out_file(dir, &mut manifest, "sweep.json"))?;
            for a in &report.aggregates {
                println!(
                    "sweep: {:?} B={} held-in {:.4} held-out {:.4}",
                    a.mode, a.batch_size, a.held_in.mean, a.held_out.mean
                );
            }
        }
        Command::Gradcheck { nets, tolerance } => {
            let report = gradcheck_suite(*nets, cfg.seed, *tolerance)?;
            write_json(&report, &out_file(dir, &mut manifest, "gradcheck.json"))?;
            for c in report.cases.iter().filter(|c| !c.passed) {
                eprintln!("gradcheck: net {} {} path relative error {:.3e}", c.net, c.path, c.max_rel_error);
            }
            println!("gradcheck: {}/{} passed", report.passed, report.total);
            if !report.all_passed() {
                code = 1;
            }
        }
        Command::ExportGram { checkpoint } => {
            inputs.push(checkpoint);
            let (ck, _) = load_checkpoint(checkpoint, None)?;
            let xi = ck
                .bundle
                .xi
                .as_ref()
                .ok_or_else(|| Error::Invalid("export-gram needs a causal-mode checkpoint".into()))?;
            let path = out_file(dir, &mut manifest, "gram.csv");
            ensure_not_input(&path, &inputs)?;
            write_matrix_csv(&xi.gram_abs()?, &path)?;
            println!("export-gram: {}x{} matrix", xi.n_k(), xi.n_k());
        }
    }
    manifest.finish(dir)?;
    Ok(code)
}

/// Bundle trained from scratch under a config; convenience for scripts
/// and tests.
pub fn train_bundle(cfg: &ExperimentConfig) -> Result<(ModelBundle, Vec<MetricsRow>)> {
    let (mut source, _) = source_and_eval_tasks(cfg)?;
    let mut rows = Vec::new();
    let bundle = meta_train_with(cfg, source.as_mut(), |r| rows.push(r.clone()))?;
    Ok((bundle, rows))
}
