//! Bi-level meta-optimisation of the encoder and head, and the alternating
//! two-step schedule that interleaves it with the factor-matrix updates.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, sgd_step, Gradients, ParamSet, Tensor, TensorError};
use crate::causal::{causal_second_level, DmTerms};
use crate::config::{ExperimentConfig, Mode, OuterOptimizer};
use crate::error::{Error, Result};
use crate::models::{score, target_loss, Architecture, ModelBundle};
use crate::rng;
use crate::tasks::{SplitTag, Task, TaskSource};
use crate::Graph;

/// One line of training or evaluation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub split: String,
    pub pred_loss: f64,
    /// MSE for regression, accuracy for classification.
    pub score: f64,
    pub dm_xi: f64,
    pub dm_fgr: f64,
    pub seconds: f64,
}

/// Support-set adaptation of `(g, h)`; `(Ξ, f_gr)` enter as constants.
///
/// `theta` should be recorded on a graph. With `create_graph` the result is
/// differentiable with respect to it; otherwise each step treats its
/// gradient as a constant.
pub fn inner_adapt(
    arch: &Architecture,
    theta: &ParamSet,
    xi: Option<&Tensor>,
    grouping: &ParamSet,
    task: &Task,
    cfg: &ExperimentConfig,
    create_graph: bool,
) -> Result<ParamSet> {
    if task.kind != cfg.task_kind {
        return Err(Error::Task(format!(
            "task kind {:?} does not match config {:?}",
            task.kind, cfg.task_kind
        )));
    }
    let mut current = theta.clone();
    if cfg.inner_lr == 0.0 {
        return Ok(current);
    }
    for _ in 0..cfg.inner_steps {
        let loss = arch.split_loss(&current, xi, grouping, task, SplitTag::Support)?;
        let g = grad(&loss, &current, create_graph)?;
        current = sgd_step(&current, &g, cfg.inner_lr, create_graph)?;
    }
    Ok(current)
}

/// Gradient of the mean post-adaptation query loss with respect to the
/// encoder and head, differentiated through the inner loop.
pub struct MetaGradient {
    pub grads: Gradients,
    pub loss: f64,
    pub score: f64,
}

pub fn meta_gradient(bundle: &ModelBundle, batch: &[Task], cfg: &ExperimentConfig) -> Result<MetaGradient> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty task batch".into()));
    }
    let graph = Graph::new();
    let theta = bundle.theta.track(&graph);
    let xi = bundle.xi_tensor().map(Tensor::detach);
    let grouping = bundle.grouping.detach();
    let arch = &bundle.arch;
    let mut total = Tensor::scalar(0.0);
    let mut score_sum = 0.0;
    for task in batch {
        let adapted = inner_adapt(arch, &theta, xi.as_ref(), &grouping, task, cfg, !cfg.first_order)?;
        let out = arch.split_forward(&adapted, xi.as_ref(), &grouping, task, SplitTag::Query)?;
        score_sum += score(&out, &task.query.y)?;
        total = total.add(&target_loss(&out, &task.query.y)?)?;
    }
    let n = batch.len() as f64;
    let loss = total.scale(1.0 / n)?;
    let grads = grad(&loss, &theta, false)?;
    Ok(MetaGradient {
        grads,
        loss: loss.item(),
        score: score_sum / n,
    })
}

/// `θ ← θ − β ∇θ (1/N) Σ L_query(θ_i)` with plain gradient descent.
/// `(Ξ, f_gr)` are returned untouched.
pub fn meta_outer_step(bundle: &ModelBundle, batch: &[Task], cfg: &ExperimentConfig) -> Result<ModelBundle> {
    let mg = meta_gradient(bundle, batch, cfg)?;
    let mut next = bundle.clone();
    next.theta = sgd_step(&bundle.theta, &mg.grads, cfg.outer_lr, false)?;
    Ok(next)
}

/// Adam moments for the outer update.
#[derive(Clone, Debug)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(theta: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = theta.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, theta: &ParamSet, grads: &Gradients, lr: f64) -> Result<ParamSet> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut out = ParamSet::new();
        for (k, (name, p)) in theta.iter().enumerate() {
            let g = grads.expect(name)?;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                    v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                    w - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS)
                })
                .collect();
            out.insert(name, Tensor::new(p.shape(), data)?)?;
        }
        Ok(out)
    }
}

/// Stateful driver of the two-step schedule.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub cfg: ExperimentConfig,
    adam: Option<Adam>,
    iteration: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, cfg: ExperimentConfig) -> Self {
        let adam = match cfg.outer_optimizer {
            OuterOptimizer::Sgd => None,
            OuterOptimizer::Adam => Some(Adam::new(&bundle.theta)),
        };
        Trainer {
            bundle,
            cfg,
            adam,
            iteration: 0,
            started: Instant::now(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Step 1: meta-update of `(g, h)` with `(Ξ, f_gr)` frozen.
    pub fn step_theta(&mut self, batch: &[Task]) -> Result<MetaGradient> {
        let mg = meta_gradient(&self.bundle, batch, &self.cfg)?;
        self.bundle.theta = match &mut self.adam {
            None => sgd_step(&self.bundle.theta, &mg.grads, self.cfg.outer_lr, false)?,
            Some(adam) => adam.step(&self.bundle.theta, &mg.grads, self.cfg.outer_lr)?,
        };
        Ok(mg)
    }

    /// Step 2: two-level update of `(Ξ, f_gr)` with `(g, h)` frozen. No-op
    /// in plain mode.
    pub fn step_factors(&mut self, batch: &[Task]) -> Result<DmTerms> {
        if self.bundle.arch.mode == Mode::Plain {
            return Ok(DmTerms::default());
        }
        let (next, terms) = causal_second_level(&self.bundle, batch, &self.cfg.effective_causal())?;
        self.bundle = next;
        Ok(terms)
    }

    /// Both steps on one batch (or on `factor_batch` for step 2 when given).
    pub fn train_batch(&mut self, batch: &[Task], factor_batch: Option<&[Task]>) -> Result<MetricsRow> {
        let iteration = self.iteration;
        let non_finite = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite(_)) => Error::NonFiniteLoss { iteration },
            e => e,
        };
        let mg = self.step_theta(batch).map_err(non_finite)?;
        let terms = self.step_factors(factor_batch.unwrap_or(batch)).map_err(non_finite)?;
        let row = MetricsRow {
            iteration: self.iteration,
            split: "query".into(),
            pred_loss: mg.loss,
            score: mg.score,
            dm_xi: terms.xi,
            dm_fgr: terms.fgr,
            seconds: if self.cfg.record_time {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if ![row.pred_loss, row.score, row.dm_xi, row.dm_fgr].iter().all(|v| v.is_finite())
            || !self.bundle.all_params().all_finite()
        {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        self.iteration += 1;
        Ok(row)
    }
}

/// One two-step update of a bundle on a shared batch, with plain descent
/// for the outer step.
pub fn train_batch_two_step(bundle: &ModelBundle, batch: &[Task], cfg: &ExperimentConfig) -> Result<(ModelBundle, MetricsRow)> {
    let cfg = ExperimentConfig {
        outer_optimizer: OuterOptimizer::Sgd,
        ..cfg.clone()
    };
    let mut t = Trainer::new(bundle.clone(), cfg);
    let row = t.train_batch(batch, None)?;
    Ok((t.bundle, row))
}

/// Full meta-training run; batches come from the task stream of `cfg.seed`.
pub fn meta_train(cfg: &ExperimentConfig, source: &mut dyn TaskSource) -> Result<(ModelBundle, Vec<MetricsRow>)> {
    let mut rows = Vec::with_capacity(cfg.iterations);
    let bundle = meta_train_with(cfg, source, |r| rows.push(r.clone()))?;
    Ok((bundle, rows))
}

pub fn meta_train_with(cfg: &ExperimentConfig, source: &mut dyn TaskSource, mut on_row: impl FnMut(&MetricsRow)) -> Result<ModelBundle> {
    cfg.validate()?;
    if source.kind() != cfg.task_kind {
        return Err(Error::Task(format!(
            "task source yields {:?}, config expects {:?}",
            source.kind(),
            cfg.task_kind
        )));
    }
    let bundle = ModelBundle::init(cfg, cfg.seed)?;
    let mut rng = rng::stream(cfg.seed, rng::STREAM_TASKS);
    let mut trainer = Trainer::new(bundle, cfg.clone());
    for _ in 0..cfg.iterations {
        let batch = source.sample_batch(cfg.batch_size, &mut rng)?;
        let second = if cfg.shared_batch || cfg.mode == Mode::Plain {
            None
        } else {
            Some(source.sample_batch(cfg.batch_size, &mut rng)?)
        };
        let row = trainer.train_batch(&batch, second.as_deref())?;
        on_row(&row);
    }
    Ok(trainer.bundle)
}

/// Mean and 95% half-width `1.96 · s / √n` (sample standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("summary of zero values".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Ok(Summary { mean, half_width, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub score: Summary,
    pub loss: Summary,
    pub per_task_scores: Vec<f64>,
}

/// Adapts to each task's support split, then scores its query split.
pub fn meta_evaluate(bundle: &ModelBundle, tasks: &[Task], cfg: &ExperimentConfig) -> Result<Evaluation> {
    if tasks.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one task".into()));
    }
    let per_task: Vec<(f64, f64)> = tasks
        .par_iter()
        .map(|task| {
            let graph = Graph::new();
            let theta = bundle.theta.track(&graph);
            let xi = bundle.xi_tensor().map(Tensor::detach);
            let adapted = inner_adapt(&bundle.arch, &theta, xi.as_ref(), &bundle.grouping, task, cfg, false)?;
            let out = bundle
                .arch
                .split_forward(&adapted.detach(), xi.as_ref(), &bundle.grouping, task, SplitTag::Query)?;
            Ok((score(&out, &task.query.y)?, target_loss(&out, &task.query.y)?.item()))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = per_task.iter().map(|p| p.0).collect();
    let losses: Vec<f64> = per_task.iter().map(|p| p.1).collect();
    Ok(Evaluation {
        score: Summary::of(&scores)?,
        loss: Summary::of(&losses)?,
        per_task_scores: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_single_and_duplicate() {
        let s = Summary::of(&[2.0]).unwrap();
        assert_eq!((s.mean, s.half_width), (2.0, 0.0));
        assert!(Summary::of(&[]).is_err());
        let v = [1.0, 2.0, 4.0, 7.0];
        let mut d = v.to_vec();
        d.extend_from_slice(&v);
        let (a, b) = (Summary::of(&v).unwrap(), Summary::of(&d).unwrap());
        assert_eq!(a.mean, b.mean);
        let n = v.len() as f64;
        let ratio = ((n - 1.0) / (2.0 * n - 1.0)).sqrt();
        assert!((b.half_width / a.half_width - ratio).abs() < 1e-12);
    }
}
