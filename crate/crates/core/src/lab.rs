//! Spurious cross-task correlation experiments: closed-form and sampled
//! least-squares weights in the two-task setting, the batch-size sweep on
//! confounded factor worlds, and a sensitivity probe for trained models.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::meta::{meta_evaluate, meta_train_with, Summary};
use crate::models::ModelBundle;
use crate::rng::{self, Rng};
use crate::tasks::{
    sample_classification_task, sample_factor_world, sample_theorem1_dataset, ConfoundedSource, FactorWorld, TaskKind,
    Theorem1Dataset, TwoTaskSpec,
};
use crate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem1Config {
    pub spec: TwoTaskSpec,
    /// Agreement probabilities `P(y_i = y_j)`.
    pub q_grid: Vec<f64>,
    /// Finite sample sizes; the population solution is always reported.
    pub n_grid: Vec<usize>,
    pub population: bool,
    /// Datasets drawn per finite `(q, n)` cell.
    pub resamples: usize,
    /// Ridge for the sampled fits; `None` uses `1e-8 · trace(ZᵀZ) / dim`.
    pub ridge: Option<f64>,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Theorem1Config {
            spec: TwoTaskSpec::default(),
            q_grid: vec![0.2, 0.5, 0.8],
            n_grid: vec![50, 500],
            population: true,
            resamples: 200,
            ridge: None,
        }
    }
}

impl Theorem1Config {
    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        if s.dim_i == 0 || s.dim_j == 0 {
            return Err(Error::Config("theorem1.spec: block widths must be >= 1".into()));
        }
        if !(s.sigma_i >= 0.0 && s.sigma_j >= 0.0) || ![s.mu_i, s.mu_j, s.sigma_i, s.sigma_j].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("theorem1.spec: means must be finite and noise scales >= 0".into()));
        }
        if self.q_grid.is_empty() || self.q_grid.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Config("theorem1.q_grid: needs values in [0, 1]".into()));
        }
        if self.n_grid.contains(&0) {
            return Err(Error::Config("theorem1.n_grid: sample sizes must be >= 1".into()));
        }
        if !self.population && self.n_grid.is_empty() {
            return Err(Error::Config("theorem1: nothing to compute".into()));
        }
        if !self.n_grid.is_empty() && self.resamples == 0 {
            return Err(Error::Config("theorem1.resamples: must be >= 1".into()));
        }
        if let Some(e) = self.ridge {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("theorem1.ridge: must be finite and >= 0, got {e}")));
            }
        }
        Ok(())
    }
}

/// Least-squares weights split into the task's own block and the
/// partner's block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub spec: TwoTaskSpec,
    pub q: f64,
    /// `None` for the population solution.
    pub n: Option<usize>,
    /// How `q` is read: always the agreement probability `P(y_i = y_j)`.
    pub correlation_reading: String,
    /// Pearson correlation of the labels implied by `q`, i.e. `2q − 1`.
    pub label_correlation: f64,
    pub causal_weights: Vec<f64>,
    pub noncausal_weights: Vec<f64>,
    /// For finite `n`, the median over resamples; the weights above come
    /// from the resample attaining it.
    pub noncausal_norm: f64,
    pub resamples: usize,
    pub zero_noncausal: bool,
    /// Population: zero exactly when `q = 0.5`. Finite: strictly positive.
    pub consistent: bool,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cholesky_solve(m: DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let ch = m.cholesky().ok_or(Error::Singular(what))?;
    Ok(ch.solve(b))
}

/// `Cov(z)⁻¹ Cov(z, y_i)` for `z = [A^i; A^j]`, solved block-wise through
/// the Schur complement of the `A^i` block so that a vanishing cross
/// covariance yields an exactly zero partner block.
pub fn population_lsq_weights(spec: &TwoTaskSpec, q: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("agreement probability {q} outside [0, 1]")));
    }
    let (di, dj) = (spec.dim_i, spec.dim_j);
    let rho = 2.0 * q - 1.0;
    let a = DMatrix::from_fn(di, di, |r, c| {
        spec.mu_i * spec.mu_i + if r == c { spec.sigma_i * spec.sigma_i } else { 0.0 }
    });
    let d = DMatrix::from_fn(dj, dj, |r, c| {
        spec.mu_j * spec.mu_j + if r == c { spec.sigma_j * spec.sigma_j } else { 0.0 }
    });
    let c = DMatrix::from_element(dj, di, spec.mu_i * spec.mu_j * rho);
    let b_i = DVector::from_element(di, spec.mu_i);
    let b_j = DVector::from_element(dj, spec.mu_j * rho);

    // A w_i + Cᵀ w_j = b_i,  C w_i + D w_j = b_j
    let a_inv_b = cholesky_solve(a.clone(), &b_i, "own-block covariance")?;
    let a_inv_ct = {
        let ch = a.clone().cholesky().ok_or(Error::Singular("own-block covariance"))?;
        ch.solve(&c.transpose())
    };
    let schur = &d - &c * &a_inv_ct;
    let rhs = &b_j - &c * &a_inv_b;
    let w_j = cholesky_solve(schur, &rhs, "joint covariance")?;
    let w_i = a_inv_b - a_inv_ct * &w_j;
    Ok(w_i.iter().chain(w_j.iter()).copied().collect())
}

/// `(ZᵀZ + εI)⁻¹ Zᵀ y_i`; `None` picks `ε = 1e-8 · trace(ZᵀZ) / dim`.
pub fn empirical_lsq_weights(data: &Theorem1Dataset, ridge: Option<f64>) -> Result<Vec<f64>> {
    let (n, w) = (data.rows(), data.width());
    if data.z.len() != n * w {
        return Err(Error::Invalid(format!("design has {} values, expected {n} x {w}", data.z.len())));
    }
    let mut gram = DMatrix::<f64>::zeros(w, w);
    let mut zty = DVector::<f64>::zeros(w);
    for (row, &y) in data.z.chunks(w).zip(&data.y_i) {
        for r in 0..w {
            zty[r] += row[r] * y;
            for c in r..w {
                gram[(r, c)] += row[r] * row[c];
            }
        }
    }
    for r in 0..w {
        for c in 0..r {
            gram[(r, c)] = gram[(c, r)];
        }
    }
    let eps = ridge.unwrap_or_else(|| 1e-8 * gram.trace() / w as f64);
    for r in 0..w {
        gram[(r, r)] += eps;
    }
    let sol = gram
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&zty))
        .or_else(|| gram.lu().solve(&zty))
        .ok_or(Error::Singular("sample second-moment matrix"))?;
    Ok(sol.iter().copied().collect())
}

fn split_weights(spec: &TwoTaskSpec, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (w[..spec.dim_i].to_vec(), w[spec.dim_i..].to_vec())
}

/// Population and finite-sample reports for every `(q, n)` in the grid,
/// population first for each `q`.
pub fn theorem1_experiment(cfg: &Theorem1Config, seed: u64) -> Result<Vec<Theorem1Report>> {
    cfg.validate()?;
    let spec = &cfg.spec;
    let mut reports = Vec::new();
    for (qi, &q) in cfg.q_grid.iter().enumerate() {
        let base = Theorem1Report {
            spec: spec.clone(),
            q,
            n: None,
            correlation_reading: "agreement probability P(y_i = y_j)".into(),
            label_correlation: 2.0 * q - 1.0,
            causal_weights: vec![],
            noncausal_weights: vec![],
            noncausal_norm: 0.0,
            resamples: 0,
            zero_noncausal: false,
            consistent: false,
        };
        if cfg.population {
            let w = population_lsq_weights(spec, q)?;
            let (c, nc) = split_weights(spec, &w);
            let norm = l2(&nc);
            reports.push(Theorem1Report {
                causal_weights: c,
                noncausal_weights: nc,
                noncausal_norm: norm,
                zero_noncausal: norm == 0.0,
                consistent: (norm == 0.0) == (q == 0.5),
                ..base.clone()
            });
        }
        for (ni, &n) in cfg.n_grid.iter().enumerate() {
            let cell = rng::substream(rng::substream(rng::STREAM_TASKS, qi as u64), ni as u64);
            let fits: Vec<(f64, Vec<f64>)> = (0..cfg.resamples)
                .into_par_iter()
                .map(|r| {
                    let mut g = rng::stream(seed, rng::substream(cell, r as u64));
                    let data = sample_theorem1_dataset(spec, n, q, &mut g)?;
                    let w = empirical_lsq_weights(&data, cfg.ridge)?;
                    Ok((l2(&w[spec.dim_i..]), w))
                })
                .collect::<Result<_>>()?;
            let mut order: Vec<usize> = (0..fits.len()).collect();
            order.sort_by(|&a, &b| fits[a].0.total_cmp(&fits[b].0));
            let (norm, w) = &fits[order[(order.len() - 1) / 2]];
            let (c, nc) = split_weights(spec, w);
            reports.push(Theorem1Report {
                n: Some(n),
                causal_weights: c,
                noncausal_weights: nc,
                noncausal_norm: *norm,
                resamples: cfg.resamples,
                zero_noncausal: *norm == 0.0,
                consistent: *norm > 0.0,
                ..base.clone()
            });
        }
    }
    Ok(reports)
}

/// Median partner-block norm of sampled fits.
pub fn median_noncausal_norm(spec: &TwoTaskSpec, n: usize, q: f64, resamples: usize, ridge: Option<f64>, seed: u64) -> Result<f64> {
    let cfg = Theorem1Config {
        spec: spec.clone(),
        q_grid: vec![q],
        n_grid: vec![n],
        population: false,
        resamples,
        ridge,
    };
    Ok(theorem1_experiment(&cfg, seed)?[0].noncausal_norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Base batch size `B`; the sweep trains at `B` and `2B`.
    pub base_batch: usize,
    pub iterations: usize,
    /// Seeds `seed .. seed + seeds`.
    pub seeds: usize,
    pub modes: Vec<Mode>,
    /// Evaluation tasks per split.
    pub eval_tasks: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base_batch: 4,
            iterations: 2_000,
            seeds: 10,
            modes: vec![Mode::Plain, Mode::Causal],
            eval_tasks: 50,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_batch == 0 || self.iterations == 0 || self.seeds == 0 || self.eval_tasks == 0 {
            return Err(Error::Config("sweep: base_batch, iterations, seeds and eval_tasks must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("sweep.modes: at least one mode".into()));
        }
        Ok(())
    }

    pub fn batch_sizes(&self) -> [usize; 2] {
        [self.base_batch, 2 * self.base_batch]
    }
}

/// One trained cell of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub mode: Mode,
    pub batch_size: usize,
    /// Fresh unconfounded tasks from the training family.
    pub held_in: Summary,
    /// Tasks whose factor subsets were never trained on.
    pub held_out: Summary,
}

/// Across-seed aggregate for one `(mode, batch size)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub mode: Mode,
    pub batch_size: usize,
    pub held_in: Summary,
    pub held_out: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub base_batch: usize,
    pub agreement: f64,
    pub runs: Vec<SweepRun>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepReport {
    pub fn aggregate(&self, mode: Mode, batch_size: usize) -> Option<&SweepAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.mode == mode && a.batch_size == batch_size)
    }
}

/// Means over seeds of the per-run accuracies, grouped by mode and batch
/// size in first-seen order.
pub fn aggregate_runs(runs: &[SweepRun]) -> Result<Vec<SweepAggregate>> {
    let mut keys: Vec<(Mode, usize)> = Vec::new();
    for r in runs {
        if !keys.contains(&(r.mode, r.batch_size)) {
            keys.push((r.mode, r.batch_size));
        }
    }
    keys.into_iter()
        .map(|(mode, b)| {
            let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.mode == mode && r.batch_size == b).collect();
            let held_in: Vec<f64> = cell.iter().map(|r| r.held_in.mean).collect();
            let held_out: Vec<f64> = cell.iter().map(|r| r.held_out.mean).collect();
            Ok(SweepAggregate {
                mode,
                batch_size: b,
                held_in: Summary::of(&held_in)?,
                held_out: Summary::of(&held_out)?,
            })
        })
        .collect()
}

pub fn sweep_world(cfg: &ExperimentConfig, seed: u64) -> Result<FactorWorld> {
    let mut g = rng::stream(seed, rng::substream(rng::STREAM_TASKS, u64::MAX));
    sample_factor_world(&cfg.world, &mut g)
}

/// Held-in and held-out evaluation tasks for one seed; identical across
/// modes and batch sizes.
pub fn sweep_eval_tasks(world: &FactorWorld, n: usize, seed: u64) -> Result<(Vec<crate::tasks::Task>, Vec<crate::tasks::Task>)> {
    let mut g: Rng = rng::stream(seed, rng::STREAM_EVAL);
    let spec = &world.spec;
    let train: Vec<usize> = world.train_ids().collect();
    let held: Vec<usize> = world.heldout_ids().collect();
    let draw = |ids: &[usize], g: &mut Rng| -> Result<Vec<crate::tasks::Task>> {
        (0..n)
            .map(|k| sample_classification_task(world, ids[k % ids.len()], spec.shots, spec.queries, g))
            .collect()
    };
    let held_in = draw(&train, &mut g)?;
    let held_out = if held.is_empty() { Vec::new() } else { draw(&held, &mut g)? };
    Ok((held_in, held_out))
}

/// Trains one sweep cell and evaluates it on both splits.
pub fn sweep_cell(base: &ExperimentConfig, seed: u64, mode: Mode, batch_size: usize) -> Result<SweepRun> {
    let sweep = &base.sweep;
    let cfg = ExperimentConfig {
        seed,
        mode,
        batch_size,
        iterations: sweep.iterations,
        ..base.clone()
    };
    let world = sweep_world(&cfg, seed)?;
    let (held_in, held_out) = sweep_eval_tasks(&world, sweep.eval_tasks, seed)?;
    if held_out.is_empty() {
        return Err(Error::Config("world.heldout_tasks: the sweep needs held-out tasks".into()));
    }
    let mut source = ConfoundedSource {
        world,
        agreement: cfg.world.agreement,
    };
    let bundle = meta_train_with(&cfg, &mut source, |_| {})?;
    Ok(SweepRun {
        seed,
        mode,
        batch_size,
        held_in: meta_evaluate(&bundle, &held_in, &cfg)?.score,
        held_out: meta_evaluate(&bundle, &held_out, &cfg)?.score,
    })
}

/// Every `(seed, mode, batch size)` cell, trained in parallel and folded in
/// a fixed order.
pub fn batch_size_sweep(base: &ExperimentConfig) -> Result<SweepReport> {
    base.validate()?;
    if base.task_kind != TaskKind::Classification {
        return Err(Error::Config("sweep: task_kind must be classification".into()));
    }
    let sweep = &base.sweep;
    let mut cells = Vec::new();
    for s in 0..sweep.seeds as u64 {
        for &mode in &sweep.modes {
            for b in sweep.batch_sizes() {
                cells.push((base.seed + s, mode, b));
            }
        }
    }
    let runs = cells
        .par_iter()
        .map(|&(seed, mode, b)| sweep_cell(base, seed, mode, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        base_batch: sweep.base_batch,
        agreement: base.world.agreement,
        aggregates: aggregate_runs(&runs)?,
        runs,
    })
}

/// Mean squared directional derivative of the logit margin along the
/// task's non-causal dictionary columns, probed at the two class centres.
pub fn noncausal_weight_mass(bundle: &ModelBundle, world: &FactorWorld, task_id: usize) -> Result<f64> {
    let d = world.spec.ambient_dim;
    let k = world.spec.factors;
    let subset = world.subset(task_id)?;
    let dict = world.dictionary.data();
    let column = |c: usize| -> Vec<f64> { (0..d).map(|r| dict[r * k + c]).collect() };
    let centre = |y: f64| -> Vec<f64> {
        let mut x = vec![0.0; d];
        for &c in subset {
            for (xi, v) in x.iter_mut().zip(column(c)) {
                *xi += world.spec.class_mean * y * v;
            }
        }
        x
    };
    let probes = [centre(1.0), centre(-1.0)];
    let weights = match bundle.arch.mode {
        Mode::Plain => None,
        Mode::Causal => {
            let avg = Tensor::vector(probes[0].iter().zip(&probes[1]).map(|(a, b)| 0.5 * (a + b)).collect());
            Some(bundle.grouping_weights(&avg)?)
        }
    };
    let margin = |x: &[f64]| -> Result<f64> {
        let out = bundle.predict(&Tensor::new(&[1, d], x.to_vec())?, weights.as_ref())?;
        let o = out.data();
        Ok(if o.len() >= 2 { o[1] - o[0] } else { o[0] })
    };
    let h = 1e-4;
    let mut total = 0.0;
    for p in &probes {
        for c in world.noncausal_factors(task_id)? {
            let dir = column(c);
            let plus: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let dd = (margin(&plus)? - margin(&minus)?) / (2.0 * h);
            total += dd * dd;
        }
    }
    Ok(total / probes.len() as f64)
}
