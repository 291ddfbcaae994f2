//! Synthetic task sources: sinusoid regression and factor worlds.
//!
//! A factor world is a linear structural model `x = D s + noise` with an
//! orthonormal dictionary `D` shared by every task. Each binary task owns a
//! subset of latent factors whose means shift with its label; paired tasks
//! with disjoint subsets can be sampled jointly with correlated labels to
//! plant a spurious cross-task correlation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `[n, out]` real targets.
    Real(Tensor),
    /// Class indices.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(t) => t.shape()[0],
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[n, input_dim]`.
    pub x: Tensor,
    pub y: Targets,
}

impl Split {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        if x.shape().len() != 2 || x.shape()[0] != y.len() {
            return Err(Error::Task(format!(
                "inputs {:?} do not match {} targets",
                x.shape(),
                y.len()
            )));
        }
        Ok(Split { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: Split,
    pub query: Split,
    pub kind: TaskKind,
    /// Generator parameters, for inspection.
    pub meta: BTreeMap<String, f64>,
}

impl Task {
    pub fn new(support: Split, query: Split, kind: TaskKind) -> Result<Self> {
        if support.is_empty() || query.is_empty() {
            return Err(Error::Task("support and query must be non-empty".into()));
        }
        if support.x.shape()[1] != query.x.shape()[1] {
            return Err(Error::Task(format!(
                "input widths differ: support {} vs query {}",
                support.x.shape()[1],
                query.x.shape()[1]
            )));
        }
        let matches = |y: &Targets| {
            matches!(
                (kind, y),
                (TaskKind::Regression, Targets::Real(_)) | (TaskKind::Classification, Targets::Classes(_))
            )
        };
        if !matches(&support.y) || !matches(&query.y) {
            return Err(Error::Task(format!("targets do not match task kind {kind:?}")));
        }
        Ok(Task {
            support,
            query,
            kind,
            meta: BTreeMap::new(),
        })
    }

    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Support => &self.support,
            SplitTag::Query => &self.query,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.support.x.shape()[1]
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------- sinusoid

/// How the phase draw enters the target function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseForm {
    /// `A sin(w x + b)`
    Phase,
    /// `A sin(w x) + b`
    Offset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinusoidSpec {
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
    pub noise_std: f64,
    pub input_range: [f64; 2],
    pub shots: usize,
    pub queries: usize,
    pub phase_form: PhaseForm,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        SinusoidSpec {
            amplitude: [0.1, 5.0],
            frequency: [0.5, 2.0],
            phase: [0.0, 2.0 * PI],
            noise_std: 0.3,
            input_range: [-5.0, 5.0],
            shots: 10,
            queries: 10,
            phase_form: PhaseForm::Phase,
        }
    }
}

impl SinusoidSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("phase", self.phase),
            ("input_range", self.input_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("sinusoid.{name}: range must satisfy lo <= hi")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("sinusoid.noise_std: must be >= 0".into()));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::Config("sinusoid: shots and queries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn target(&self, amplitude: f64, frequency: f64, phase: f64, x: f64) -> f64 {
        match self.phase_form {
            PhaseForm::Phase => amplitude * (frequency * x + phase).sin(),
            PhaseForm::Offset => amplitude * (frequency * x).sin() + phase,
        }
    }
}

fn uniform(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Draws one sinusoid task. Support and query inputs are separate draws
/// from the input range, and no input value appears in both splits.
pub fn sample_sinusoid_task(spec: &SinusoidSpec, rng: &mut Rng) -> Result<Task> {
    let amp = uniform(rng, spec.amplitude);
    let freq = uniform(rng, spec.frequency);
    let phase = uniform(rng, spec.phase);
    let total = spec.shots + spec.queries;
    let mut xs: Vec<f64> = Vec::with_capacity(total);
    while xs.len() < total {
        let x = uniform(rng, spec.input_range);
        if !xs.contains(&x) || spec.input_range[0] == spec.input_range[1] {
            xs.push(x);
        }
    }
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| spec.target(amp, freq, phase, x) + spec.noise_std * normal(rng))
        .collect();
    let split = |lo: usize, hi: usize| -> Result<Split> {
        let n = hi - lo;
        Split::new(
            Tensor::new(&[n, 1], xs[lo..hi].to_vec())?,
            Targets::Real(Tensor::new(&[n, 1], ys[lo..hi].to_vec())?),
        )
    };
    let mut task = Task::new(split(0, spec.shots)?, split(spec.shots, total)?, TaskKind::Regression)?;
    task.meta.insert("amplitude".into(), amp);
    task.meta.insert("frequency".into(), freq);
    task.meta.insert("phase".into(), phase);
    Ok(task)
}

// ------------------------------------------------------------ factor world

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorWorldSpec {
    /// Observed feature width.
    pub ambient_dim: usize,
    /// Number of ground-truth latent factors.
    pub factors: usize,
    /// Causal factors per task.
    pub subset_size: usize,
    /// Mean shift `mu` applied to a task's causal factors, signed by label.
    pub class_mean: f64,
    pub factor_noise: f64,
    pub obs_noise: f64,
    /// Label agreement probability for paired tasks.
    pub agreement: f64,
    /// Tasks available for meta-training (an even number; consecutive ids pair up).
    pub train_tasks: usize,
    /// Fresh tasks reserved for held-out evaluation.
    pub heldout_tasks: usize,
    pub shots: usize,
    pub queries: usize,
}

impl Default for FactorWorldSpec {
    fn default() -> Self {
        FactorWorldSpec {
            ambient_dim: 16,
            factors: 12,
            subset_size: 2,
            class_mean: 1.0,
            factor_noise: 1.0,
            obs_noise: 0.1,
            agreement: 0.8,
            train_tasks: 12,
            heldout_tasks: 8,
            shots: 6,
            queries: 10,
        }
    }
}

impl FactorWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 || self.ambient_dim < self.factors {
            return Err(Error::Config(format!(
                "world: need ambient_dim >= factors >= 1, got {} and {}",
                self.ambient_dim, self.factors
            )));
        }
        if self.subset_size == 0 || 2 * self.subset_size > self.factors {
            return Err(Error::Config(format!(
                "world: subset_size must be in 1..={} so pairs can be disjoint",
                self.factors / 2
            )));
        }
        if !(0.0..=1.0).contains(&self.agreement) {
            return Err(Error::Config("world.agreement: must lie in [0, 1]".into()));
        }
        if self.factor_noise < 0.0 || self.obs_noise < 0.0 {
            return Err(Error::Config("world: noise scales must be >= 0".into()));
        }
        if self.train_tasks < 2 || self.train_tasks % 2 != 0 {
            return Err(Error::Config("world.train_tasks: must be even and >= 2".into()));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::Config("world: shots and queries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shared dictionary plus the causal factor subset of every task.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorWorld {
    pub spec: FactorWorldSpec,
    /// `[ambient_dim, factors]` with orthonormal columns.
    pub dictionary: Tensor,
    /// Causal factor indices per task id; ids `0..train_tasks` are the
    /// training family, the rest are held out.
    pub subsets: Vec<Vec<usize>>,
}

impl FactorWorld {
    pub fn train_ids(&self) -> std::ops::Range<usize> {
        0..self.spec.train_tasks
    }

    pub fn heldout_ids(&self) -> std::ops::Range<usize> {
        self.spec.train_tasks..self.subsets.len()
    }

    /// Training pairs `(2m, 2m + 1)`; their subsets are disjoint.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.spec.train_tasks / 2).map(|m| (2 * m, 2 * m + 1)).collect()
    }

    pub fn subset(&self, task_id: usize) -> Result<&[usize]> {
        self.subsets
            .get(task_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Task(format!("unknown task id {task_id}")))
    }

    /// Dictionary columns outside the task's causal subset.
    pub fn noncausal_factors(&self, task_id: usize) -> Result<Vec<usize>> {
        let s = self.subset(task_id)?;
        Ok((0..self.spec.factors).filter(|k| !s.contains(k)).collect())
    }

    /// `x = D s + obs_noise * eta` for one latent vector.
    fn observe(&self, latent: &[f64], rng: &mut Rng) -> Vec<f64> {
        let (d, k) = (self.spec.ambient_dim, self.spec.factors);
        let dict = self.dictionary.data();
        (0..d)
            .map(|r| {
                let mut v: f64 = (0..k).map(|c| dict[r * k + c] * latent[c]).sum();
                v += self.spec.obs_noise * normal(rng);
                v
            })
            .collect()
    }

    /// Latent vector: factor noise everywhere, plus `mu * y` on each
    /// `(subset, y)` pair's factors.
    fn latent(&self, signals: &[(&[usize], f64)], rng: &mut Rng) -> Vec<f64> {
        let mut s: Vec<f64> = (0..self.spec.factors)
            .map(|_| self.spec.factor_noise * normal(rng))
            .collect();
        for (subset, y) in signals {
            for &k in *subset {
                s[k] += self.spec.class_mean * y;
            }
        }
        s
    }
}

fn sorted_subset(rng: &mut Rng, pool: &[usize], size: usize) -> Vec<usize> {
    let mut s: Vec<usize> = index::sample(rng, pool.len(), size)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    s.sort_unstable();
    s
}

/// Builds a world: orthonormal dictionary from the QR factorisation of a
/// Gaussian matrix, disjoint subsets within each training pair, and held-out
/// tasks whose subsets differ from every training subset when possible.
pub fn sample_factor_world(spec: &FactorWorldSpec, rng: &mut Rng) -> Result<FactorWorld> {
    spec.validate()?;
    let (d, k) = (spec.ambient_dim, spec.factors);
    let gauss = DMatrix::from_fn(d, k, |_, _| normal(rng));
    let q = gauss.qr().q();
    let mut dict = Vec::with_capacity(d * k);
    for r in 0..d {
        for c in 0..k {
            dict.push(q[(r, c)]);
        }
    }
    let dictionary = Tensor::new(&[d, k], dict)?;

    let all: Vec<usize> = (0..k).collect();
    let mut subsets = Vec::with_capacity(spec.train_tasks + spec.heldout_tasks);
    for _ in 0..spec.train_tasks / 2 {
        let first = sorted_subset(rng, &all, spec.subset_size);
        let rest: Vec<usize> = all.iter().copied().filter(|f| !first.contains(f)).collect();
        let second = sorted_subset(rng, &rest, spec.subset_size);
        subsets.push(first);
        subsets.push(second);
    }
    for _ in 0..spec.heldout_tasks {
        let mut s = sorted_subset(rng, &all, spec.subset_size);
        for _ in 0..64 {
            if !subsets[..spec.train_tasks].contains(&s) {
                break;
            }
            s = sorted_subset(rng, &all, spec.subset_size);
        }
        subsets.push(s);
    }
    Ok(FactorWorld {
        spec: spec.clone(),
        dictionary,
        subsets,
    })
}

/// Balanced `±1` labels in shuffled order (an extra random label when odd).
fn balanced_labels(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut ys: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    if n % 2 == 1 {
        ys[n - 1] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ys.swap(i, j);
    }
    ys
}

fn class_index(y: f64) -> usize {
    usize::from(y > 0.0)
}

fn classification_split(world: &FactorWorld, rows: Vec<Vec<f64>>, labels: &[f64]) -> Result<Split> {
    let n = rows.len();
    Split::new(
        Tensor::new(&[n, world.spec.ambient_dim], rows.concat())?,
        Targets::Classes(labels.iter().map(|&y| class_index(y)).collect()),
    )
}

/// Unconfounded samples for one task: its own factors carry the label,
/// every other factor is pure noise. Labels are balanced per split.
pub fn sample_classification_task(world: &FactorWorld, task_id: usize, shots: usize, queries: usize, rng: &mut Rng) -> Result<Task> {
    let subset = world.subset(task_id)?.to_vec();
    let mut make = |n: usize| -> Result<Split> {
        let ys = balanced_labels(n, rng);
        let rows = ys
            .iter()
            .map(|&y| {
                let s = world.latent(&[(&subset, y)], rng);
                world.observe(&s, rng)
            })
            .collect();
        classification_split(world, rows, &ys)
    };
    let support = make(shots)?;
    let query = make(queries)?;
    let mut task = Task::new(support, query, TaskKind::Classification)?;
    task.meta.insert("task_id".into(), task_id as f64);
    Ok(task)
}

/// Paired labels: `y_i` balanced, `y_j = y_i` with probability `q`.
fn paired_labels(n: usize, q: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let yi = balanced_labels(n, rng);
    let yj = yi
        .iter()
        .map(|&y| if rng.random_bool(q) { y } else { -y })
        .collect();
    (yi, yj)
}

/// Jointly sampled tasks for each pair.
///
/// Each aligned draw shares one latent vector in which the first task's
/// factors carry `y_i` and the second task's factors carry `y_j`, with
/// `P(y_i = y_j) = q`. Both tasks see the same observation and keep their
/// own label, so each task's inputs contain the partner's label-driven
/// factors: a spurious but predictive signal whenever `q != 0.5`.
pub fn make_confounded_batch(
    world: &FactorWorld,
    pairs: &[(usize, usize)],
    q: f64,
    shots: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Vec<Task>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("agreement probability {q} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(2 * pairs.len());
    for &(i, j) in pairs {
        let si = world.subset(i)?.to_vec();
        let sj = world.subset(j)?.to_vec();
        let mut make = |n: usize| -> Result<(Split, Split)> {
            let (yi, yj) = paired_labels(n, q, rng);
            let rows: Vec<Vec<f64>> = yi
                .iter()
                .zip(&yj)
                .map(|(&a, &b)| {
                    let s = world.latent(&[(&si, a), (&sj, b)], rng);
                    world.observe(&s, rng)
                })
                .collect();
            Ok((
                classification_split(world, rows.clone(), &yi)?,
                classification_split(world, rows, &yj)?,
            ))
        };
        let (si_sup, sj_sup) = make(shots)?;
        let (si_qry, sj_qry) = make(queries)?;
        let mut ti = Task::new(si_sup, si_qry, TaskKind::Classification)?;
        let mut tj = Task::new(sj_sup, sj_qry, TaskKind::Classification)?;
        ti.meta.insert("task_id".into(), i as f64);
        ti.meta.insert("partner".into(), j as f64);
        tj.meta.insert("task_id".into(), j as f64);
        tj.meta.insert("partner".into(), i as f64);
        ti.meta.insert("agreement".into(), q);
        tj.meta.insert("agreement".into(), q);
        out.push(ti);
        out.push(tj);
    }
    Ok(out)
}

/// Two-task dataset with disjoint factor blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Dataset {
    /// Row-major `[n, dim_i + dim_j]` features `z = [A^i; A^j]`.
    pub z: Vec<f64>,
    pub dim_i: usize,
    pub dim_j: usize,
    pub y_i: Vec<f64>,
    pub y_j: Vec<f64>,
}

impl Theorem1Dataset {
    pub fn rows(&self) -> usize {
        self.y_i.len()
    }

    pub fn width(&self) -> usize {
        self.dim_i + self.dim_j
    }
}

/// Gaussian factor blocks for the two-task setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoTaskSpec {
    pub dim_i: usize,
    pub dim_j: usize,
    pub mu_i: f64,
    pub mu_j: f64,
    pub sigma_i: f64,
    pub sigma_j: f64,
}

impl Default for TwoTaskSpec {
    fn default() -> Self {
        TwoTaskSpec {
            dim_i: 2,
            dim_j: 2,
            mu_i: 1.0,
            mu_j: 1.0,
            sigma_i: 1.0,
            sigma_j: 1.0,
        }
    }
}

/// `n` rows with `A^i ~ N(mu_i y_i, sigma_i^2 I)`, `A^j ~ N(mu_j y_j,
/// sigma_j^2 I)` and `P(y_i = y_j) = q`. Labels are i.i.d. uniform on `±1`.
pub fn sample_theorem1_dataset(spec: &TwoTaskSpec, n: usize, q: f64, rng: &mut Rng) -> Result<Theorem1Dataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset needs at least one row".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Invalid(format!("agreement probability {q} outside [0, 1]")));
    }
    let w = spec.dim_i + spec.dim_j;
    let mut z = Vec::with_capacity(n * w);
    let mut y_i = Vec::with_capacity(n);
    let mut y_j = Vec::with_capacity(n);
    for _ in 0..n {
        let a = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let b = if rng.random_bool(q) { a } else { -a };
        for _ in 0..spec.dim_i {
            z.push(spec.mu_i * a + spec.sigma_i * normal(rng));
        }
        for _ in 0..spec.dim_j {
            z.push(spec.mu_j * b + spec.sigma_j * normal(rng));
        }
        y_i.push(a);
        y_j.push(b);
    }
    Ok(Theorem1Dataset {
        z,
        dim_i: spec.dim_i,
        dim_j: spec.dim_j,
        y_i,
        y_j,
    })
}

/// Source of meta-training batches.
pub trait TaskSource {
    fn kind(&self) -> TaskKind;
    fn sample_batch(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<Task>>;
}

pub struct SinusoidSource {
    pub spec: SinusoidSpec,
}

impl TaskSource for SinusoidSource {
    fn kind(&self) -> TaskKind {
        TaskKind::Regression
    }

    fn sample_batch(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<Task>> {
        (0..n).map(|_| sample_sinusoid_task(&self.spec, rng)).collect()
    }
}

/// Training batches from a factor world. Each batch draws `n` distinct
/// training tasks; a pair whose two members land in the same batch is
/// sampled jointly with label agreement `agreement`, any other task is
/// sampled on its own. Larger batches therefore hold more confounded pairs.
pub struct ConfoundedSource {
    pub world: FactorWorld,
    pub agreement: f64,
}

impl TaskSource for ConfoundedSource {
    fn kind(&self) -> TaskKind {
        TaskKind::Classification
    }

    fn sample_batch(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<Task>> {
        let ids: Vec<usize> = self.world.train_ids().collect();
        if n > ids.len() {
            return Err(Error::Invalid(format!(
                "batch of {n} tasks, world has {} training tasks",
                ids.len()
            )));
        }
        let mut chosen: Vec<usize> = index::sample(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect();
        chosen.sort_unstable();
        let (shots, queries) = (self.world.spec.shots, self.world.spec.queries);
        let mut batch = Vec::with_capacity(n);
        for (i, j) in self.world.train_pairs() {
            match (chosen.contains(&i), chosen.contains(&j)) {
                (true, true) => batch.extend(make_confounded_batch(&self.world, &[(i, j)], self.agreement, shots, queries, rng)?),
                (true, false) => batch.push(sample_classification_task(&self.world, i, shots, queries, rng)?),
                (false, true) => batch.push(sample_classification_task(&self.world, j, shots, queries, rng)?),
                (false, false) => {}
            }
        }
        let paired: Vec<usize> = batch.iter().map(|t| t.meta["task_id"] as usize).collect();
        for &id in chosen.iter().filter(|id| !paired.contains(id)) {
            batch.push(sample_classification_task(&self.world, id, shots, queries, rng)?);
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn sinusoid_ranges_and_disjoint_inputs() {
        let spec = SinusoidSpec::default();
        let mut rng = stream(1, 1);
        for _ in 0..200 {
            let t = sample_sinusoid_task(&spec, &mut rng).unwrap();
            let a = t.meta["amplitude"];
            assert!((0.1..=5.0).contains(&a));
            let s = t.support.x.data();
            assert!(t.query.x.data().iter().all(|q| !s.contains(q)));
            assert_eq!(t.support.len(), 10);
            assert_eq!(t.query.len(), 10);
        }
    }

    #[test]
    fn zero_noise_targets_on_curve() {
        let spec = SinusoidSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let t = sample_sinusoid_task(&spec, &mut stream(2, 1)).unwrap();
        let (a, w, b) = (t.meta["amplitude"], t.meta["frequency"], t.meta["phase"]);
        let Targets::Real(y) = &t.support.y else { panic!() };
        for (x, y) in t.support.x.data().iter().zip(y.data()) {
            assert_eq!(*y, a * (w * x + b).sin());
        }
    }

    #[test]
    fn offset_form() {
        let spec = SinusoidSpec {
            phase_form: PhaseForm::Offset,
            ..Default::default()
        };
        assert_eq!(spec.target(2.0, 1.0, 0.5, 0.0), 0.5);
    }

    #[test]
    fn world_validation() {
        let bad = FactorWorldSpec {
            ambient_dim: 4,
            factors: 8,
            ..Default::default()
        };
        assert!(sample_factor_world(&bad, &mut stream(0, 1)).is_err());
        let odd = FactorWorldSpec {
            train_tasks: 3,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn unknown_task_id_rejected() {
        let w = sample_factor_world(&FactorWorldSpec::default(), &mut stream(0, 1)).unwrap();
        let n = w.subsets.len();
        assert!(sample_classification_task(&w, n, 4, 4, &mut stream(0, 2)).is_err());
        assert!(make_confounded_batch(&w, &[(0, n)], 0.5, 4, 4, &mut stream(0, 2)).is_err());
    }

    #[test]
    fn task_rejects_mismatched_kind() {
        let x = Tensor::zeros(&[1, 1]);
        let s = Split::new(x.clone(), Targets::Classes(vec![0])).unwrap();
        assert!(Task::new(s.clone(), s, TaskKind::Regression).is_err());
    }
}
