//! Encoder `g`, head `h`, grouping network and factor matrix, plus the
//! forward passes that combine them.
//!
//! Forward functions take parameter sets explicitly so the same code runs
//! on stored values, on graph leaves, and on adapted (differentiable)
//! copies produced inside the meta-learning loops.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{mse_loss, nll_loss, ParamSet, Tensor};
use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tasks::{SplitTag, Targets, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, x: Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh()?,
            Activation::Relu => x.relu()?,
            Activation::Softplus => x.softplus()?,
        })
    }
}

/// Normalisation turning positive grouping outputs into weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// `v / sum(v)`
    Sum,
    /// `v / max(v)`
    Max,
}

const NORM_FLOOR: f64 = 1e-12;

impl NormKind {
    pub fn apply(self, v: &Tensor) -> Result<Tensor> {
        let denom = match self {
            NormKind::Sum => v.sum_all()?,
            NormKind::Max => v.max_all()?,
        }
        .clamp_min(NORM_FLOOR)?;
        Ok(v.div(&denom)?)
    }
}

/// Fully connected network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "an MLP needs at least one layer of positive widths, got {widths:?}"
            )));
        }
        Ok(MlpSpec { widths, hidden, output })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights `N(0, 1/fan_in)`, zero biases. Names are `{prefix}.w{l}` and
    /// `{prefix}.b{l}`.
    pub fn init(&self, prefix: &str, rng: &mut Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>();
            p.insert(format!("{prefix}.w{l}"), Tensor::new(&[fan_in, fan_out], data)?)?;
            p.insert(format!("{prefix}.b{l}"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(p)
    }

    pub fn forward(&self, params: &ParamSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::Invalid(format!(
                "{prefix}: expected input [batch, {}], got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        let mut h = x.clone();
        for l in 0..self.layers() {
            let w = params.expect(&format!("{prefix}.w{l}"))?;
            let b = params.expect(&format!("{prefix}.b{l}"))?;
            h = h.matmul(w)?.add_row(b)?;
            let act = if l + 1 == self.layers() { self.output } else { self.hidden };
            h = act.apply(h)?;
        }
        Ok(h)
    }
}

pub const ENCODER: &str = "g";
pub const HEAD: &str = "h";
pub const GROUPING: &str = "gr";

/// The `N_z × N_k` factor matrix; column `k` is candidate factor `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix(pub Tensor);

impl FactorMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] < 2 {
            return Err(Error::Invalid(format!(
                "factor matrix must be [N_z, N_k >= 2], got {:?}",
                t.shape()
            )));
        }
        Ok(FactorMatrix(t))
    }

    /// Entries `N(0, 1/N_z)`.
    pub fn random(n_z: usize, n_k: usize, rng: &mut Rng) -> Result<Self> {
        let std = 1.0 / (n_z as f64).sqrt();
        let data = (0..n_z * n_k)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Self::new(Tensor::new(&[n_z, n_k], data)?)
    }

    pub fn n_z(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn n_k(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `|ΞᵀΞ|` as an `N_k × N_k` row-major matrix.
    pub fn gram_abs(&self) -> Result<Vec<Vec<f64>>> {
        let x = self.0.detach();
        let g = x.transpose()?.matmul(&x)?;
        let k = self.n_k();
        Ok(g.data().chunks(k).map(|r| r.iter().map(|v| v.abs()).collect()).collect())
    }

    /// Mean absolute off-diagonal entry of `ΞᵀΞ`.
    pub fn mean_offdiag_similarity(&self) -> Result<f64> {
        let g = self.gram_abs()?;
        let k = g.len();
        let mut s = 0.0;
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    s += v;
                }
            }
        }
        Ok(s / (k * (k - 1)) as f64)
    }
}

/// Shapes and switches of a learner; holds no parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub mode: Mode,
    pub encoder: MlpSpec,
    pub head: MlpSpec,
    /// `N_k → hidden → N_k`, softplus output. Unused in plain mode.
    pub grouping: MlpSpec,
    pub n_k: usize,
    pub norm: NormKind,
}

impl Architecture {
    fn build(cfg: &ExperimentConfig, mode: Mode, encoder_widths: &[usize]) -> Result<Self> {
        let net = &cfg.net;
        let mut enc = vec![net.input_dim];
        enc.extend_from_slice(encoder_widths);
        let encoder = MlpSpec::new(enc, net.activation, net.encoder_output)?;
        let n_z = encoder.output_dim();
        let head_in = match mode {
            Mode::Plain => n_z,
            Mode::Causal => net.n_k,
        };
        let mut head_widths = vec![head_in];
        head_widths.extend_from_slice(&net.head_hidden);
        head_widths.push(net.output_dim);
        let head = MlpSpec::new(head_widths, net.activation, Activation::Identity)?;
        let gh = if net.grouping_hidden == 0 { 2 * net.n_k } else { net.grouping_hidden };
        let grouping = MlpSpec::new(vec![net.n_k, gh, net.n_k], Activation::Tanh, Activation::Softplus)?;
        if net.n_k < 2 {
            return Err(Error::Invalid(format!("need N_k >= 2, got {}", net.n_k)));
        }
        Ok(Architecture {
            mode,
            encoder,
            head,
            grouping,
            n_k: net.n_k,
            norm: net.norm,
        })
    }

    /// Architecture for `cfg.mode`. A plain-mode encoder is widened to match
    /// the causal bundle's parameter count when `net.match_params` is set.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let base = Self::build(cfg, cfg.mode, &cfg.net.encoder)?;
        if cfg.mode == Mode::Causal || !cfg.net.match_params {
            return Ok(base);
        }
        let target = Self::build(cfg, Mode::Causal, &cfg.net.encoder)?.num_params();
        let n_z = *cfg.net.encoder.last().unwrap();
        let mut best = base;
        let mut best_gap = best.num_params().abs_diff(target);
        for width in 1..=8 * n_z {
            let widths: Vec<usize> = cfg
                .net
                .encoder
                .iter()
                .map(|&w| ((w * width) as f64 / n_z as f64).round().max(1.0) as usize)
                .collect();
            let cand = Self::build(cfg, Mode::Plain, &widths)?;
            let gap = cand.num_params().abs_diff(target);
            if gap < best_gap {
                best_gap = gap;
                best = cand;
            }
        }
        Ok(best)
    }

    pub fn n_z(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Trainable scalar count, including factor matrix and grouping
    /// network in causal mode.
    pub fn num_params(&self) -> usize {
        let base = self.encoder.num_params() + self.head.num_params();
        match self.mode {
            Mode::Plain => base,
            Mode::Causal => base + self.grouping.num_params() + self.n_z() * self.n_k,
        }
    }

    pub fn encode(&self, theta: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(theta, ENCODER, x)
    }

    /// `g(x) Ξ`, one causal representation per row.
    pub fn causal_representation(&self, theta: &ParamSet, xi: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.require_causal()?;
        Ok(self.encode(theta, x)?.matmul(xi)?)
    }

    /// Positive grouping output `f_gr(Ξᵀ g(x_avg))`, before normalisation.
    pub fn grouping_raw(&self, theta: &ParamSet, xi: &Tensor, grouping: &ParamSet, x_avg: &Tensor) -> Result<Tensor> {
        self.require_causal()?;
        let x = x_avg.reshape(&[1, x_avg.numel()])?;
        let r = self.causal_representation(theta, xi, &x)?;
        let out = self.grouping.forward(grouping, GROUPING, &r)?;
        let out = out.reshape(&[self.n_k])?;
        if !out.all_finite() {
            return Err(Error::Invalid("non-finite grouping output".into()));
        }
        Ok(out)
    }

    /// Per-factor probabilities for one task.
    pub fn grouping_weights(&self, theta: &ParamSet, xi: &Tensor, grouping: &ParamSet, x_avg: &Tensor) -> Result<Tensor> {
        let raw = self.grouping_raw(theta, xi, grouping, x_avg)?;
        self.norm.apply(&raw)
    }

    /// Plain: `h(g(x))`. Causal: `h(w ⊙ Ξᵀ g(x))`.
    pub fn predict(&self, theta: &ParamSet, xi: Option<&Tensor>, weights: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
        let z = match (self.mode, xi, weights) {
            (Mode::Plain, None, None) => self.encode(theta, x)?,
            (Mode::Causal, Some(xi), Some(w)) => {
                if w.shape() != [self.n_k] {
                    return Err(Error::Invalid(format!(
                        "weights must have shape [{}], got {:?}",
                        self.n_k,
                        w.shape()
                    )));
                }
                self.causal_representation(theta, xi, x)?.mul_row(w)?
            }
            (mode, xi, w) => {
                return Err(Error::Invalid(format!(
                    "{mode:?} mode prediction got factor matrix: {}, weights: {}",
                    xi.is_some(),
                    w.is_some()
                )))
            }
        };
        self.head.forward(theta, HEAD, &z)
    }

    /// Prediction loss of one task split: MSE for regression, negative
    /// log-likelihood for classification. In causal mode the grouping
    /// weights are recomputed from `(theta, xi, grouping)`.
    pub fn split_loss(&self, theta: &ParamSet, xi: Option<&Tensor>, grouping: &ParamSet, task: &Task, split: SplitTag) -> Result<Tensor> {
        let out = self.split_forward(theta, xi, grouping, task, split)?;
        target_loss(&out, &task.split(split).y)
    }

    /// Raw outputs on one split (logits or regression values).
    pub fn split_forward(&self, theta: &ParamSet, xi: Option<&Tensor>, grouping: &ParamSet, task: &Task, split: SplitTag) -> Result<Tensor> {
        let x = &task.split(split).x;
        match self.mode {
            Mode::Plain => self.predict(theta, None, None, x),
            Mode::Causal => {
                let xi = xi.ok_or_else(|| Error::Invalid("causal mode needs a factor matrix".into()))?;
                let w = self.grouping_weights(theta, xi, grouping, &task_average(task)?)?;
                self.predict(theta, Some(xi), Some(&w), x)
            }
        }
    }

    fn require_causal(&self) -> Result<()> {
        match self.mode {
            Mode::Causal => Ok(()),
            Mode::Plain => Err(Error::Invalid("operation requires a causal-mode bundle".into())),
        }
    }
}

pub fn target_loss(out: &Tensor, y: &Targets) -> Result<Tensor> {
    Ok(match y {
        Targets::Real(t) => mse_loss(out, t)?,
        Targets::Classes(c) => nll_loss(out, c)?,
    })
}

/// MSE for regression, accuracy for classification.
pub fn score(out: &Tensor, y: &Targets) -> Result<f64> {
    match y {
        Targets::Real(t) => Ok(mse_loss(&out.detach(), t)?.item()),
        Targets::Classes(c) => {
            let k = out.shape()[1];
            let hits = out
                .data()
                .chunks(k)
                .zip(c)
                .filter(|(row, &label)| {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                    best == label
                })
                .count();
            Ok(hits as f64 / c.len() as f64)
        }
    }
}

/// Coordinate-wise mean over all support and query inputs.
pub fn task_average(task: &Task) -> Result<Tensor> {
    let (s, q) = (&task.support.x, &task.query.x);
    let d = s.shape()[1];
    let n = s.shape()[0] + q.shape()[0];
    if n == 0 {
        return Err(Error::Task("empty task".into()));
    }
    let mut acc = vec![0.0; d];
    for row in s.data().chunks(d).chain(q.data().chunks(d)) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(Tensor::vector(acc.into_iter().map(|v| v / n as f64).collect()))
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: Architecture,
    /// Encoder and head parameters (`g.*`, `h.*`).
    pub theta: ParamSet,
    /// Grouping network parameters (`gr.*`); empty in plain mode.
    pub grouping: ParamSet,
    /// Present exactly in causal mode.
    pub xi: Option<FactorMatrix>,
}

impl ModelBundle {
    /// Deterministic initialisation from `(cfg, seed)` on the init stream.
    pub fn init(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::from_config(cfg)?;
        Self::init_with(arch, seed)
    }

    pub fn init_with(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let theta = arch
            .encoder
            .init(ENCODER, &mut rng)?
            .merged(&arch.head.init(HEAD, &mut rng)?)?;
        let (grouping, xi) = match arch.mode {
            Mode::Plain => (ParamSet::new(), None),
            Mode::Causal => {
                let gr = arch.grouping.init(GROUPING, &mut rng)?;
                let xi = FactorMatrix::random(arch.n_z(), arch.n_k, &mut rng)?;
                (gr, Some(xi))
            }
        };
        let bundle = ModelBundle {
            arch,
            theta,
            grouping,
            xi,
        };
        bundle.check()?;
        Ok(bundle)
    }

    /// Verifies widths against the mode invariants.
    pub fn check(&self) -> Result<()> {
        let a = &self.arch;
        match (a.mode, &self.xi) {
            (Mode::Plain, None) => {
                if a.head.input_dim() != a.n_z() {
                    return Err(Error::Invalid("plain head input must equal N_z".into()));
                }
            }
            (Mode::Causal, Some(xi)) => {
                if a.head.input_dim() != a.n_k || xi.n_k() != a.n_k || xi.n_z() != a.n_z() {
                    return Err(Error::Invalid(format!(
                        "causal widths inconsistent: head input {}, Ξ {:?}, N_z {}, N_k {}",
                        a.head.input_dim(),
                        xi.tensor().shape(),
                        a.n_z(),
                        a.n_k
                    )));
                }
                if a.grouping.input_dim() != a.n_k || a.grouping.output_dim() != a.n_k {
                    return Err(Error::Invalid("grouping network must map N_k to N_k".into()));
                }
            }
            (mode, xi) => {
                return Err(Error::Invalid(format!(
                    "{mode:?} bundle with factor matrix present: {}",
                    xi.is_some()
                )))
            }
        }
        Ok(())
    }

    pub fn xi_tensor(&self) -> Option<&Tensor> {
        self.xi.as_ref().map(FactorMatrix::tensor)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.arch.encode(&self.theta, x)
    }

    pub fn causal_representation(&self, x: &Tensor) -> Result<Tensor> {
        let xi = self.xi_tensor().ok_or_else(|| Error::Invalid("plain-mode bundle has no factor matrix".into()))?;
        self.arch.causal_representation(&self.theta, xi, x)
    }

    pub fn grouping_weights(&self, x_avg: &Tensor) -> Result<Tensor> {
        let xi = self.xi_tensor().ok_or_else(|| Error::Invalid("plain-mode bundle has no grouping network".into()))?;
        self.arch.grouping_weights(&self.theta, xi, &self.grouping, x_avg)
    }

    pub fn predict(&self, x: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
        self.arch.predict(&self.theta, self.xi_tensor(), weights, x)
    }

    /// Every parameter under its stored name (`xi` for the factor matrix).
    pub fn all_params(&self) -> ParamSet {
        let mut p = self.theta.merged(&self.grouping).expect("disjoint prefixes");
        if let Some(xi) = &self.xi {
            p.insert("xi", xi.tensor().clone()).expect("unique name");
        }
        p
    }

    /// Rebuilds a bundle from a flat parameter set produced by [`Self::all_params`].
    pub fn from_params(arch: Architecture, params: &ParamSet) -> Result<Self> {
        let mut theta = ParamSet::new();
        let mut grouping = ParamSet::new();
        let mut xi = None;
        for (name, t) in params.iter() {
            if name == "xi" {
                xi = Some(FactorMatrix::new(t.detach())?);
            } else if name.starts_with(&format!("{GROUPING}.")) {
                grouping.insert(name, t.detach())?;
            } else if name.starts_with(&format!("{ENCODER}.")) || name.starts_with(&format!("{HEAD}.")) {
                theta.insert(name, t.detach())?;
            } else {
                return Err(Error::Invalid(format!("unexpected parameter `{name}`")));
            }
        }
        let bundle = ModelBundle {
            arch,
            theta,
            grouping,
            xi,
        };
        bundle.check()?;
        let expected = ModelBundle::init_with(bundle.arch.clone(), 0)?;
        for (name, t) in expected.all_params().iter() {
            match bundle.all_params().get(name) {
                Some(have) if have.shape() == t.shape() => {}
                _ => return Err(Error::Invalid(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(bundle)
    }

    pub fn value_eq(&self, other: &ModelBundle) -> bool {
        self.arch == other.arch && self.all_params().value_eq(&other.all_params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;

    fn causal_cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelBundle::init(&causal_cfg(), 3).unwrap();
        let b = ModelBundle::init(&causal_cfg(), 3).unwrap();
        let c = ModelBundle::init(&causal_cfg(), 4).unwrap();
        assert!(a.value_eq(&b));
        assert!(!a.value_eq(&c));
    }

    #[test]
    fn plain_bundle_matches_causal_param_count() {
        let causal = Architecture::from_config(&causal_cfg()).unwrap();
        let plain = Architecture::from_config(&ExperimentConfig {
            mode: Mode::Plain,
            ..causal_cfg()
        })
        .unwrap();
        let (p, c) = (plain.num_params() as f64, causal.num_params() as f64);
        assert!((p - c).abs() / c < 0.1, "plain {p} vs causal {c}");
        assert_eq!(plain.head.input_dim(), plain.n_z());
    }

    #[test]
    fn encode_with_zero_weights_gives_bias() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Tanh, Activation::Identity).unwrap();
        let mut p = ParamSet::new();
        p.insert("g.w0", Tensor::zeros(&[3, 2])).unwrap();
        p.insert("g.b0", Tensor::full(&[2], 0.7)).unwrap();
        let out = spec.forward(&p, "g", &Tensor::ones(&[5, 3])).unwrap();
        assert_eq!(out.shape(), &[5, 2]);
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let b = ModelBundle::init(&causal_cfg(), 0).unwrap();
        assert!(b.encode(&Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn causal_ops_reject_plain_bundle() {
        let b = ModelBundle::init(
            &ExperimentConfig {
                mode: Mode::Plain,
                ..causal_cfg()
            },
            0,
        )
        .unwrap();
        let x = Tensor::zeros(&[2, 1]);
        assert!(b.causal_representation(&x).is_err());
        assert!(b.grouping_weights(&Tensor::zeros(&[1])).is_err());
        assert!(b.predict(&x, Some(&Tensor::ones(&[12]))).is_err());
    }

    #[test]
    fn predict_rejects_missing_weights_in_causal_mode() {
        let b = ModelBundle::init(&causal_cfg(), 0).unwrap();
        assert!(b.predict(&Tensor::zeros(&[2, 1]), None).is_err());
        assert!(b.predict(&Tensor::zeros(&[2, 1]), Some(&Tensor::ones(&[3]))).is_err());
    }

    #[test]
    fn norm_variants() {
        let v = Tensor::vector(vec![1.0, 3.0]);
        assert_eq!(NormKind::Sum.apply(&v).unwrap().data(), &[0.25, 0.75]);
        assert_eq!(NormKind::Max.apply(&v).unwrap().data(), &[1.0 / 3.0, 1.0]);
    }

    #[test]
    fn mlp_spec_rejects_degenerate_widths() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, Activation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0], Activation::Relu, Activation::Identity).is_err());
    }

    #[test]
    fn from_params_round_trip() {
        let b = ModelBundle::init(&causal_cfg(), 9).unwrap();
        let back = ModelBundle::from_params(b.arch.clone(), &b.all_params()).unwrap();
        assert!(back.value_eq(&b));
        let mut missing = b.all_params();
        missing = missing.map_tensors(|t| t.clone());
        let mut partial = ParamSet::new();
        for (k, v) in missing.iter().skip(1) {
            partial.insert(k, v.clone()).unwrap();
        }
        assert!(ModelBundle::from_params(b.arch.clone(), &partial).is_err());
    }

    #[test]
    fn classification_score_is_accuracy() {
        let logits = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0], vec![1.0, 0.0]]).unwrap();
        let acc = score(&logits, &Targets::Classes(vec![0, 1, 1])).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn net_config_used_for_widths() {
        let cfg = ExperimentConfig {
            net: NetConfig {
                encoder: vec![8, 6],
                n_k: 4,
                ..NetConfig::default()
            },
            ..causal_cfg()
        };
        let b = ModelBundle::init(&cfg, 0).unwrap();
        assert_eq!(b.arch.n_z(), 6);
        assert_eq!(b.xi.as_ref().unwrap().tensor().shape(), &[6, 4]);
        assert_eq!(b.arch.grouping.widths, vec![4, 8, 4]);
    }
}
