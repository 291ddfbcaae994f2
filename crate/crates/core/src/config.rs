//! Experiment configuration.
//!
//! A config is one TOML document. Every key has a default, so an empty
//! document is a valid config; unknown keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lab::{SweepConfig, Theorem1Config};
use crate::models::{Activation, NormKind};
use crate::tasks::{FactorWorldSpec, SinusoidSpec, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `h(g(x))`
    Plain,
    /// `h(w ⊙ Ξᵀ g(x))` with learned factor matrix and grouping weights.
    Causal,
}

/// Which disentangling regularisers are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    Xi,
    Fgr,
    Both,
}

impl Ablation {
    pub fn xi_enabled(self) -> bool {
        matches!(self, Ablation::None | Ablation::Fgr)
    }

    pub fn fgr_enabled(self) -> bool {
        matches!(self, Ablation::None | Ablation::Xi)
    }
}

/// Pairwise factor-similarity penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityForm {
    /// Sum of squared inner products of distinct columns.
    Squared,
    /// Sum of raw inner products.
    Signed,
}

/// Distribution the grouping entropy is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyOver {
    Factors,
    Tasks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

/// Loss weights and rates of the disentangling and causal modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub similarity: SimilarityForm,
    pub entropy_over: EntropyOver,
}

impl Default for CausalHyper {
    fn default() -> Self {
        CausalHyper {
            lambda1: 0.4,
            lambda2: 0.2,
            alpha1: 1e-3,
            alpha2: 1e-3,
            alpha3: 1e-3,
            alpha4: 1e-3,
            similarity: SimilarityForm::Squared,
            entropy_over: EntropyOver::Factors,
        }
    }
}

impl CausalHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("causal.{name}: must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Same hyperparameters with every rate zeroed.
    pub fn frozen(&self) -> Self {
        CausalHyper {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha4: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Encoder layer widths after the input; the last one is `N_z`.
    pub encoder: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub encoder_output: Activation,
    /// Number of candidate factors `N_k`.
    pub n_k: usize,
    /// Hidden width of the grouping network; 0 means `2 * n_k`.
    pub grouping_hidden: usize,
    /// Widen the plain-mode encoder until its parameter count matches the
    /// causal-mode bundle of the same config.
    pub match_params: bool,
    pub norm: NormKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 1,
            encoder: vec![40, 40],
            head_hidden: Vec::new(),
            output_dim: 1,
            activation: Activation::Relu,
            encoder_output: Activation::Relu,
            n_k: 12,
            grouping_hidden: 0,
            match_params: true,
            norm: NormKind::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub task_kind: TaskKind,
    pub seed: u64,
    pub iterations: usize,
    /// Inner (adaptation) learning rate.
    pub inner_lr: f64,
    /// Outer (meta) learning rate.
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Tasks per meta-batch.
    pub batch_size: usize,
    /// Stop gradients through the inner update.
    pub first_order: bool,
    /// Run the factor-matrix step on the batch used for the parameter step.
    pub shared_batch: bool,
    pub outer_optimizer: OuterOptimizer,
    pub ablate: Ablation,
    /// Tasks drawn for the post-training evaluation.
    pub eval_tasks: usize,
    /// Fill the metrics `seconds` column with wall-clock time. Off by
    /// default so metrics files are reproducible byte for byte.
    pub record_time: bool,
    pub net: NetConfig,
    pub causal: CausalHyper,
    pub sinusoid: SinusoidSpec,
    pub world: FactorWorldSpec,
    pub theorem1: Theorem1Config,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Causal,
            task_kind: TaskKind::Regression,
            seed: 0,
            iterations: 10_000,
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 1,
            batch_size: 4,
            first_order: false,
            shared_batch: true,
            outer_optimizer: OuterOptimizer::Sgd,
            ablate: Ablation::None,
            eval_tasks: 100,
            record_time: false,
            net: NetConfig::default(),
            causal: CausalHyper::default(),
            sinusoid: SinusoidSpec::default(),
            world: FactorWorldSpec::default(),
            theorem1: Theorem1Config::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: rates must be finite and >= 0, got {v}")))
            }
        };
        nonneg("inner_lr", self.inner_lr)?;
        nonneg("outer_lr", self.outer_lr)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations: budget must be >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps: must be >= 1".into()));
        }
        if self.eval_tasks == 0 {
            return Err(Error::Config("eval_tasks: must be >= 1".into()));
        }
        let net = &self.net;
        if net.input_dim == 0 || net.output_dim == 0 {
            return Err(Error::Config("net: input_dim and output_dim must be positive".into()));
        }
        if net.encoder.is_empty() || net.encoder.contains(&0) || net.head_hidden.contains(&0) {
            return Err(Error::Config("net: widths must be positive and the encoder needs a layer".into()));
        }
        if net.n_k < 2 {
            return Err(Error::Config(format!("net.n_k: need at least 2 factors, got {}", net.n_k)));
        }
        if self.task_kind == TaskKind::Classification && net.output_dim < 2 {
            return Err(Error::Config("net.output_dim: classification needs >= 2 classes".into()));
        }
        self.causal.validate()?;
        self.sinusoid.validate()?;
        if self.task_kind == TaskKind::Classification {
            self.world.validate()?;
            if net.input_dim != self.world.ambient_dim {
                return Err(Error::Config(format!(
                    "net.input_dim ({}) must equal world.ambient_dim ({})",
                    net.input_dim, self.world.ambient_dim
                )));
            }
        } else if net.input_dim != 1 {
            return Err(Error::Config("net.input_dim: sinusoid tasks have 1 input".into()));
        }
        self.theorem1.validate()?;
        self.sweep.validate()?;
        Ok(())
    }

    /// Regularisers after the ablation switch is applied.
    pub fn effective_causal(&self) -> CausalHyper {
        let mut h = self.causal.clone();
        if !self.ablate.xi_enabled() {
            h.lambda1 = 0.0;
        }
        if !self.ablate.fgr_enabled() {
            h.lambda2 = 0.0;
        }
        h
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML serialisation, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Defaults for the factor-world classification setting.
    pub fn classification_defaults() -> Self {
        let world = FactorWorldSpec::default();
        ExperimentConfig {
            task_kind: TaskKind::Classification,
            iterations: 2_000,
            inner_lr: 0.1,
            net: NetConfig {
                input_dim: world.ambient_dim,
                encoder: vec![32, 16],
                output_dim: 2,
                n_k: world.factors,
                encoder_output: Activation::Identity,
                ..NetConfig::default()
            },
            world,
            ..ExperimentConfig::default()
        }
    }
}

/// Parses and validates a TOML config document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &location(&e, text)))?;
    cfg.validate()?;
    Ok(cfg)
}

fn location(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
