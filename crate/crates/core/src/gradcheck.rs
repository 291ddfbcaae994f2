//! Autodiff versus central finite differences on randomly drawn small
//! networks, for the plain prediction loss and the full causal objective.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_grad, grad, max_relative_error, ParamSet, Tensor};
use crate::causal::causal_support_loss;
use crate::config::{CausalHyper, Mode};
use crate::error::{Error, Result};
use crate::models::{target_loss, Activation, Architecture, MlpSpec, ModelBundle, NormKind};
use crate::rng::{self, Rng};
use crate::tasks::{Split, SplitTag, Targets, Task, TaskKind};
use crate::Graph;

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
/// Denominator floor for the relative error; gradients smaller than this
/// are compared absolutely.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub net: usize,
    pub path: String,
    pub kind: TaskKind,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradcheckCase>,
    pub passed: usize,
    pub total: usize,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.total
    }
}

fn smooth_activation(rng: &mut Rng) -> Activation {
    [Activation::Tanh, Activation::Softplus, Activation::Identity][rng.random_range(0..3)]
}

fn random_arch(rng: &mut Rng, mode: Mode, kind: TaskKind) -> Result<Architecture> {
    let input = rng.random_range(1..=3);
    let hidden = rng.random_range(2..=5);
    let n_z = rng.random_range(2..=4);
    let n_k = rng.random_range(2..=4);
    let output = match kind {
        TaskKind::Regression => 1,
        TaskKind::Classification => rng.random_range(2..=3),
    };
    let act = smooth_activation(rng);
    let encoder = MlpSpec::new(vec![input, hidden, n_z], act, Activation::Tanh)?;
    let head_in = if mode == Mode::Causal { n_k } else { n_z };
    let head = MlpSpec::new(vec![head_in, output], act, Activation::Identity)?;
    let grouping = MlpSpec::new(vec![n_k, 2 * n_k, n_k], Activation::Tanh, Activation::Softplus)?;
    Ok(Architecture {
        mode,
        encoder,
        head,
        grouping,
        n_k,
        norm: NormKind::Sum,
    })
}

fn random_task(rng: &mut Rng, input: usize, output: usize, kind: TaskKind) -> Result<Task> {
    let mut split = |n: usize| -> Result<Split> {
        let x = Tensor::new(&[n, input], (0..n * input).map(|_| rng.random_range(-2.0..2.0)).collect())?;
        let y = match kind {
            TaskKind::Regression => Targets::Real(Tensor::new(&[n, 1], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?),
            TaskKind::Classification => Targets::Classes((0..n).map(|_| rng.random_range(0..output)).collect()),
        };
        Split::new(x, y)
    };
    let support = split(4)?;
    let query = split(3)?;
    Task::new(support, query, kind)
}

fn check(loss: impl Fn(&ParamSet) -> Result<Tensor>, params: &ParamSet) -> Result<f64> {
    let graph = Graph::new();
    let tracked = params.track(&graph);
    let analytic = grad(&loss(&tracked)?, &tracked, false)?;
    let numeric = finite_diff_grad(|p: &ParamSet| -> Result<f64> { Ok(loss(p)?.item()) }, params, STEP)?;
    Ok(max_relative_error(&analytic, &numeric, FLOOR))
}

/// Checks `nets` random networks on both loss paths.
pub fn gradcheck_suite(nets: usize, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    if nets == 0 {
        return Err(Error::Invalid("gradcheck needs at least one network".into()));
    }
    let mut cases = Vec::with_capacity(2 * nets);
    for net in 0..nets {
        let mut g = rng::stream(seed, rng::substream(rng::STREAM_INIT, net as u64));
        let kind = if net % 2 == 0 { TaskKind::Regression } else { TaskKind::Classification };

        let arch = random_arch(&mut g, Mode::Plain, kind)?;
        let bundle = ModelBundle::init_with(arch.clone(), g.random())?;
        let task = random_task(&mut g, arch.encoder.input_dim(), arch.head.output_dim(), kind)?;
        let err = check(
            |p| {
                let out = arch.predict(p, None, None, &task.query.x)?;
                target_loss(&out, &task.query.y)
            },
            &bundle.theta,
        )?;
        cases.push(GradcheckCase {
            net,
            path: "plain".into(),
            kind,
            params: bundle.theta.numel(),
            max_rel_error: err,
            passed: err <= tolerance,
        });

        let arch = random_arch(&mut g, Mode::Causal, kind)?;
        let bundle = ModelBundle::init_with(arch.clone(), g.random())?;
        let batch = vec![
            random_task(&mut g, arch.encoder.input_dim(), arch.head.output_dim(), kind)?,
            random_task(&mut g, arch.encoder.input_dim(), arch.head.output_dim(), kind)?,
        ];
        let hyper = CausalHyper::default();
        let all = bundle.all_params();
        let err = check(
            |p| {
                let mut theta = ParamSet::new();
                let mut grouping = ParamSet::new();
                for (name, t) in p.iter() {
                    if name.starts_with("gr.") {
                        grouping.insert(name, t.clone())?;
                    } else if name != "xi" {
                        theta.insert(name, t.clone())?;
                    }
                }
                let xi = p.expect("xi")?;
                Ok(causal_support_loss(&arch, &theta, xi, &grouping, &batch, SplitTag::Query, &hyper)?.0)
            },
            &all,
        )?;
        cases.push(GradcheckCase {
            net,
            path: "causal".into(),
            kind,
            params: all.numel(),
            max_rel_error: err,
            passed: err <= tolerance,
        });
    }
    let passed = cases.iter().filter(|c| c.passed).count();
    Ok(GradcheckReport {
        tolerance,
        total: cases.len(),
        passed,
        cases,
    })
}
