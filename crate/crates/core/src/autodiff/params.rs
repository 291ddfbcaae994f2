use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::error::TensorError;
use super::tensor::{backward, Graph, Result, Tensor};

/// Ordered, uniquely named collection of tensors.
///
/// Iteration follows insertion order, which is fixed by the code that
/// builds the set and therefore stable across runs.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

/// Gradients share the parameter-set layout: one tensor per name.
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a named tensor; duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces the tensor stored under an existing name.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(TensorError::ShapeMismatch {
                op: "set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            }),
            None => Err(TensorError::Invalid(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Records every tensor as a fresh leaf on `graph`.
    pub fn track(&self, graph: &Graph) -> ParamSet {
        self.map_tensors(|t| graph.leaf(t))
    }

    pub fn detach(&self) -> ParamSet {
        self.map_tensors(Tensor::detach)
    }

    pub fn map_tensors(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Concatenates two sets with disjoint names.
    pub fn merged(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k, v.clone())?;
        }
        Ok(out)
    }

    /// Bitwise value equality, names and order included.
    pub fn value_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.value_eq(b))
    }

    /// SHA-256 over names, shapes and little-endian value bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient of a scalar `loss` with respect to every tensor in `params`.
///
/// Parameters must be recorded on the loss's graph; a recorded parameter the
/// loss does not depend on gets zeros. With `create_graph` the returned
/// gradients are themselves recorded, so they can be differentiated again.
pub fn grad(loss: &Tensor, params: &ParamSet, create_graph: bool) -> Result<Gradients> {
    let wrt: Vec<&Tensor> = params.tensors().collect();
    let sweep = backward(loss, &wrt, create_graph)?;
    let mut out = ParamSet::new();
    for ((name, _), g) in params.iter().zip(sweep.grads) {
        let g = g.ok_or_else(|| TensorError::Unreachable(name.to_string()))?;
        out.insert(name, g)?;
    }
    Ok(out)
}

/// Functional gradient step `p - lr * g` for every parameter.
///
/// With `create_graph` the step stays differentiable through the gradient
/// itself; without it the gradient is treated as a constant, which is the
/// first-order approximation.
pub fn sgd_step(params: &ParamSet, grads: &Gradients, lr: f64, create_graph: bool) -> Result<ParamSet> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(TensorError::Invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let g = if create_graph { g.clone() } else { g.detach() };
        let next = if lr == 0.0 { p.clone() } else { p.sub(&g.scale(lr)?)? };
        out.insert(name, next)?;
    }
    Ok(out)
}

/// Central-difference gradient estimate `(f(p+h) - f(p-h)) / 2h`, one
/// coordinate at a time. `f` receives untracked parameter values.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&ParamSet) -> std::result::Result<f64, E>,
    params: &ParamSet,
    h: f64,
) -> std::result::Result<Gradients, E>
where
    E: From<TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")).into());
    }
    let base = params.detach();
    let mut out = ParamSet::new();
    for (name, p) in base.iter() {
        let mut g = vec![0.0; p.numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut eval = |delta: f64| -> std::result::Result<f64, E> {
                let mut d = p.to_vec();
                d[i] += delta;
                let mut probe = base.clone();
                probe.set(name, Tensor::new(p.shape(), d)?)?;
                let v = f(&probe)?;
                if !v.is_finite() {
                    return Err(TensorError::NonFinite(format!("objective at `{name}`[{i}]")).into());
                }
                Ok(v)
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.insert(name, Tensor::new(p.shape(), g)?)?;
    }
    Ok(out)
}

/// Largest relative error between two gradient maps, using
/// `|a - b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            let denom = u.abs().max(v.abs()).max(floor);
            worst = worst.max((u - v).abs() / denom);
        }
    }
    worst
}
