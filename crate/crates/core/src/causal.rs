//! Disentangling regularisers and the two-level update of the factor
//! matrix and grouping network.

use crate::autodiff::{grad, ParamSet, Tensor, TensorError};
use crate::config::{CausalHyper, EntropyOver, SimilarityForm};
use crate::error::{Error, Result};
use crate::models::{task_average, Architecture, FactorMatrix, ModelBundle};
use crate::tasks::{SplitTag, Task};
use crate::Graph;

const LOG_FLOOR: f64 = 1e-12;

/// Similarity penalty over distinct factor columns: the sum over `i < j`
/// of `(Ξ_iᵀ Ξ_j)²`, or of the raw inner products for [`SimilarityForm::Signed`].
pub fn loss_dm_xi(xi: &Tensor, form: SimilarityForm) -> Result<Tensor> {
    let shape = xi.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::Invalid(format!("factor matrix must be [N_z, N_k >= 2], got {shape:?}")));
    }
    let k = shape[1];
    let gram = xi.transpose()?.matmul(xi)?;
    let mut upper = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            upper[i * k + j] = 1.0;
        }
    }
    let off = gram.mul(&Tensor::new(&[k, k], upper)?)?;
    Ok(match form {
        SimilarityForm::Squared => off.square()?.sum_all()?,
        SimilarityForm::Signed => off.sum_all()?,
    })
}

/// Shannon entropy `-Σ p log p` with `0 log 0 = 0`.
pub fn entropy(p: &Tensor) -> Result<Tensor> {
    Ok(p.mul(&p.clamp_min(LOG_FLOOR)?.log()?)?.sum_all()?.neg()?)
}

/// Sparsity-plus-diversity penalty on per-task grouping outputs (before
/// normalisation): total L1 mass minus the entropy of the usage
/// distribution.
pub fn loss_dm_fgr(outputs: &[Tensor], over: EntropyOver) -> Result<Tensor> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Invalid("grouping penalty needs at least one task".into()))?;
    let k = first.numel();
    let mut rows = Vec::with_capacity(outputs.len());
    for o in outputs {
        if o.numel() != k {
            return Err(TensorError::ShapeMismatch {
                op: "loss_dm_fgr",
                lhs: first.shape().to_vec(),
                rhs: o.shape().to_vec(),
            }
            .into());
        }
        if let Some(&bad) = o.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Invalid(format!("grouping outputs must be positive, found {bad}")));
        }
        rows.push(o.reshape(&[1, k])?);
    }
    let stacked = Tensor::concat_rows(&rows)?;
    let mass = stacked.sum_all()?;
    let axis = match over {
        EntropyOver::Factors => 0,
        EntropyOver::Tasks => 1,
    };
    let usage = stacked.sum_axes(&[axis])?.div(&mass)?;
    Ok(mass.sub(&entropy(&usage)?)?)
}

/// Values of the two regularisers, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DmTerms {
    pub xi: f64,
    pub fgr: f64,
}

/// `λ₁ · loss_dm_xi + λ₂ · loss_dm_fgr`. A term with zero weight is
/// skipped entirely, which keeps its gradient path off the graph.
pub fn loss_dm_total(xi: &Tensor, outputs: &[Tensor], hyper: &CausalHyper) -> Result<(Tensor, DmTerms)> {
    let mut total = Tensor::scalar(0.0);
    let mut terms = DmTerms::default();
    if hyper.lambda1 != 0.0 {
        let l = loss_dm_xi(xi, hyper.similarity)?;
        terms.xi = l.item();
        total = total.add(&l.scale(hyper.lambda1)?)?;
    }
    if hyper.lambda2 != 0.0 {
        let l = loss_dm_fgr(outputs, hyper.entropy_over)?;
        terms.fgr = l.item();
        total = total.add(&l.scale(hyper.lambda2)?)?;
    }
    Ok((total, terms))
}

/// Mean per-task prediction loss on `split` with grouping-weighted causal
/// representations, plus the disentangling loss.
pub fn causal_support_loss(
    arch: &Architecture,
    theta: &ParamSet,
    xi: &Tensor,
    grouping: &ParamSet,
    batch: &[Task],
    split: SplitTag,
    hyper: &CausalHyper,
) -> Result<(Tensor, DmTerms)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty task batch".into()));
    }
    let mut pred = Tensor::scalar(0.0);
    let mut raws = Vec::with_capacity(batch.len());
    for task in batch {
        let raw = arch.grouping_raw(theta, xi, grouping, &task_average(task)?)?;
        let w = arch.norm.apply(&raw)?;
        let out = arch.predict(theta, Some(xi), Some(&w), &task.split(split).x)?;
        pred = pred.add(&crate::models::target_loss(&out, &task.split(split).y)?)?;
        raws.push(raw);
    }
    let pred = pred.scale(1.0 / batch.len() as f64)?;
    let (dm, terms) = loss_dm_total(xi, &raws, hyper)?;
    Ok((pred.add(&dm)?, terms))
}

fn xi_set(xi: &Tensor) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("xi", xi.clone()).expect("single entry");
    p
}

/// One support-split gradient step on `(Ξ, f_gr)`.
///
/// With `create_graph` the returned tensors stay differentiable with
/// respect to the (tracked) inputs. Inputs must be tracked on one graph
/// unless both rates are zero.
pub fn first_level_step(
    arch: &Architecture,
    theta: &ParamSet,
    xi: &Tensor,
    grouping: &ParamSet,
    batch: &[Task],
    hyper: &CausalHyper,
    create_graph: bool,
) -> Result<(Tensor, ParamSet)> {
    if hyper.alpha1 == 0.0 && hyper.alpha2 == 0.0 {
        return Ok((xi.clone(), grouping.clone()));
    }
    let (loss, _) = causal_support_loss(arch, theta, xi, grouping, batch, SplitTag::Support, hyper)?;
    let wrt = xi_set(xi).merged(grouping)?;
    let g = grad(&loss, &wrt, create_graph)?;
    let g = if create_graph { g } else { g.detach() };
    let g_xi = g.expect("xi")?;
    let xi_next = if hyper.alpha1 == 0.0 { xi.clone() } else { xi.sub(&g_xi.scale(hyper.alpha1)?)? };
    let gr_next = if hyper.alpha2 == 0.0 {
        grouping.clone()
    } else {
        crate::autodiff::sgd_step(grouping, &g, hyper.alpha2, create_graph)?
    };
    Ok((xi_next, gr_next))
}

/// First-level update of a bundle's `(Ξ, f_gr)` on support splits, returned
/// as plain values. The bundle is left untouched.
pub fn causal_first_level(bundle: &ModelBundle, batch: &[Task], hyper: &CausalHyper) -> Result<(FactorMatrix, ParamSet)> {
    let xi = bundle
        .xi_tensor()
        .ok_or_else(|| Error::Invalid("causal_first_level needs a causal-mode bundle".into()))?;
    let graph = Graph::new();
    let xi_t = graph.leaf(xi);
    let gr_t = bundle.grouping.track(&graph);
    let theta = bundle.theta.detach();
    let (xi_next, gr_next) = first_level_step(&bundle.arch, &theta, &xi_t, &gr_t, batch, hyper, false)?;
    Ok((FactorMatrix::new(xi_next.detach())?, gr_next.detach()))
}

/// Second-level update: evaluate the query-split objective at the
/// first-level result, differentiate back through that step to the
/// original `(Ξ, f_gr)`, and descend with rates `(α₃, α₄)`. Encoder and
/// head are constants throughout and come back bit-identical.
///
/// The returned terms are the regulariser values at the pre-update point.
pub fn causal_second_level(bundle: &ModelBundle, batch: &[Task], hyper: &CausalHyper) -> Result<(ModelBundle, DmTerms)> {
    let xi = bundle
        .xi_tensor()
        .ok_or_else(|| Error::Invalid("causal_second_level needs a causal-mode bundle".into()))?;
    let graph = Graph::new();
    let xi_t = graph.leaf(xi);
    let gr_t = bundle.grouping.track(&graph);
    let theta = bundle.theta.detach();
    let arch = &bundle.arch;

    let (_, terms) = {
        let raws = batch
            .iter()
            .map(|t| arch.grouping_raw(&theta, &xi.detach(), &bundle.grouping.detach(), &task_average(t)?))
            .collect::<Result<Vec<_>>>()?;
        loss_dm_total(&xi.detach(), &raws, hyper)?
    };

    if hyper.alpha3 == 0.0 && hyper.alpha4 == 0.0 {
        return Ok((bundle.clone(), terms));
    }
    let (xi_1, gr_1) = first_level_step(arch, &theta, &xi_t, &gr_t, batch, hyper, true)?;
    let (loss, _) = causal_support_loss(arch, &theta, &xi_1, &gr_1, batch, SplitTag::Query, hyper)?;
    let wrt = xi_set(&xi_t).merged(&gr_t)?;
    let g = grad(&loss, &wrt, false)?;

    let mut next = bundle.clone();
    if hyper.alpha3 != 0.0 {
        let step = xi.sub(&g.expect("xi")?.scale(hyper.alpha3)?)?;
        next.xi = Some(FactorMatrix::new(step)?);
    }
    if hyper.alpha4 != 0.0 {
        next.grouping = crate::autodiff::sgd_step(&bundle.grouping, &g, hyper.alpha4, false)?;
    }
    Ok((next, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_columns_have_zero_similarity() {
        let xi = Tensor::eye(3);
        assert_eq!(loss_dm_xi(&xi, SimilarityForm::Squared).unwrap().item(), 0.0);
    }

    #[test]
    fn identical_unit_columns_score_one() {
        let s = 0.5f64.sqrt();
        let xi = Tensor::from_rows(&[vec![s, s], vec![s, s]]).unwrap();
        let l = loss_dm_xi(&xi, SimilarityForm::Squared).unwrap().item();
        assert!((l - 1.0).abs() < 1e-15);
        let signed = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(loss_dm_xi(&signed, SimilarityForm::Signed).unwrap().item(), -1.0);
    }

    #[test]
    fn grouping_penalty_hand_case() {
        let tiny = 1e-12;
        let outs = vec![Tensor::vector(vec![1.0, tiny]), Tensor::vector(vec![tiny, 1.0])];
        let l = loss_dm_fgr(&outs, EntropyOver::Factors).unwrap().item();
        assert!((l - (2.0 - std::f64::consts::LN_2)).abs() < 1e-9, "{l}");
    }

    #[test]
    fn grouping_penalty_degenerate_mass() {
        let tiny = 1e-300;
        let outs = vec![Tensor::vector(vec![2.0, tiny, tiny]), Tensor::vector(vec![3.0, tiny, tiny])];
        let l = loss_dm_fgr(&outs, EntropyOver::Factors).unwrap().item();
        assert!((l - 5.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn grouping_penalty_rejects_non_positive() {
        let outs = vec![Tensor::vector(vec![1.0, 0.0])];
        assert!(loss_dm_fgr(&outs, EntropyOver::Factors).is_err());
        assert!(loss_dm_fgr(&[], EntropyOver::Factors).is_err());
    }

    #[test]
    fn entropy_is_maximal_for_equal_mass() {
        let k = 5;
        let uniform = entropy(&Tensor::full(&[k], 1.0 / k as f64)).unwrap().item();
        assert!((uniform - (k as f64).ln()).abs() < 1e-12);
        let skewed = entropy(&Tensor::vector(vec![0.3, 0.2, 0.2, 0.2, 0.1])).unwrap().item();
        assert!(skewed < uniform);
        assert_eq!(entropy(&Tensor::vector(vec![1.0, 0.0])).unwrap().item(), 0.0);
    }

    #[test]
    fn total_weights() {
        let s = 0.5f64.sqrt();
        let xi = Tensor::from_rows(&[vec![s, s], vec![s, s]]).unwrap();
        let outs = vec![Tensor::vector(vec![1.0, 1.0])];
        let zero = CausalHyper {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        assert_eq!(loss_dm_total(&xi, &outs, &zero).unwrap().0.item(), 0.0);
        let h = CausalHyper::default();
        let (t, terms) = loss_dm_total(&xi, &outs, &h).unwrap();
        assert!((t.item() - (0.4 * terms.xi + 0.2 * terms.fgr)).abs() < 1e-14);
    }
}
