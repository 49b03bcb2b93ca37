//! Central finite-difference gradient checking against a loss function that
//! also reports its analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::store::{Grads, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per parameter tensor: ‖analytic − fd‖₂ over the larger
    /// of the two gradient norms.
    pub per_param: BTreeMap<String, f32>,
    pub max_rel_err: f32,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f32) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {} >= {tol}; per-param: {:?}",
            self.max_rel_err,
            self.per_param
        );
    }
}

/// Compares the analytic gradients of `loss_fn` to central finite differences
/// over every parameter element.
///
/// The loss must be deterministic — it is evaluated twice at the base point
/// and any disagreement is an error. Stop-gradient or straight-through parts
/// of a model must be frozen inside `loss_fn` (plan reuse), otherwise the
/// finite differences measure a different function than the backward pass.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Grads)>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let (base_loss, analytic) = loss_fn(params)?;
    let (second_loss, _) = loss_fn(params)?;
    if base_loss != second_loss {
        return Err(Error::data(format!(
            "loss_fn is not deterministic: {base_loss} vs {second_loss}"
        )));
    }
    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f32;
    for (name, value) in params.iter() {
        let a = analytic.get(name);
        if let Some(a) = a {
            if a.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "analytic grad for '{name}' has shape {:?}, parameter is {:?}",
                    a.shape(),
                    value.shape()
                )));
            }
        }
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        for e in 0..value.len() {
            let mut plus = params.clone();
            plus.get_mut(name)?.value.data_mut()[e] += eps;
            let mut minus = params.clone();
            minus.get_mut(name)?.value.data_mut()[e] -= eps;
            // Divide by the step that survived f32 rounding, not the nominal
            // one; at |θ| >> eps the difference dominates the error budget.
            let realized = plus.get(name)?.data()[e] as f64 - minus.get(name)?.data()[e] as f64;
            if realized == 0.0 {
                return Err(Error::config(format!(
                    "eps {eps} underflows parameter '{name}' at element {e}"
                )));
            }
            let fd = (loss_fn(&plus)?.0 - loss_fn(&minus)?.0) / realized;
            let an = a.map_or(0.0, |t| t.data()[e]) as f64;
            diff_sq += (an - fd) * (an - fd);
            a_sq += an * an;
            n_sq += fd * fd;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt());
        let rel = if denom < 1e-12 {
            0.0
        } else {
            (diff_sq.sqrt() / denom) as f32
        };
        per_param.insert(name.to_string(), rel);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
    })
}
