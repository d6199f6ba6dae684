//! Central-difference verification of the reverse pass.
//!
//! The perturbed function values are f32 (same path the training loop
//! uses) but the difference quotient itself is formed in f64 against the
//! actually realized step `x_plus - x_minus`, which keeps the check sharp
//! even when `eps` sits close to the f32 rounding floor.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compare the analytic gradient of a scalar-valued builder `f` at `x`
/// against central differences with step `eps`, coordinate by coordinate.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad check step must be positive, got {eps}")));
    }
    let eval = |t: &Tensor| -> Result<f32> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let root = f(&mut g, v)?;
        if g.value(root).numel() != 1 {
            return Err(Error::Config("grad check target must be scalar".into()));
        }
        Ok(g.value(root).item())
    };

    // analytic pass
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let root = f(&mut g, v)?;
    let mut grads = g.backward(root)?;
    let analytic = grads
        .take(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: x.numel(),
    };
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let up = orig + eps;
        let down = orig - eps;
        xp.data_mut()[i] = up;
        xm.data_mut()[i] = down;
        let fp = eval(&xp)? as f64;
        let fm = eval(&xm)? as f64;
        xp.data_mut()[i] = orig;
        xm.data_mut()[i] = orig;

        let step = up as f64 - down as f64;
        if step == 0.0 {
            return Err(Error::Config(format!("step {eps} vanishes at coordinate {i} (value {orig})")));
        }
        let numeric = (fp - fm) / step;
        let a = analytic.data()[i] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
