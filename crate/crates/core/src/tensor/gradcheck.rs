//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{Bindings, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// A deterministic computation from parameters to a scalar loss.
pub trait GradFragment<S: Scalar> {
    fn params(&mut self) -> &mut ParamSet<S>;
    fn forward_loss(&mut self) -> Result<(Graph<S>, Var, Bindings)>;
}

/// Any closure over a parameter set can be checked directly.
pub struct FnFragment<S: Scalar, F> {
    pub params: ParamSet<S>,
    pub build: F,
}

impl<S, F> GradFragment<S> for FnFragment<S, F>
where
    S: Scalar,
    F: FnMut(&ParamSet<S>) -> Result<(Graph<S>, Var, Bindings)>,
{
    fn params(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    fn forward_loss(&mut self) -> Result<(Graph<S>, Var, Bindings)> {
        (self.build)(&self.params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per tensor, evenly strided. `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU, max-pool or clamp boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<S: Scalar>(frag: &mut impl GradFragment<S>) -> Result<(f64, u64)> {
    let (g, loss, _) = frag.forward_loss()?;
    let v = g
        .value(loss)
        .scalar_value()
        .ok_or_else(|| Error::structure("grad check loss is not a scalar"))?;
    Ok((v.as_f64(), g.kink_signature()))
}

pub fn grad_check<S: Scalar>(frag: &mut impl GradFragment<S>, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (mut g, loss, bindings) = frag.forward_loss()?;
    g.backward(loss)?;
    let base_sig = g.kink_signature();
    let analytic: Vec<Vec<f64>> = frag
        .params()
        .ids()
        .map(|id| g.grad_or_zeros(bindings.var(id)).iter().map(|v| v.as_f64()).collect())
        .collect();
    drop(g);

    let h = S::lit(opts.step);
    let ids: Vec<_> = frag.params().ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for (pi, id) in ids.into_iter().enumerate() {
        let (name, len) = {
            let p = frag.params().get(id);
            (p.name.clone(), p.tensor.len())
        };
        let stride = opts.max_entries_per_param.map_or(1, |m| len.div_ceil(m.max(1)));
        let mut report = GroupReport {
            name,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in (0..len).step_by(stride) {
            let orig = frag.params().get(id).tensor.data()[i];
            frag.params().get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = eval(frag);
            frag.params().get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = eval(frag);
            frag.params().get_mut(id).tensor.data_mut()[i] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = analytic[pi][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_index.is_none() {
                report.max_rel_err = err;
                report.worst_index = Some(i);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        groups.push(report);
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        tolerance: opts.tolerance,
        checked: groups.iter().map(|g| g.checked).sum(),
        skipped: groups.iter().map(|g| g.skipped).sum(),
        groups,
    })
}
