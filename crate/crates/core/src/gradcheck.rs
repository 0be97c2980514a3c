//! Central finite-difference gradient checks over a [`ParamStore`].
//!
//! Inputs that need checking are registered as parameters alongside the
//! weights, so one routine covers both.

use crate::autograd::{backward, no_grad, Var};
use crate::error::Result;
use crate::nn::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Relative tolerance.
    pub rtol: f64,
    /// Absolute floor added to the tolerance, for entries whose true
    /// gradient is zero.
    pub atol: f64,
    /// Finite-difference step.
    pub step: f64,
    /// At most this many entries per parameter tensor, evenly spaced.
    pub max_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { rtol: 1e-3, atol: 1e-7, step: 1e-5, max_per_param: usize::MAX }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compare the analytic gradient of the scalar `f` with central differences
/// for every (sampled) entry of `ids`. The store is restored afterwards.
pub fn check(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&Bound) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let bound = store.bind();
    let loss = f(&bound)?;
    let mut grads = backward(&loss);
    let analytic = bound.collect(&mut grads);
    drop(bound);

    let eval = |s: &ParamStore| -> Result<f64> { no_grad(|| Ok(f(&s.bind())?.value().item())) };
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let stride = n.div_ceil(opts.max_per_param.min(n).max(1));
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[i]);
            let scale = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            if scale > opts.atol {
                report.worst_relative = report.worst_relative.max(err / scale);
            }
            if err > opts.rtol * scale + opts.atol {
                report.failures.push(format!(
                    "{}[{i}]: analytic {a:.9e} vs numeric {numeric:.9e}",
                    store.name(id)
                ));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
