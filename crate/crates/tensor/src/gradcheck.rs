//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor: gradients smaller than this in magnitude are compared
/// in absolute terms. Central differences at [`DEFAULT_STEP`] carry
/// rounding noise of order 1e-10 on whole-network losses, which a smaller
/// floor would magnify for weights whose true gradient is zero (such as a
/// bias feeding batch normalization).
pub const ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of every trainable element against central
/// differences with the given `step`.
///
/// `forward` must build a scalar loss on the supplied fresh tape and be a
/// deterministic function of the store's values.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    step: f64,
    mut forward: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.clear_grads();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(&mut tape, store)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for index in 0..store.len() {
        let pid = ParamId(index);
        let (requires_grad, numel) = {
            let p = store.get(pid);
            (p.requires_grad, p.value.numel())
        };
        if !requires_grad {
            continue;
        }
        for e in 0..numel {
            let original = store.get(pid).value.data()[e];
            store.get_mut(pid).value.data_mut()[e] = original + step;
            let plus = eval(store)?;
            store.get_mut(pid).value.data_mut()[e] = original - step;
            let minus = eval(store)?;
            store.get_mut(pid).value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = store.get(pid).grad.as_ref().map_or(0.0, |g| g.data()[e]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(pid).name.clone(), e));
            }
        }
    }
    Ok(report)
}
