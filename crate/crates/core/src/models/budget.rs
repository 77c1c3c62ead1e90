//! Trainable-parameter counts per architecture and the budget solver.

use crate::error::{Error, Result};
use crate::models::{Architecture, ModelSpec};

/// Relative tolerance on a parameter budget.
pub const BUDGET_TOLERANCE: f64 = 0.05;

/// Kernel side of the first JRP convolution (also its stride).
pub const JRP_KERNEL1: usize = 5;
/// Kernel side and stride of the second JRP convolution.
pub const JRP_KERNEL2: usize = 3;
pub const JRP_STRIDE2: usize = 2;
/// Kernel width of the CNN-LSTM convolution.
pub const CNN_LSTM_KERNEL: usize = 5;

/// Count as `base(primary) + dense · slope(primary)`; the head that follows
/// the dense layer is included in `base` and `slope`.
fn linear_parts(spec: &ModelSpec, primary: usize) -> (usize, usize) {
    let (t, c, k) = (spec.time_steps, spec.channels, spec.n_classes);
    let p = primary;
    // Every architecture ends with dense → BN → dense(k).
    let head_slope = |fan_in: usize| fan_in + 1 + 2 + k;
    match spec.architecture {
        Architecture::Cnn1d => (p * (t * c + 1) + 2 * p + k, p + 1 + k),
        Architecture::Lstm => (4 * p * (c + p + 1) + k, head_slope(p)),
        Architecture::SelfAttention => ((c + 1) * p + 3 * p * p + k, head_slope(p)),
        Architecture::JrpCnn => (
            p * (JRP_KERNEL1 * JRP_KERNEL1 * c + 1) + p * (JRP_KERNEL2 * JRP_KERNEL2 * p + 1) + k,
            head_slope(p),
        ),
        Architecture::CnnLstm => {
            let h = spec.secondary;
            (
                p * (CNN_LSTM_KERNEL * c + 1) + 4 * h * (p + h + 1) + k,
                head_slope(h),
            )
        }
    }
}

/// Exact trainable-parameter count of a resolved spec.
pub fn parameter_count(spec: &ModelSpec) -> usize {
    let (base, slope) = linear_parts(spec, spec.primary);
    base + spec.dense * slope
}

/// Share of the budget given to the primary block before sizing the dense
/// layer.
fn primary_share(arch: Architecture) -> f64 {
    match arch {
        Architecture::Cnn1d => 0.9,
        Architecture::Lstm | Architecture::SelfAttention | Architecture::CnnLstm => 0.7,
        Architecture::JrpCnn => 0.5,
    }
}

fn best_dense(spec: &ModelSpec, primary: usize, budget: usize) -> (usize, usize) {
    let (base, slope) = linear_parts(spec, primary);
    let dense = if budget > base {
        (((budget - base) as f64 / slope as f64).round() as usize).max(1)
    } else {
        1
    };
    (dense, base + dense * slope)
}

/// Picks `primary` and `dense` so the count lands within
/// [`BUDGET_TOLERANCE`] of `budget`.
pub fn solve(spec: &ModelSpec, budget: usize) -> Result<ModelSpec> {
    let within =
        |count: usize| (count as f64 - budget as f64).abs() <= BUDGET_TOLERANCE * budget as f64;
    let with = |primary: usize, dense: usize| {
        let mut s = spec.clone();
        s.primary = primary;
        if s.architecture == Architecture::CnnLstm {
            s.secondary = primary;
        }
        s.dense = dense;
        s
    };
    let target = primary_share(spec.architecture) * budget as f64;
    let mut preferred = 1;
    let mut best_gap = f64::INFINITY;
    for p in 1..=budget.max(1) {
        let (base, _) = linear_parts(&with(p, 0), p);
        let gap = (base as f64 - target).abs();
        if gap < best_gap {
            best_gap = gap;
            preferred = p;
        }
        if base as f64 > target {
            break;
        }
    }
    let (dense, count) = best_dense(&with(preferred, 0), preferred, budget);
    if within(count) {
        return Ok(with(preferred, dense));
    }
    let mut nearest = (usize::MAX, 0, 0);
    for p in 1..=budget.max(1) {
        let s = with(p, 0);
        let (base, _) = linear_parts(&s, p);
        if base > 2 * budget {
            break;
        }
        let (d, count) = best_dense(&s, p, budget);
        let gap = count.abs_diff(budget);
        if gap < nearest.0 {
            nearest = (gap, p, d);
        }
    }
    let (_, p, d) = nearest;
    let count = parameter_count(&with(p.max(1), d.max(1)));
    if p > 0 && within(count) {
        Ok(with(p, d))
    } else {
        Err(Error::Config(format!(
            "{} cannot meet a budget of {budget} parameters; nearest achievable count is {count}",
            spec.architecture
        )))
    }
}
