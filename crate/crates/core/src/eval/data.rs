//! Annotated synthetic window datasets for the experiment drivers.

use serde::{Deserialize, Serialize};

use crate::annotator::{
    annotate, compute_parameters, fit_kde, BandwidthRule, KdeModel, RuleThresholds,
};
use crate::error::{Error, Result};
use crate::seeds::{self, tag};
use crate::signal::{segment, Style, Trace, Window};
use crate::synthgen::{generate_dataset, ScenarioConfig};

/// Seed-path component separating the density-reference traces from the
/// experiment traces.
const REFERENCE_STREAM: u64 = 1;
const EXPERIMENT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Exact number of windows returned, split evenly over the styles.
    pub n_windows: usize,
    pub window_seconds: f64,
    pub overlap: f64,
    pub trace_seconds: f64,
    /// Seconds between speed-limit changes.
    pub limit_segment_seconds: f64,
    /// Ground-truth traces per style used to fit the annotation densities.
    pub reference_traces_per_style: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_windows: 1000,
            window_seconds: 10.0,
            overlap: 0.0,
            trace_seconds: 600.0,
            limit_segment_seconds: 90.0,
            reference_traces_per_style: 3,
            seed: 0,
        }
    }
}

/// Windows of `traces`, absent front distances filled.
pub fn windows_of(traces: &[Trace], seconds: f64, overlap: f64) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for t in traces {
        out.extend(
            segment(t, seconds, overlap)?
                .windows
                .into_iter()
                .map(|w| w.filled()),
        );
    }
    Ok(out)
}

/// Fits the annotation densities on ground-truth labeled windows.
pub fn fit_reference_kde(windows: &[Window]) -> Result<KdeModel> {
    let samples = windows
        .iter()
        .map(|w| {
            let style = w
                .label
                .ok_or_else(|| Error::Data(format!("reference window {} has no label", w.id())))?;
            Ok((style, compute_parameters(w)?))
        })
        .collect::<Result<Vec<_>>>()?;
    fit_kde(&samples, BandwidthRule::Scott)
}

/// Replaces every window label by its annotation.
pub fn annotate_windows(windows: &mut [Window], kde: &KdeModel, th: &RuleThresholds) -> Result<()> {
    for w in windows {
        w.label = Some(annotate(w, kde, th)?.label);
    }
    Ok(())
}

/// Traces covering `config`: enough per style for `n_windows / 3` windows.
pub fn experiment_traces(config: &SyntheticConfig) -> Result<Vec<Trace>> {
    let per_trace = windows_per_trace(config)?;
    let per_style = config.n_windows.div_ceil(Style::ALL.len());
    generate_traces(config, per_style.div_ceil(per_trace).max(1))
}

/// `per_style` experiment traces of every style.
pub fn generate_traces(config: &SyntheticConfig, per_style: usize) -> Result<Vec<Trace>> {
    let template = ScenarioConfig::cycling(config.trace_seconds, config.limit_segment_seconds, 0);
    generate_dataset(
        &Style::ALL,
        per_style,
        &template,
        seeds::derive(config.seed, &[tag::TRACE, EXPERIMENT_STREAM]),
    )
}

fn windows_per_trace(config: &SyntheticConfig) -> Result<usize> {
    if !(config.window_seconds > 0.0 && config.trace_seconds >= config.window_seconds) {
        return Err(Error::Config(format!(
            "traces of {} s cannot hold {} s windows",
            config.trace_seconds, config.window_seconds
        )));
    }
    let stride = config.window_seconds * (1.0 - config.overlap);
    Ok(((config.trace_seconds - config.window_seconds) / stride).floor() as usize + 1)
}

/// Exactly `n_windows` annotated windows, balanced over the generating
/// styles: for each style the earliest windows of its traces, in order.
pub fn synthetic_dataset(config: &SyntheticConfig) -> Result<Vec<Window>> {
    if config.n_windows == 0 {
        return Err(Error::Config(
            "dataset must contain at least one window".into(),
        ));
    }
    let template = ScenarioConfig::cycling(config.trace_seconds, config.limit_segment_seconds, 0);
    let reference = generate_dataset(
        &Style::ALL,
        config.reference_traces_per_style.max(1),
        &template,
        seeds::derive(config.seed, &[tag::TRACE, REFERENCE_STREAM]),
    )?;
    let kde = fit_reference_kde(&windows_of(&reference, config.window_seconds, 0.0)?)?;

    let traces = experiment_traces(config)?;
    let all = windows_of(&traces, config.window_seconds, config.overlap)?;
    let n_styles = Style::ALL.len();
    let mut out = Vec::with_capacity(config.n_windows);
    for (s, style) in Style::ALL.iter().enumerate() {
        let quota = config.n_windows / n_styles + usize::from(s < config.n_windows % n_styles);
        out.extend(
            all.iter()
                .filter(|w| w.label == Some(*style))
                .take(quota)
                .cloned(),
        );
    }
    if out.len() != config.n_windows {
        return Err(Error::Data(format!(
            "generated {} windows, expected {}",
            out.len(),
            config.n_windows
        )));
    }
    annotate_windows(&mut out, &kde, &RuleThresholds::default())?;
    Ok(out)
}
