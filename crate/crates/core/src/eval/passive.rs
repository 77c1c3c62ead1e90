//! Cross-validated comparison of the architectures on fully labeled data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::annotator::RuleThresholds;
use crate::error::{Error, Result};
use crate::eval::config::{ExperimentConfig, WindowConfig};
use crate::eval::data::{
    annotate_windows, fit_reference_kde, synthetic_dataset, windows_of, SyntheticConfig,
};
use crate::eval::fixed;
use crate::eval::kfold::stratified_kfold;
use crate::eval::metrics::{compute_metrics, MetricsReport};
use crate::models::{
    build_model, model_input, train, Architecture, ImageTransform, ModelSpec, TrainConfig,
};
use crate::recurrence::{channel_epsilons, EPSILON_STD_FRACTION};
use crate::seeds::{self, tag};
use crate::signal::{fit_scaler, read_trace_dir, Window};

/// Annotated windows for one segmentation of the configured dataset.
pub fn load_windows(config: &ExperimentConfig, window: &WindowConfig) -> Result<Vec<Window>> {
    match &config.dataset {
        None => synthetic_dataset(&SyntheticConfig {
            window_seconds: window.seconds,
            overlap: window.overlap,
            seed: config.seed,
            ..config.synthetic.clone()
        }),
        Some(dir) => {
            let traces = read_trace_dir(dir)?;
            let reference = match &config.reference {
                Some(r) => read_trace_dir(r)?,
                None => traces.clone(),
            };
            let kde = fit_reference_kde(&windows_of(&reference, window.seconds, 0.0)?)?;
            let mut windows = windows_of(&traces, window.seconds, window.overlap)?;
            if windows.is_empty() {
                return Err(Error::Data(format!(
                    "no {} s windows fit the traces in {}",
                    window.seconds,
                    dir.display()
                )));
            }
            annotate_windows(&mut windows, &kde, &RuleThresholds::default())?;
            Ok(windows)
        }
    }
}

/// Settings of one cross-validation run.
#[derive(Clone, Debug)]
pub struct CvSettings {
    pub architecture: Architecture,
    pub folds: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub budget: Option<usize>,
    pub dropout_rate: Option<f64>,
}

fn labels_of(windows: &[Window]) -> Result<Vec<usize>> {
    windows
        .iter()
        .map(|w| {
            w.label
                .map(|l| l.index())
                .ok_or_else(|| Error::Data(format!("window {} has no label", w.id())))
        })
        .collect()
}

/// Per-fold test metrics. The scaler and the recurrence thresholds are fit
/// on each training fold only.
pub fn cross_validate(windows: &[Window], settings: &CvSettings) -> Result<Vec<MetricsReport>> {
    let labels = labels_of(windows)?;
    let folds = stratified_kfold(&labels, settings.folds, settings.seed)?;
    let first = windows
        .first()
        .ok_or_else(|| Error::Data("cross-validation of an empty dataset".into()))?;
    let arch = settings.architecture;
    let mut spec = if arch.uses_images() {
        ModelSpec::new(arch, first.length, 1)
    } else {
        ModelSpec::new(arch, first.length, first.channel_names.len())
    };
    spec.budget = settings.budget;
    spec.dropout_rate = settings.dropout_rate;

    let mut reports = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        let pick = |ids: &[usize]| ids.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
        let (train_w, test_w) = (pick(&fold.train), pick(&fold.test));
        let scaler = fit_scaler(&train_w)?;
        let (train_s, test_s) = (scaler.apply(&train_w)?, scaler.apply(&test_w)?);
        let images = if arch.uses_images() {
            Some(ImageTransform {
                epsilons: channel_epsilons(&train_s, EPSILON_STD_FRACTION)?,
                side: first.length,
            })
        } else {
            None
        };
        let x_train = model_input(&train_s, images.as_ref())?;
        let x_test = model_input(&test_s, images.as_ref())?;
        let y_train: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
        let y_test: Vec<usize> = fold.test.iter().map(|&i| labels[i]).collect();
        let path = [tag::FOLD, f as u64];
        let mut model = build_model(&spec, seeds::derive(settings.seed, &path))?;
        let cfg = TrainConfig {
            seed: seeds::derive(settings.seed, &[tag::TRAIN, path[0], path[1]]),
            ..settings.train.clone()
        };
        train(&mut model, &x_train, &y_train, &cfg)?;
        reports.push(compute_metrics(&model.predict_proba(&x_test)?, &y_test)?);
    }
    Ok(reports)
}

/// Fold-averaged metrics of one (model, segmentation) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassiveRow {
    pub model: Architecture,
    pub window_seconds: f64,
    pub overlap: f64,
    pub windows: usize,
    pub accuracy: f64,
    /// Population standard deviation of the fold accuracies.
    pub accuracy_std: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub auc: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(
    model: Architecture,
    window: &WindowConfig,
    windows: usize,
    reports: &[MetricsReport],
) -> PassiveRow {
    let accuracy = mean(reports.iter().map(|r| r.accuracy));
    PassiveRow {
        model,
        window_seconds: window.seconds,
        overlap: window.overlap,
        windows,
        accuracy,
        accuracy_std: mean(reports.iter().map(|r| (r.accuracy - accuracy).powi(2))).sqrt(),
        weighted_precision: mean(reports.iter().map(|r| r.weighted_precision)),
        weighted_recall: mean(reports.iter().map(|r| r.weighted_recall)),
        weighted_f1: mean(reports.iter().map(|r| r.weighted_f1)),
        auc: mean(reports.iter().map(|r| r.auc)),
    }
}

/// One row per (segmentation, model), segmentations outermost.
pub fn run_passive_experiment(config: &ExperimentConfig) -> Result<Vec<PassiveRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for window in &config.windows {
        let windows = load_windows(config, window)?;
        for &model in &config.models {
            let settings = CvSettings {
                architecture: model,
                folds: config.folds,
                seed: config.seed,
                train: config.train.clone(),
                budget: config.budget,
                dropout_rate: config.dropout_rate,
            };
            let reports = cross_validate(&windows, &settings)?;
            rows.push(summarize(model, window, windows.len(), &reports));
        }
    }
    Ok(rows)
}

pub fn write_passive_csv<W: Write>(w: W, rows: &[PassiveRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model",
        "window_seconds",
        "overlap",
        "windows",
        "accuracy",
        "accuracy_std",
        "weighted_precision",
        "weighted_recall",
        "weighted_f1",
        "auc",
    ])?;
    for r in rows {
        out.write_record([
            r.model.to_string(),
            fixed(r.window_seconds, 1),
            fixed(r.overlap, 2),
            r.windows.to_string(),
            fixed(r.accuracy, 6),
            fixed(r.accuracy_std, 6),
            fixed(r.weighted_precision, 6),
            fixed(r.weighted_recall, 6),
            fixed(r.weighted_f1, 6),
            fixed(r.auc, 6),
        ])?;
    }
    out.flush()?;
    Ok(())
}
