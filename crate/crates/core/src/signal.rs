//! Traces, windows, segmentation, standardization and file formats.
//!
//! A trace file is a CSV with one column per channel plus an optional
//! `style` column; an empty `front_distance` cell means no lead vehicle. A
//! JSON sidecar with the same stem carries `sample_rate_hz`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use drivestyle_tensor::{read_container, write_container, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LONGITUDINAL_ACCEL: &str = "longitudinal_accel";
pub const SPEED: &str = "speed";
pub const SPEED_LIMIT: &str = "speed_limit";
pub const ACCEL_PEDAL_PCT: &str = "accel_pedal_pct";
pub const LATERAL_ACCEL: &str = "lateral_accel";
pub const STEERING_ANGLE: &str = "steering_angle";
pub const STEERING_RATE: &str = "steering_rate";
pub const FRONT_DISTANCE: &str = "front_distance";

/// The 8-feature model input schema, in column order.
pub const CHANNELS: [&str; 8] = [
    LONGITUDINAL_ACCEL,
    SPEED,
    SPEED_LIMIT,
    ACCEL_PEDAL_PCT,
    LATERAL_ACCEL,
    STEERING_ANGLE,
    STEERING_RATE,
    FRONT_DISTANCE,
];

/// Distance (m) substituted for an absent lead vehicle when building model
/// inputs.
pub const ABSENT_FRONT_DISTANCE_FILL: f64 = 150.0;

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 10.0;

/// Driving style; the discriminant is the class index used by classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Aggressive = 0,
    Normal = 1,
    Cautious = 2,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Aggressive, Style::Normal, Style::Cautious];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Style> {
        Self::ALL.get(i).copied()
    }

    /// Ordinal used for correlation: cautious 0, normal 1, aggressive 2.
    pub fn ordinal(self) -> f64 {
        match self {
            Style::Cautious => 0.0,
            Style::Normal => 1.0,
            Style::Aggressive => 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Aggressive => "aggressive",
            Style::Normal => "normal",
            Style::Cautious => "cautious",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aggressive" | "a" => Ok(Style::Aggressive),
            "normal" | "n" => Ok(Style::Normal),
            "cautious" | "c" => Ok(Style::Cautious),
            other => Err(Error::Data(format!("unknown style `{other}`"))),
        }
    }
}

/// Majority label; ties go to normal.
pub fn majority_style(labels: &[Style]) -> Option<Style> {
    if labels.is_empty() {
        return None;
    }
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    Some(plurality(&counts))
}

/// Class with the highest count; any tie for the maximum resolves to normal.
pub fn plurality(counts: &[usize; 3]) -> Style {
    let max = *counts.iter().max().expect("three classes");
    let winners: Vec<Style> = Style::ALL
        .into_iter()
        .filter(|s| counts[s.index()] == max)
        .collect();
    if winners.len() == 1 {
        winners[0]
    } else {
        Style::Normal
    }
}

/// Multichannel time series sampled at a fixed rate.
///
/// Channels are stored channel-major. An absent lead vehicle is encoded as
/// `NaN` in `front_distance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub id: String,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
    pub styles: Option<Vec<Style>>,
}

impl Trace {
    pub fn new(
        id: impl Into<String>,
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
        styles: Option<Vec<Style>>,
    ) -> Result<Self> {
        let trace = Self {
            id: id.into(),
            sample_rate_hz,
            channel_names,
            channels,
            styles,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        channel_index(&self.channel_names, name).map(|i| self.channels[i].as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Data(format!(
                "trace {}: sample rate must be positive",
                self.id
            )));
        }
        if self.channel_names.len() != self.channels.len() {
            return Err(Error::Dimension {
                what: "channel names",
                expected: self.channels.len(),
                actual: self.channel_names.len(),
            });
        }
        let n = self.len();
        for (name, values) in self.channel_names.iter().zip(&self.channels) {
            if values.len() != n {
                return Err(Error::Data(format!(
                    "trace {}: channel {name} has {} samples, expected {n}",
                    self.id,
                    values.len()
                )));
            }
            let bad = match name.as_str() {
                SPEED => values.iter().any(|v| !(*v >= 0.0)),
                SPEED_LIMIT => values.iter().any(|v| !(*v > 0.0)),
                FRONT_DISTANCE => values.iter().any(|v| !v.is_nan() && !(*v > 0.0)),
                _ => values.iter().any(|v| !v.is_finite()),
            };
            if bad {
                return Err(Error::Data(format!(
                    "trace {}: channel {name} violates its value range",
                    self.id
                )));
            }
        }
        if let Some(styles) = &self.styles {
            if styles.len() != n {
                return Err(Error::Dimension {
                    what: "style labels",
                    expected: n,
                    actual: styles.len(),
                });
            }
        }
        Ok(())
    }
}

fn channel_index(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Channel(name.to_string()))
}

/// A contiguous copy of a trace slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub source_id: String,
    pub start_index: usize,
    pub length: usize,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    /// Channel-major values, each of `length` samples.
    pub data: Vec<Vec<f64>>,
    pub label: Option<Style>,
}

impl Window {
    pub fn id(&self) -> String {
        format!("{}#{}", self.source_id, self.start_index)
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        channel_index(&self.channel_names, name).map(|i| self.data[i].as_slice())
    }

    /// Copy restricted to `names`, in that order.
    pub fn select(&self, names: &[&str]) -> Result<Window> {
        let data = names
            .iter()
            .map(|n| self.channel(n).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Window {
            channel_names: names.iter().map(|s| s.to_string()).collect(),
            data,
            ..self.clone()
        })
    }

    /// Copy with absent front distances replaced by
    /// [`ABSENT_FRONT_DISTANCE_FILL`].
    pub fn filled(&self) -> Window {
        let mut w = self.clone();
        if let Ok(i) = channel_index(&w.channel_names, FRONT_DISTANCE) {
            for v in &mut w.data[i] {
                if v.is_nan() {
                    *v = ABSENT_FRONT_DISTANCE_FILL;
                }
            }
        }
        w
    }
}

/// Output of [`segment`]; `warning` is set when no window fits.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub windows: Vec<Window>,
    pub warning: Option<String>,
}

/// Number of samples in a window of `seconds` at `rate` Hz.
pub fn window_samples(seconds: f64, rate: f64) -> usize {
    (seconds * rate).round() as usize
}

/// Cuts `trace` into fixed-length windows, left to right, with stride
/// `length · (1 − overlap)`. The trailing partial window is discarded.
pub fn segment(trace: &Trace, window_seconds: f64, overlap: f64) -> Result<Segmentation> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    if !(window_seconds > 0.0) {
        return Err(Error::Config("window length must be positive".into()));
    }
    let length = window_samples(window_seconds, trace.sample_rate_hz);
    if length == 0 {
        return Err(Error::Config("window shorter than one sample".into()));
    }
    let stride = ((length as f64 * (1.0 - overlap)).round() as usize).max(1);
    let n = trace.len();
    if length > n {
        return Ok(Segmentation {
            windows: Vec::new(),
            warning: Some(format!(
                "trace {}: window of {length} samples exceeds trace length {n}",
                trace.id
            )),
        });
    }
    let windows = (0..=(n - length) / stride)
        .map(|k| {
            let start = k * stride;
            let label = trace
                .styles
                .as_ref()
                .and_then(|s| majority_style(&s[start..start + length]));
            Window {
                source_id: trace.id.clone(),
                start_index: start,
                length,
                sample_rate_hz: trace.sample_rate_hz,
                channel_names: trace.channel_names.clone(),
                data: trace
                    .channels
                    .iter()
                    .map(|c| c[start..start + length].to_vec())
                    .collect(),
                label,
            }
        })
        .collect();
    Ok(Segmentation {
        windows,
        warning: None,
    })
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub channel_names: Vec<String>,
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for channels flagged constant.
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

const CONSTANT_STD: f64 = 1e-12;

/// Fits means and standard deviations over all samples of `windows`,
/// pooled per channel.
pub fn fit_scaler(windows: &[Window]) -> Result<FeatureScaler> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Config("cannot fit a scaler on an empty training set".into()))?;
    let names = first.channel_names.clone();
    let c = names.len();
    let mut count = 0usize;
    let mut sum = vec![0.0; c];
    for w in windows {
        check_schema(&names, &w.channel_names)?;
        for (s, values) in sum.iter_mut().zip(&w.data) {
            for v in values {
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "window {}: non-finite value; fill absent channels first",
                        w.id()
                    )));
                }
                *s += v;
            }
        }
        count += w.length;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; c];
    for w in windows {
        for ((s, values), m) in sq.iter_mut().zip(&w.data).zip(&mean) {
            *s += values.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let raw_std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    let constant: Vec<bool> = raw_std.iter().map(|&s| s <= CONSTANT_STD).collect();
    let std = raw_std
        .iter()
        .zip(&constant)
        .map(|(&s, &k)| if k { 1.0 } else { s })
        .collect();
    Ok(FeatureScaler {
        channel_names: names,
        mean,
        std,
        constant,
    })
}

fn check_schema(expected: &[String], actual: &[String]) -> Result<()> {
    if expected == actual {
        return Ok(());
    }
    let missing = expected
        .iter()
        .find(|n| !actual.contains(n))
        .or_else(|| actual.iter().find(|n| !expected.contains(n)))
        .cloned()
        .unwrap_or_else(|| "channel order".to_string());
    Err(Error::Channel(missing))
}

impl FeatureScaler {
    /// `(x − mean) / std` per channel.
    pub fn apply(&self, windows: &[Window]) -> Result<Vec<Window>> {
        windows
            .iter()
            .map(|w| {
                check_schema(&self.channel_names, &w.channel_names)?;
                let mut out = w.clone();
                for ((values, m), s) in out.data.iter_mut().zip(&self.mean).zip(&self.std) {
                    values.iter_mut().for_each(|v| *v = (*v - m) / s);
                }
                Ok(out)
            })
            .collect()
    }

    /// Inverse of [`FeatureScaler::apply`].
    pub fn invert(&self, windows: &[Window]) -> Result<Vec<Window>> {
        windows
            .iter()
            .map(|w| {
                check_schema(&self.channel_names, &w.channel_names)?;
                let mut out = w.clone();
                for ((values, m), s) in out.data.iter_mut().zip(&self.mean).zip(&self.std) {
                    values.iter_mut().for_each(|v| *v = *v * s + m);
                }
                Ok(out)
            })
            .collect()
    }
}

/// Stacks equal-length windows into a `[n, time, channels]` tensor.
pub fn windows_to_tensor(windows: &[Window]) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Data("no windows to stack".into()))?;
    let (t, c) = (first.length, first.channel_names.len());
    let mut data = Vec::with_capacity(windows.len() * t * c);
    for w in windows {
        check_schema(&first.channel_names, &w.channel_names)?;
        if w.length != t {
            return Err(Error::Dimension {
                what: "window length",
                expected: t,
                actual: w.length,
            });
        }
        for i in 0..t {
            data.extend(w.data.iter().map(|ch| ch[i]));
        }
    }
    Ok(Tensor::new(vec![windows.len(), t, c], data)?)
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    id: String,
    sample_rate_hz: f64,
}

/// Writes `<dir>/<id>.csv` and its `<dir>/<id>.json` sidecar.
pub fn write_trace(dir: &Path, trace: &Trace) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.csv", trace.id));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<&str> = trace.channel_names.iter().map(String::as_str).collect();
    if trace.styles.is_some() {
        header.push("style");
    }
    w.write_record(&header)?;
    for i in 0..trace.len() {
        let mut row: Vec<String> = trace
            .channels
            .iter()
            .map(|c| {
                if c[i].is_nan() {
                    String::new()
                } else {
                    format!("{:.6}", c[i])
                }
            })
            .collect();
        if let Some(styles) = &trace.styles {
            row.push(styles[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let meta = TraceMeta {
        id: trace.id.clone(),
        sample_rate_hz: trace.sample_rate_hz,
    };
    fs::write(
        dir.join(format!("{}.json", trace.id)),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(path)
}

/// Reads a trace CSV and its JSON sidecar.
pub fn read_trace(csv_path: &Path) -> Result<Trace> {
    let meta_path = csv_path.with_extension("json");
    let meta: TraceMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?,
    )
    .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let mut r = csv::Reader::from_path(csv_path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let style_col = header.iter().position(|h| h == "style");
    let channel_names: Vec<String> = header.iter().filter(|h| *h != "style").cloned().collect();
    let mut channels = vec![Vec::new(); channel_names.len()];
    let mut styles = style_col.map(|_| Vec::new());
    for (row, record) in r.records().enumerate() {
        let record = record?;
        let mut c = 0;
        for (col, field) in record.iter().enumerate() {
            if Some(col) == style_col {
                styles.as_mut().expect("style column").push(field.parse()?);
                continue;
            }
            let value = if field.trim().is_empty() && channel_names[c] == FRONT_DISTANCE {
                f64::NAN
            } else {
                field.trim().parse::<f64>().map_err(|e| {
                    Error::Data(format!("{} row {}: {e}", csv_path.display(), row + 2))
                })?
            };
            channels[c].push(value);
            c += 1;
        }
    }
    Trace::new(
        meta.id,
        meta.sample_rate_hz,
        channel_names,
        channels,
        styles,
    )
}

/// Reads every trace CSV in `dir`, ordered by file name.
pub fn read_trace_dir(dir: &Path) -> Result<Vec<Trace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "{}: no trace CSV files",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_trace(p)).collect()
}

/// Writes `[n, time, channels]` window values to a tensor container and the
/// ids and labels to a CSV.
pub fn write_window_dataset(
    tensor_path: &Path,
    labels_path: &Path,
    windows: &[Window],
) -> Result<()> {
    let tensor = windows_to_tensor(windows)?;
    write_container(fs::File::create(tensor_path)?, &[("windows", &tensor)])?;
    let mut w = csv::Writer::from_path(labels_path)?;
    w.write_record(["window_id", "label"])?;
    for win in windows {
        w.write_record([win.id(), win.label.map_or(String::new(), |l| l.to_string())])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back a dataset written by [`write_window_dataset`].
pub fn read_window_dataset(
    tensor_path: &Path,
    labels_path: &Path,
) -> Result<(Tensor, Vec<String>, Vec<Option<Style>>)> {
    let mut entries = read_container(fs::File::open(tensor_path)?)?;
    if entries.len() != 1 {
        return Err(Error::Data("window container must hold one tensor".into()));
    }
    let (_, tensor) = entries.remove(0);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut r = csv::Reader::from_path(labels_path)?;
    for record in r.records() {
        let record = record?;
        ids.push(record.get(0).unwrap_or_default().to_string());
        let l = record.get(1).unwrap_or_default();
        labels.push(if l.is_empty() { None } else { Some(l.parse()?) });
    }
    if ids.len() != tensor.shape()[0] {
        return Err(Error::Dimension {
            what: "label rows",
            expected: tensor.shape()[0],
            actual: ids.len(),
        });
    }
    Ok((tensor, ids, labels))
}

/// Counts of each label, for reporting.
pub fn label_counts(labels: &[Style]) -> BTreeMap<Style, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        *m.entry(*l).or_insert(0) += 1;
    }
    m
}
