//! Window annotation from speed and time-gap rules plus kernel-density votes
//! over five aggressiveness parameters.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::signal::{plurality, Style, Window, FRONT_DISTANCE, SPEED, SPEED_LIMIT};

pub const PARAMETER_NAMES: [&str; 5] = ["pke", "rpa", "rmspf", "jerk_mean", "jerk_std"];

/// Speed below which the time gap is treated as undefined (m/s).
const MIN_GAP_SPEED: f64 = 0.1;

/// The five aggressiveness statistics of one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingParameters {
    pub pke: f64,
    pub rpa: f64,
    pub rmspf: f64,
    /// Mean absolute jerk.
    pub jerk_mean: f64,
    /// Population standard deviation of the signed jerk.
    pub jerk_std: f64,
    /// Set when the window covers no distance; all values are then zero.
    pub stationary: bool,
}

impl DrivingParameters {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.pke,
            self.rpa,
            self.rmspf,
            self.jerk_mean,
            self.jerk_std,
        ]
    }
}

/// Computes the five parameters from a speed series sampled at `rate` Hz.
pub fn parameters_from_speed(speed: &[f64], rate: f64) -> DrivingParameters {
    let dt = 1.0 / rate;
    let distance: f64 = speed.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
    if !(distance > 0.0) {
        return DrivingParameters {
            pke: 0.0,
            rpa: 0.0,
            rmspf: 0.0,
            jerk_mean: 0.0,
            jerk_std: 0.0,
            stationary: true,
        };
    }
    let accel: Vec<f64> = speed.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let pke = speed
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| w[1] * w[1] - w[0] * w[0])
        .sum::<f64>()
        / distance;
    let rpa = speed
        .iter()
        .zip(&accel)
        .map(|(v, a)| v * a.max(0.0))
        .sum::<f64>()
        / distance;
    let rmspf = (speed
        .iter()
        .zip(&accel)
        .map(|(v, a)| (2.0 * v * a).powi(2))
        .sum::<f64>()
        / accel.len() as f64)
        .sqrt();
    let jerk: Vec<f64> = accel.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let (jerk_mean, jerk_std) = if jerk.is_empty() {
        (0.0, 0.0)
    } else {
        let n = jerk.len() as f64;
        let mean_abs = jerk.iter().map(|j| j.abs()).sum::<f64>() / n;
        let mean = jerk.iter().sum::<f64>() / n;
        let var = jerk.iter().map(|j| (j - mean).powi(2)).sum::<f64>() / n;
        (mean_abs, var.sqrt())
    };
    DrivingParameters {
        pke,
        rpa,
        rmspf,
        jerk_mean,
        jerk_std,
        stationary: false,
    }
}

pub fn compute_parameters(window: &Window) -> Result<DrivingParameters> {
    Ok(parameters_from_speed(
        window.channel(SPEED)?,
        window.sample_rate_hz,
    ))
}

/// Rule thresholds. Speeds are in km/h, distances in m, gaps in s and
/// fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleThresholds {
    pub speeding_margin_kmh: f64,
    pub speeding_fraction: f64,
    pub slow_margin_kmh: f64,
    pub slow_fraction: f64,
    pub slow_min_front_distance: f64,
    pub low_gap_s: f64,
    pub low_gap_fraction: f64,
    pub high_gap_s: f64,
    pub high_gap_fraction: f64,
    pub high_gap_max_front_distance: f64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            speeding_margin_kmh: 5.0,
            speeding_fraction: 0.20,
            slow_margin_kmh: 5.0,
            slow_fraction: 0.10,
            slow_min_front_distance: 20.0,
            low_gap_s: 1.0,
            low_gap_fraction: 0.20,
            high_gap_s: 2.5,
            high_gap_fraction: 0.10,
            high_gap_max_front_distance: 50.0,
        }
    }
}

/// Outcome of the four rules; `None` is an abstention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleVotes {
    pub speeding: Option<Style>,
    pub slow: Option<Style>,
    pub low_gap: Option<Style>,
    pub high_gap: Option<Style>,
}

impl RuleVotes {
    pub fn as_array(&self) -> [Option<Style>; 4] {
        [self.speeding, self.slow, self.low_gap, self.high_gap]
    }
}

/// Maps a pair of opposing rule outcomes to votes: both true gives two
/// normal votes, one true votes its class while the other abstains.
fn pair_votes(a: bool, b: bool, a_class: Style, b_class: Style) -> (Option<Style>, Option<Style>) {
    match (a, b) {
        (true, true) => (Some(Style::Normal), Some(Style::Normal)),
        (true, false) => (Some(a_class), None),
        (false, true) => (None, Some(b_class)),
        (false, false) => (None, None),
    }
}

pub fn evaluate_rules(window: &Window, th: &RuleThresholds) -> Result<RuleVotes> {
    let speed = window.channel(SPEED)?;
    let limit = window.channel(SPEED_LIMIT)?;
    let front = window.channel(FRONT_DISTANCE)?;
    let n = speed.len() as f64;
    let kmh = 1.0 / 3.6;

    let speeding_count = speed
        .iter()
        .zip(limit)
        .filter(|(v, l)| **v >= **l + th.speeding_margin_kmh * kmh)
        .count();
    let slow_count = speed
        .iter()
        .zip(limit)
        .zip(front)
        .filter(|((v, l), f)| {
            **v <= **l - th.slow_margin_kmh * kmh
                && (f.is_nan() || **f >= th.slow_min_front_distance)
        })
        .count();
    let speeding = speeding_count as f64 >= th.speeding_fraction * n;
    let slow = slow_count as f64 >= th.slow_fraction * n;
    let (speeding_vote, slow_vote) = pair_votes(speeding, slow, Style::Aggressive, Style::Cautious);

    let lead_present = front.iter().any(|f| !f.is_nan());
    let (low_gap_vote, high_gap_vote) = if lead_present {
        let gaps: Vec<(f64, f64)> = speed
            .iter()
            .zip(front)
            .filter(|(v, f)| !f.is_nan() && **v > MIN_GAP_SPEED)
            .map(|(v, f)| (f / v, *f))
            .collect();
        let low_count = gaps.iter().filter(|(g, _)| *g <= th.low_gap_s).count();
        let near: Vec<f64> = gaps
            .iter()
            .filter(|(_, f)| *f < th.high_gap_max_front_distance)
            .map(|(g, _)| *g)
            .collect();
        let high_count = near.iter().filter(|g| **g >= th.high_gap_s).count();
        let low = low_count as f64 >= th.low_gap_fraction * n;
        let high =
            !near.is_empty() && high_count as f64 >= th.high_gap_fraction * near.len() as f64;
        pair_votes(low, high, Style::Aggressive, Style::Cautious)
    } else {
        (None, None)
    };
    Ok(RuleVotes {
        speeding: speeding_vote,
        slow: slow_vote,
        low_gap: low_gap_vote,
        high_gap: high_gap_vote,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `h = σ · n^(−1/5)` with the sample standard deviation σ.
    Scott,
    Fixed(f64),
}

/// One-dimensional Gaussian kernel density estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kde1d {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde1d {
    pub fn fit(samples: Vec<f64>, rule: BandwidthRule) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Config("density fit needs at least 2 samples".into()));
        }
        let bandwidth = match rule {
            BandwidthRule::Fixed(h) if h > 0.0 => h,
            BandwidthRule::Fixed(h) => {
                return Err(Error::Config(format!("bandwidth {h} must be positive")))
            }
            BandwidthRule::Scott => {
                let n = samples.len() as f64;
                let mean = samples.iter().sum::<f64>() / n;
                let sd =
                    (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let h = sd * n.powf(-0.2);
                if h > 0.0 {
                    h
                } else {
                    1e-6 * mean.abs().max(1.0)
                }
            }
        };
        Ok(Self { samples, bandwidth })
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// Log density, evaluated with max-subtraction so far tails stay
    /// comparable instead of underflowing to zero.
    pub fn log_density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let exps: Vec<f64> = self
            .samples
            .iter()
            .map(|s| -0.5 * ((x - s) / h).powi(2))
            .collect();
        let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        max + sum.ln() - (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }
}

/// Per-class, per-parameter densities, indexed `[class][parameter]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub densities: Vec<Vec<Kde1d>>,
}

/// Fits one density per (class, parameter) from labeled parameter samples.
pub fn fit_kde(samples: &[(Style, DrivingParameters)], rule: BandwidthRule) -> Result<KdeModel> {
    let mut densities = Vec::with_capacity(3);
    for class in Style::ALL {
        let rows: Vec<[f64; 5]> = samples
            .iter()
            .filter(|(s, _)| *s == class)
            .map(|(_, p)| p.as_array())
            .collect();
        let mut per_param = Vec::with_capacity(5);
        for (j, name) in PARAMETER_NAMES.iter().enumerate() {
            if rows.len() < 2 {
                return Err(Error::Config(format!(
                    "class {class}, parameter {name}: need at least 2 samples, got {}",
                    rows.len()
                )));
            }
            per_param.push(Kde1d::fit(rows.iter().map(|r| r[j]).collect(), rule)?);
        }
        densities.push(per_param);
    }
    Ok(KdeModel { densities })
}

/// Index of the largest score; ties keep the earliest (aggressive, then
/// normal, then cautious).
fn argmax_first(scores: &[f64; 3]) -> Style {
    let mut best = 0;
    for i in 1..3 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Style::from_index(best).expect("three classes")
}

/// One vote per parameter: the class whose density is highest at the value.
pub fn kde_classify(params: &DrivingParameters, model: &KdeModel) -> [Style; 5] {
    let values = params.as_array();
    let mut votes = [Style::Normal; 5];
    for (j, vote) in votes.iter_mut().enumerate() {
        let scores = [0, 1, 2].map(|c| model.densities[c][j].log_density(values[j]));
        *vote = argmax_first(&scores);
    }
    votes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: Style,
    pub rules: RuleVotes,
    pub kde: [Style; 5],
    pub params: DrivingParameters,
}

/// Plurality over the non-abstaining rule votes and the five density votes.
pub fn fuse_votes(rules: &RuleVotes, kde: &[Style; 5]) -> Style {
    let mut counts = [0usize; 3];
    for v in rules
        .as_array()
        .into_iter()
        .flatten()
        .chain(kde.iter().copied())
    {
        counts[v.index()] += 1;
    }
    plurality(&counts)
}

pub fn annotate(window: &Window, kde: &KdeModel, th: &RuleThresholds) -> Result<Annotation> {
    let params = compute_parameters(window)?;
    let rules = evaluate_rules(window, th)?;
    let kde_votes = kde_classify(&params, kde);
    Ok(Annotation {
        label: fuse_votes(&rules, &kde_votes),
        rules,
        kde: kde_votes,
        params,
    })
}

/// Sample correlation and its two-sided p-value from Student's t with
/// `n − 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            what: "pearson inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

/// Writes `window_id, label`, the four rule votes (`abstain` when silent),
/// the five density votes and the five parameter values.
pub fn write_annotations_csv<W: std::io::Write>(w: W, rows: &[(String, Annotation)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "window_id".to_string(),
        "label".to_string(),
        "rule_speeding".to_string(),
        "rule_slow".to_string(),
        "rule_low_gap".to_string(),
        "rule_high_gap".to_string(),
    ];
    header.extend(PARAMETER_NAMES.iter().map(|p| format!("kde_{p}")));
    header.extend(PARAMETER_NAMES.iter().map(|p| p.to_string()));
    out.write_record(&header)?;
    for (id, a) in rows {
        let mut record = vec![id.clone(), a.label.to_string()];
        record.extend(
            a.rules
                .as_array()
                .iter()
                .map(|v| v.map_or("abstain".to_string(), |s| s.to_string())),
        );
        record.extend(a.kde.iter().map(|s| s.to_string()));
        record.extend(a.params.as_array().iter().map(|v| format!("{v:.6}")));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}
