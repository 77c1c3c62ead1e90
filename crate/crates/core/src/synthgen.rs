//! Synthetic driving traces for three emulated driving styles.
//!
//! Speed tracks `limit + offset + wander` through a proportional speed
//! controller whose commanded acceleration reaches the vehicle through a
//! first-order lag. Two Ornstein–Uhlenbeck noise terms perturb the
//! acceleration: a slow one scaled by `accel_noise_scale` and a fast one
//! scaled by `jerk_scale`. Lane changes are sinusoidal lateral-acceleration
//! pulses. Pedal and steering channels are derived kinematically.

use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{self, tag};
use crate::signal::{Style, Trace, CHANNELS, DEFAULT_SAMPLE_RATE_HZ};

const KMH: f64 = 1.0 / 3.6;

/// Speed-error gain of the speed controller (1/s).
const SPEED_GAIN: f64 = 0.5;
/// Time constant of the slow acceleration noise (s).
const ACCEL_NOISE_TAU: f64 = 1.0;
/// Time constant and relative size of the fast acceleration noise.
const JERK_NOISE_TAU: f64 = 0.3;
const JERK_NOISE_STD_PER_SCALE: f64 = 0.12;
/// Slow target-speed wander: time constant (s) and standard deviation (m/s).
const WANDER_TAU: f64 = 30.0;
const WANDER_STD: f64 = 0.8 * KMH;
/// Time-gap process: time constant (s) and std relative to the mean gap.
const GAP_TAU: f64 = 20.0;
const GAP_REL_STD: f64 = 0.25;
const MIN_GAP_S: f64 = 0.3;
const MIN_FRONT_DISTANCE: f64 = 3.0;
/// Lateral displacement of one lane change (m).
const LANE_WIDTH: f64 = 3.5;
/// Road curvature process: time constant (s) and std (1/m).
const CURVATURE_TAU: f64 = 30.0;
const CURVATURE_STD: f64 = 5e-4;
const WHEELBASE: f64 = 2.9;
const STEERING_RATIO: f64 = 15.0;
/// Pedal model: percent = 100 · (a + rolling + aero · v²) / full-throttle accel.
const ROLLING_DECEL: f64 = 0.1;
const AERO_DECEL: f64 = 4e-4;
const FULL_THROTTLE_ACCEL: f64 = 3.5;
const BRAKE_LIMIT: f64 = 6.0;

/// Limits cycled by [`ScenarioConfig::cycling`], in km/h.
pub const LIMIT_CYCLE_KMH: [f64; 4] = [50.0, 70.0, 90.0, 70.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    pub style: Style,
    pub target_speed_offset_kmh: f64,
    /// Stationary std of the slow acceleration noise (m/s²).
    pub accel_noise_scale: f64,
    pub lane_change_rate_hz: f64,
    /// Scales the fast acceleration noise and the controller responsiveness.
    pub jerk_scale: f64,
    pub mean_time_gap_s: f64,
}

impl StyleProfile {
    pub fn default_for(style: Style) -> Self {
        let (offset, noise, lane, jerk, gap) = match style {
            Style::Aggressive => (7.0, 0.9, 1.0 / 20.0, 2.5, 0.8),
            Style::Normal => (-2.0, 0.45, 1.0 / 60.0, 1.0, 1.8),
            Style::Cautious => (-8.0, 0.2, 1.0 / 120.0, 0.4, 3.0),
        };
        Self {
            style,
            target_speed_offset_kmh: offset,
            accel_noise_scale: noise,
            lane_change_rate_hz: lane,
            jerk_scale: jerk,
            mean_time_gap_s: gap,
        }
    }

    /// Seconds of anticipation before a lower speed limit.
    fn lookahead_s(&self) -> f64 {
        2.5 * self.mean_time_gap_s
    }

    fn max_accel(&self) -> f64 {
        0.8 + 2.5 * self.accel_noise_scale
    }

    /// Lag between commanded and realized acceleration (s).
    fn actuation_tau(&self) -> f64 {
        0.5 / self.jerk_scale
    }

    fn lane_change_duration(&self) -> f64 {
        2.5 + 1.2 * self.mean_time_gap_s
    }

    fn validate(&self) -> Result<()> {
        let positive = [self.jerk_scale, self.mean_time_gap_s];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(self.accel_noise_scale >= 0.0)
            || !(self.lane_change_rate_hz >= 0.0)
            || !self.target_speed_offset_kmh.is_finite()
        {
            return Err(Error::Config(format!("invalid {} profile", self.style)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    /// `(start_s, limit in m/s)` with strictly increasing start times.
    pub speed_limit_schedule: Vec<(f64, f64)>,
    pub lead_vehicle_present: bool,
    pub seed: u64,
    pub sample_rate_hz: f64,
}

impl ScenarioConfig {
    /// Limits cycling through [`LIMIT_CYCLE_KMH`], each held for `segment_s`.
    pub fn cycling(duration_s: f64, segment_s: f64, seed: u64) -> Self {
        let segments = (duration_s / segment_s).ceil().max(1.0) as usize;
        let schedule = (0..segments)
            .map(|k| (k as f64 * segment_s, LIMIT_CYCLE_KMH[k % 4] * KMH))
            .collect();
        Self {
            duration_s,
            speed_limit_schedule: schedule,
            lead_vehicle_present: true,
            seed,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config("scenario duration must be positive".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if self.speed_limit_schedule.is_empty() {
            return Err(Error::Config("speed-limit schedule is empty".into()));
        }
        if self
            .speed_limit_schedule
            .windows(2)
            .any(|w| !(w[1].0 > w[0].0))
        {
            return Err(Error::Config(
                "speed-limit schedule start times must strictly increase".into(),
            ));
        }
        if self.speed_limit_schedule.iter().any(|(_, l)| !(*l > 0.0)) {
            return Err(Error::Config("speed limits must be positive".into()));
        }
        Ok(())
    }

    /// Limit in force at time `t`; before the first entry the first limit
    /// applies.
    pub fn limit_at(&self, t: f64) -> f64 {
        self.speed_limit_schedule
            .iter()
            .rev()
            .find(|(start, _)| *start <= t)
            .unwrap_or(&self.speed_limit_schedule[0])
            .1
    }
}

/// Discretized Ornstein–Uhlenbeck process with stationary std `std`.
struct Ou {
    value: f64,
    decay: f64,
    kick: f64,
}

impl Ou {
    fn new(std: f64, tau: f64, dt: f64, initial: f64) -> Self {
        let decay = (-dt / tau).exp();
        Self {
            value: initial,
            decay,
            kick: std * (1.0 - decay * decay).sqrt(),
        }
    }

    fn step(&mut self, rng: &mut seeds::Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.value = self.value * self.decay + self.kick * z;
        self.value
    }
}

/// Generates one trace; every sample carries `profile.style` as its label.
pub fn generate_trace(profile: &StyleProfile, config: &ScenarioConfig) -> Result<Trace> {
    profile.validate()?;
    config.validate()?;
    let dt = 1.0 / config.sample_rate_hz;
    let n = (config.duration_s * config.sample_rate_hz).round() as usize;
    if n == 0 {
        return Err(Error::Config("scenario shorter than one sample".into()));
    }
    let mut rng = seeds::rng(config.seed, &[]);
    let z0: f64 = rng.sample(StandardNormal);
    let mut wander = Ou::new(WANDER_STD, WANDER_TAU, dt, WANDER_STD * z0);
    let mut accel_noise = Ou::new(profile.accel_noise_scale, ACCEL_NOISE_TAU, dt, 0.0);
    let mut jerk_noise = Ou::new(
        JERK_NOISE_STD_PER_SCALE * profile.jerk_scale,
        JERK_NOISE_TAU,
        dt,
        0.0,
    );
    let gap_std = GAP_REL_STD * profile.mean_time_gap_s;
    let z1: f64 = rng.sample(StandardNormal);
    let mut gap = Ou::new(gap_std, GAP_TAU, dt, gap_std * z1);
    let z2: f64 = rng.sample(StandardNormal);
    let mut curvature = Ou::new(CURVATURE_STD, CURVATURE_TAU, dt, CURVATURE_STD * z2);

    let offset = profile.target_speed_offset_kmh * KMH;
    let lookahead = profile.lookahead_s();
    let target = |t: f64, w: f64| -> f64 {
        let upcoming = config.limit_at(t).min(config.limit_at(t + lookahead));
        (upcoming + offset + w).max(0.0)
    };

    let mut v = target(0.0, wander.value);
    let mut a_ctrl = 0.0;
    let lc_duration = profile.lane_change_duration();
    let lc_amplitude = 2.0 * std::f64::consts::PI * LANE_WIDTH / (lc_duration * lc_duration);
    let mut lane_change: Option<(f64, f64)> = None;

    let mut ch: Vec<Vec<f64>> = vec![Vec::with_capacity(n); CHANNELS.len()];
    let mut prev_steer = None;
    for i in 0..n {
        let t = i as f64 * dt;
        let limit = config.limit_at(t);
        let w = wander.step(&mut rng);
        let desired = (SPEED_GAIN * (target(t, w) - v)).clamp(-BRAKE_LIMIT, profile.max_accel());
        a_ctrl += (desired - a_ctrl) * (dt / profile.actuation_tau()).min(1.0);
        let mut a = a_ctrl + accel_noise.step(&mut rng) + jerk_noise.step(&mut rng);
        let v_next = v + a * dt;
        if v_next < 0.0 {
            a = -v / dt;
        }

        let lateral_pulse = match lane_change {
            Some((start, dir)) if t - start < lc_duration => {
                dir * lc_amplitude * (2.0 * std::f64::consts::PI * (t - start) / lc_duration).sin()
            }
            _ => {
                lane_change = None;
                if rng.random::<f64>() < profile.lane_change_rate_hz * dt {
                    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    lane_change = Some((t, dir));
                }
                0.0
            }
        };
        let lateral = lateral_pulse + v * v * curvature.step(&mut rng);
        let steer = STEERING_RATIO * (WHEELBASE * lateral / v.max(1.0).powi(2)).atan();
        let steer_rate = prev_steer.map_or(0.0, |p: f64| (steer - p) / dt);
        prev_steer = Some(steer);

        let pedal = (100.0 * (a + ROLLING_DECEL + AERO_DECEL * v * v) / FULL_THROTTLE_ACCEL)
            .clamp(0.0, 100.0);
        let g = gap.step(&mut rng) + profile.mean_time_gap_s;
        let front = if config.lead_vehicle_present {
            (g.max(MIN_GAP_S) * v).max(MIN_FRONT_DISTANCE)
        } else {
            f64::NAN
        };

        for (c, value) in ch
            .iter_mut()
            .zip([a, v, limit, pedal, lateral, steer, steer_rate, front])
        {
            c.push(value);
        }
        v = (v + a * dt).max(0.0);
    }
    Trace::new(
        format!("{}_{:016x}", profile.style, config.seed),
        config.sample_rate_hz,
        CHANNELS.iter().map(|s| s.to_string()).collect(),
        ch,
        Some(vec![profile.style; n]),
    )
}

/// Generates `n_per_style` traces for each style in `styles`.
///
/// Trace `k` (counting across styles in order) uses the seed
/// `derive(master_seed, [TRACE, k])`; all other scenario settings come from
/// `template`.
pub fn generate_dataset(
    styles: &[Style],
    n_per_style: usize,
    template: &ScenarioConfig,
    master_seed: u64,
) -> Result<Vec<Trace>> {
    if n_per_style == 0 {
        return Err(Error::Config("need at least one trace per style".into()));
    }
    let mut traces = Vec::with_capacity(styles.len() * n_per_style);
    for (s, style) in styles.iter().enumerate() {
        let profile = StyleProfile::default_for(*style);
        for i in 0..n_per_style {
            let k = (s * n_per_style + i) as u64;
            let config = ScenarioConfig {
                seed: seeds::derive(master_seed, &[tag::TRACE, k]),
                ..template.clone()
            };
            let mut trace = generate_trace(&profile, &config)?;
            trace.id = format!("{}_{:03}", style, i);
            traces.push(trace);
        }
    }
    Ok(traces)
}
