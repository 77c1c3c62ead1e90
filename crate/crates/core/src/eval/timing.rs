//! Forward-pass timing of budget-matched models.

use std::io::Write;
use std::time::Instant;

use drivestyle_tensor::Tensor;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::config::BenchSettings;
use crate::eval::fixed;
use crate::models::{build_model, Architecture, ModelSpec};
use crate::seeds::{self, tag};
use crate::signal::{window_samples, CHANNELS, DEFAULT_SAMPLE_RATE_HZ};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: Architecture,
    pub window_seconds: f64,
    pub parameters: usize,
    /// Median wall-clock time of one forward pass, in milliseconds.
    pub median_ms: f64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Random input batch for `arch`. Image models receive binary images, the
/// form of an unresized recurrence plot; the plot computation itself is
/// not timed.
fn bench_input(arch: Architecture, time_steps: usize, batch: usize, seed: u64) -> Result<Tensor> {
    let mut rng = seeds::rng(seed, &[tag::BENCH]);
    if arch.uses_images() {
        let data = (0..batch * time_steps * time_steps)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::new(vec![batch, time_steps, time_steps, 1], data)?)
    } else {
        let data = (0..batch * time_steps * CHANNELS.len())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Ok(Tensor::new(vec![batch, time_steps, CHANNELS.len()], data)?)
    }
}

/// Median eval-mode forward time per (model, window length), models
/// innermost. Every model is sized to `settings.budget`.
pub fn run_timing_bench(settings: &BenchSettings, seed: u64) -> Result<Vec<TimingRow>> {
    if settings.repetitions == 0 || settings.batch_size == 0 {
        return Err(Error::Config(
            "benchmark batch and repetitions must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    for &seconds in &settings.window_seconds {
        let t = window_samples(seconds, DEFAULT_SAMPLE_RATE_HZ);
        for &arch in &settings.models {
            let spec = if arch.uses_images() {
                ModelSpec::new(arch, t, 1)
            } else {
                ModelSpec::new(arch, t, CHANNELS.len())
            }
            .with_budget(settings.budget);
            let model = build_model(&spec, seed)?;
            let x = bench_input(arch, t, settings.batch_size, seed)?;
            for _ in 0..settings.warmup {
                model.predict_proba(&x)?;
            }
            let mut times = Vec::with_capacity(settings.repetitions);
            for _ in 0..settings.repetitions {
                let start = Instant::now();
                let p = model.predict_proba(&x)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(p);
            }
            rows.push(TimingRow {
                model: arch,
                window_seconds: seconds,
                parameters: model.count_parameters(),
                median_ms: median(times),
            });
        }
    }
    Ok(rows)
}

/// Table layout: one row per model, one median column per window length.
pub fn write_timing_csv<W: Write>(w: W, rows: &[TimingRow]) -> Result<()> {
    let mut models: Vec<Architecture> = Vec::new();
    let mut seconds: Vec<f64> = Vec::new();
    for r in rows {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
        if !seconds.contains(&r.window_seconds) {
            seconds.push(r.window_seconds);
        }
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["model".to_string(), "parameters".to_string()];
    header.extend(
        seconds
            .iter()
            .map(|s| format!("median_ms_{}s", fixed(*s, 0))),
    );
    out.write_record(&header)?;
    for m in models {
        let of_model: Vec<&TimingRow> = rows.iter().filter(|r| r.model == m).collect();
        let params: Vec<String> = of_model.iter().map(|r| r.parameters.to_string()).collect();
        let mut record = vec![m.to_string(), params.join("/")];
        for s in &seconds {
            let cell = of_model
                .iter()
                .find(|r| r.window_seconds == *s)
                .map_or(String::new(), |r| fixed(r.median_ms, 3));
            record.push(cell);
        }
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

/// Models ordered from fastest to slowest at `seconds`.
pub fn speed_ranking(rows: &[TimingRow], seconds: f64) -> Vec<Architecture> {
    let mut at: Vec<&TimingRow> = rows
        .iter()
        .filter(|r| r.window_seconds == seconds)
        .collect();
    at.sort_by(|a, b| a.median_ms.total_cmp(&b.median_ms));
    at.into_iter().map(|r| r.model).collect()
}
