//! Recurrence plots, joint recurrence plots and their image form.

use std::io::Write;

use crate::error::{Error, Result};
use crate::signal::Window;

/// Default threshold as a multiple of the channel's training std.
pub const EPSILON_STD_FRACTION: f64 = 0.2;

/// Binary `n × n` matrix with `R[i,j] = 1` iff `|x_i − x_j| ≤ ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrencePlot {
    pub n: usize,
    /// Row-major bits.
    pub bits: Vec<bool>,
    /// Threshold used; `None` for a joint plot of several thresholds.
    pub epsilon: Option<f64>,
}

impl RecurrencePlot {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn ones(n: usize) -> Self {
        Self {
            n,
            bits: vec![true; n * n],
            epsilon: None,
        }
    }
}

pub fn recurrence_plot(signal: &[f64], epsilon: f64) -> Result<RecurrencePlot> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} must be non-negative"
        )));
    }
    let n = signal.len();
    if n == 0 {
        return Err(Error::Config("recurrence plot of an empty signal".into()));
    }
    let mut bits = vec![false; n * n];
    for i in 0..n {
        bits[i * n + i] = true;
        for j in i + 1..n {
            let hit = (signal[i] - signal[j]).abs() <= epsilon;
            bits[i * n + j] = hit;
            bits[j * n + i] = hit;
        }
    }
    Ok(RecurrencePlot {
        n,
        bits,
        epsilon: Some(epsilon),
    })
}

/// Elementwise AND of all plots.
pub fn joint_recurrence_plot(plots: &[RecurrencePlot]) -> Result<RecurrencePlot> {
    let first = plots
        .first()
        .ok_or_else(|| Error::Config("joint recurrence plot of no plots".into()))?;
    let mut bits = first.bits.clone();
    for p in &plots[1..] {
        if p.n != first.n {
            return Err(Error::Dimension {
                what: "recurrence plot side",
                expected: first.n,
                actual: p.n,
            });
        }
        for (b, q) in bits.iter_mut().zip(&p.bits) {
            *b &= *q;
        }
    }
    Ok(RecurrencePlot {
        n: first.n,
        bits,
        epsilon: if plots.len() == 1 {
            first.epsilon
        } else {
            None
        },
    })
}

/// Resizes a plot to `side × side`: block means when shrinking, nearest
/// neighbour when enlarging. Values lie in [0, 1].
pub fn rp_to_image(plot: &RecurrencePlot, side: usize) -> Result<Vec<f64>> {
    if side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let n = plot.n;
    let mut out = vec![0.0; side * side];
    if side <= n {
        let bounds: Vec<usize> = (0..=side).map(|b| b * n / side).collect();
        for bi in 0..side {
            for bj in 0..side {
                let (r0, r1, c0, c1) = (bounds[bi], bounds[bi + 1], bounds[bj], bounds[bj + 1]);
                let mut ones = 0usize;
                for i in r0..r1 {
                    ones += (c0..c1).filter(|&j| plot.get(i, j)).count();
                }
                out[bi * side + bj] = ones as f64 / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    } else {
        for i in 0..side {
            for j in 0..side {
                let (si, sj) = (i * n / side, j * n / side);
                out[i * side + j] = if plot.get(si, sj) { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(out)
}

/// Per-channel thresholds `fraction × std`, with the std pooled over all
/// samples of `training` windows.
pub fn channel_epsilons(training: &[Window], fraction: f64) -> Result<Vec<f64>> {
    let first = training
        .first()
        .ok_or_else(|| Error::Config("no training windows for epsilon estimation".into()))?;
    let c = first.channel_names.len();
    let mut eps = Vec::with_capacity(c);
    for ch in 0..c {
        let values = training.iter().flat_map(|w| w.data[ch].iter().copied());
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for v in values {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n;
        eps.push(fraction * (sq / n - mean * mean).max(0.0).sqrt());
    }
    Ok(eps)
}

/// Joint recurrence plot over every channel of `window`.
pub fn window_jrp(window: &Window, epsilons: &[f64]) -> Result<RecurrencePlot> {
    if epsilons.len() != window.data.len() {
        return Err(Error::Dimension {
            what: "channel thresholds",
            expected: window.data.len(),
            actual: epsilons.len(),
        });
    }
    let plots = window
        .data
        .iter()
        .zip(epsilons)
        .map(|(ch, &e)| recurrence_plot(ch, e))
        .collect::<Result<Vec<_>>>()?;
    joint_recurrence_plot(&plots)
}

/// Writes a binary PGM (P5) grayscale image; value 1 maps to white.
pub fn write_pgm<W: Write>(mut w: W, image: &[f64], side: usize) -> Result<()> {
    if image.len() != side * side {
        return Err(Error::Dimension {
            what: "image pixels",
            expected: side * side,
            actual: image.len(),
        });
    }
    write!(w, "P5\n{side} {side}\n255\n")?;
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}
