//! Learning-curve files, their per-iteration aggregation and an SVG chart.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::active::{CurvePoint, LearningCurve, Strategy};
use crate::error::{Error, Result};
use crate::eval::fixed;
use crate::models::Architecture;

pub const CURVE_HEADER: [&str; 6] = [
    "strategy",
    "model",
    "seed",
    "iteration",
    "labeled_fraction",
    "test_accuracy",
];

pub fn write_curves_csv<W: Write>(w: W, curves: &[LearningCurve]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for c in curves {
        for p in &c.points {
            out.write_record([
                c.strategy.to_string(),
                c.model.to_string(),
                c.seed.to_string(),
                p.iteration.to_string(),
                fixed(p.labeled_fraction, 4),
                fixed(p.test_accuracy, 6),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct CurveRecord {
    strategy: String,
    model: String,
    seed: u64,
    iteration: usize,
    labeled_fraction: f64,
    test_accuracy: f64,
}

/// Reads curves written by [`write_curves_csv`]; selection ids are not
/// stored and come back empty.
pub fn read_curves_csv<R: Read>(r: R) -> Result<Vec<LearningCurve>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut curves: Vec<LearningCurve> = Vec::new();
    for record in reader.deserialize() {
        let rec: CurveRecord = record?;
        let strategy: Strategy = rec.strategy.parse().map_err(|_| {
            Error::Data(format!("unknown strategy `{}` in curve file", rec.strategy))
        })?;
        let model: Architecture = rec
            .model
            .parse()
            .map_err(|_| Error::Data(format!("unknown model `{}` in curve file", rec.model)))?;
        let point = CurvePoint {
            iteration: rec.iteration,
            labeled_count: 0,
            labeled_fraction: rec.labeled_fraction,
            test_accuracy: rec.test_accuracy,
        };
        match curves
            .iter_mut()
            .find(|c| c.strategy == strategy && c.model == model && c.seed == rec.seed)
        {
            Some(c) => c.points.push(point),
            None => curves.push(LearningCurve {
                strategy,
                model,
                seed: rec.seed,
                points: vec![point],
                test_ids: Vec::new(),
                initial_ids: Vec::new(),
                batches: Vec::new(),
            }),
        }
    }
    Ok(curves)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub model: Architecture,
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub mean_accuracy: f64,
    /// Population standard deviation over seeds.
    pub std_accuracy: f64,
    pub seeds: usize,
}

/// Mean and standard deviation per (strategy, model, iteration). Curves of
/// one (strategy, model) must share their iteration grid.
pub fn aggregate_curves(curves: &[LearningCurve]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(Strategy, Architecture), Vec<&LearningCurve>> = BTreeMap::new();
    for c in curves {
        groups.entry((c.strategy, c.model)).or_default().push(c);
    }
    let mut rows = Vec::new();
    for ((strategy, model), group) in groups {
        let grid: Vec<(usize, f64)> = group[0]
            .points
            .iter()
            .map(|p| (p.iteration, p.labeled_fraction))
            .collect();
        for c in &group[1..] {
            let other: Vec<(usize, f64)> = c
                .points
                .iter()
                .map(|p| (p.iteration, p.labeled_fraction))
                .collect();
            if other.len() != grid.len()
                || other
                    .iter()
                    .zip(&grid)
                    .any(|(a, b)| a.0 != b.0 || (a.1 - b.1).abs() > 1e-9)
            {
                return Err(Error::Data(format!(
                    "{strategy}/{model}: seed {} has a different iteration grid from seed {}",
                    c.seed, group[0].seed
                )));
            }
        }
        for (j, &(iteration, labeled_fraction)) in grid.iter().enumerate() {
            let accs: Vec<f64> = group.iter().map(|c| c.points[j].test_accuracy).collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            rows.push(SummaryRow {
                strategy,
                model,
                iteration,
                labeled_fraction,
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                seeds: group.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy",
        "model",
        "iteration",
        "labeled_fraction",
        "mean_accuracy",
        "std_accuracy",
        "seeds",
    ])?;
    for r in rows {
        out.write_record([
            r.strategy.to_string(),
            r.model.to_string(),
            r.iteration.to_string(),
            fixed(r.labeled_fraction, 4),
            fixed(r.mean_accuracy, 6),
            fixed(r.std_accuracy, 6),
            r.seeds.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of mean accuracy against labeled fraction, one line per
/// (strategy, model).
pub fn write_summary_svg<W: Write>(mut w: W, rows: &[SummaryRow]) -> Result<()> {
    let (width, height, margin) = (640.0, 400.0, 50.0);
    let (x0, x1) = (0.1, 0.85);
    let lo = rows
        .iter()
        .map(|r| r.mean_accuracy - r.std_accuracy)
        .fold(f64::INFINITY, f64::min);
    let y0 = if lo.is_finite() {
        (lo * 10.0).floor() / 10.0
    } else {
        0.0
    }
    .clamp(0.0, 0.9);
    let y1 = 1.0;
    let px = |x: f64| margin + (x - x0) / (x1 - x0) * (width - 2.0 * margin);
    let py = |y: f64| height - margin - (y - y0) / (y1 - y0) * (height - 2.0 * margin);

    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        w,
        r#"<line x1="{m}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b:.1}" stroke="black"/>"#,
        m = margin,
        b = height - margin,
        r = width - margin
    )?;
    for k in 0..=7 {
        let x = 0.15 + 0.1 * k as f64;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}%</text>"#,
            px(x),
            height - margin + 16.0,
            x * 100.0
        )?;
    }
    let steps = ((y1 - y0) / 0.05).round() as usize;
    for k in 0..=steps {
        let y = y0 + 0.05 * k as f64;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            margin - 6.0,
            py(y) + 4.0,
            y
        )?;
    }
    let mut series: Vec<(Strategy, Architecture)> = Vec::new();
    for r in rows {
        if !series.contains(&(r.strategy, r.model)) {
            series.push((r.strategy, r.model));
        }
    }
    for (i, (strategy, model)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = rows
            .iter()
            .filter(|r| r.strategy == *strategy && r.model == *model)
            .map(|r| format!("{:.1},{:.1}", px(r.labeled_fraction), py(r.mean_accuracy)))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )?;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{strategy} / {model}</text>"#,
            width - margin - 120.0,
            height - margin - 12.0 - 14.0 * i as f64
        )?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}
