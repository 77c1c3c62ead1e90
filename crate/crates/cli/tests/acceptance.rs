//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! that timings are not disturbed by concurrent tests.
//!
//! `DRIVESTYLE_AL_SEEDS` overrides the number of active-learning seeds
//! (default 5); the three-seed smoke timing is reported either way.
//! `DRIVESTYLE_CRITERIA`, a comma-separated list of numbers, runs a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use drivestyle_core::active::{
    entropy_scores, kl_disagreement_scores, least_confidence_scores, margin_scores,
    run_al_experiment, vote_entropy_scores, AlConfig, LearningCurve, ProtocolSizes, Strategy,
    ITERATIONS,
};
use drivestyle_core::annotator::{compute_parameters, pearson};
use drivestyle_core::eval::data::windows_of;
use drivestyle_core::eval::passive::{load_windows, run_passive_experiment};
use drivestyle_core::eval::timing::{run_timing_bench, speed_ranking};
use drivestyle_core::eval::ExperimentConfig;
use drivestyle_core::models::{build_model, gradient_check, Architecture, ModelSpec};
use drivestyle_core::recurrence::{joint_recurrence_plot, recurrence_plot};
use drivestyle_core::signal::Style;
use drivestyle_core::synthgen::{generate_dataset, ScenarioConfig};
use drivestyle_tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use drivestyle_tensor::{
    BatchNorm, Conv1d, Conv2d, Dense, Init, Lstm, Mode, ParamId, ParamStore, Tape, Tensor, Var,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(number: usize, name: &str, seconds: f64, outcome: &Outcome) {
    println!(
        "criterion {number} {} {name}: {} ({seconds:.1} s)",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail
    );
}

// ---------------------------------------------------------------- 1

fn random_posteriors(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-6).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn tensor_of(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn first_argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

fn plogp_sum(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn measure_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let k = rng.random_range(2..6);
        let c = rng.random_range(2..7);
        let members: Vec<Vec<Vec<f64>>> =
            (0..c).map(|_| random_posteriors(&mut rng, n, k)).collect();
        let single = &members[0];
        let lc = least_confidence_scores(&tensor_of(single)).unwrap();
        let margin = margin_scores(&tensor_of(single)).unwrap();
        let entropy = entropy_scores(&tensor_of(single)).unwrap();
        let tensors: Vec<Tensor> = members.iter().map(|m| tensor_of(m)).collect();
        let votes = vote_entropy_scores(&tensors).unwrap();
        let kl = kl_disagreement_scores(&tensors).unwrap();
        for i in 0..n {
            let row = &single[i];
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let mut tally = vec![0.0; k];
            for m in &members {
                tally[first_argmax(&m[i])] += 1.0;
            }
            let consensus: Vec<f64> = (0..k)
                .map(|y| members.iter().map(|m| m[i][y]).sum::<f64>() / c as f64)
                .collect();
            let kl_oracle = members
                .iter()
                .map(|m| {
                    (0..k)
                        .map(|y| m[i][y] * (m[i][y] / consensus[y]).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / c as f64;
            let pairs = [
                (lc[i], 1.0 - sorted[0]),
                (margin[i], -(sorted[0] - sorted[1])),
                (entropy[i], plogp_sum(row.iter().copied())),
                (votes[i], plogp_sum(tally.iter().map(|v| v / c as f64))),
                (kl[i], kl_oracle),
            ];
            for (got, want) in pairs {
                worst = worst.max((got - want).abs());
            }
        }
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("largest deviation {worst:.2e} over 1000 posterior sets"),
    }
}

// ---------------------------------------------------------------- 2

const GRAD_SEEDS: u64 = 20;
const GRAD_TOLERANCE: f64 = 1e-4;

fn leaf(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
    store
        .add(name, shape, Init::FanInUniform { fan_in: 1 }, rng)
        .unwrap()
}

/// `Σ y ⊙ r` for a fixed pseudo-random `r`.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> drivestyle_tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = (0..tape.value(y).numel())
        .map(|i| ((i as f64 + 1.0) * 0.7 + seed as f64).sin())
        .collect();
    let r = tape.constant(Tensor::new(shape, r)?);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type LayerCheck = fn(u64) -> f64;

fn check_dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = leaf(&mut store, "x", &[4, 3], &mut rng);
    let layer = Dense::new(&mut store, "fc", 3, 2, &mut rng).unwrap();
    check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
        let xv = tape.param(store, x);
        let y = layer.forward(tape, store, xv)?;
        weighted_sum(tape, y, seed)
    })
    .unwrap()
    .max_relative_error
}

fn check_conv1d(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for width in [6, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = leaf(&mut store, "x", &[2, 6, 3], &mut rng);
        let conv = Conv1d::new(&mut store, "conv", 3, 4, width, &mut rng).unwrap();
        let r = check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
            let xv = tape.param(store, x);
            let y = conv.forward(tape, store, xv)?;
            weighted_sum(tape, y, seed)
        })
        .unwrap();
        worst = worst.max(r.max_relative_error);
    }
    worst
}

fn check_conv2d(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for stride in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = leaf(&mut store, "x", &[1, 7, 7, 1], &mut rng);
        let conv = Conv2d::new(&mut store, "conv", 1, 2, 3, stride, &mut rng).unwrap();
        let r = check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
            let xv = tape.param(store, x);
            let y = conv.forward(tape, store, xv)?;
            weighted_sum(tape, y, seed)
        })
        .unwrap();
        worst = worst.max(r.max_relative_error);
    }
    worst
}

fn check_lstm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = leaf(&mut store, "x", &[2, 5, 3], &mut rng);
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
    check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
        let xv = tape.param(store, x);
        let y = lstm.forward(tape, store, xv)?;
        weighted_sum(tape, y, seed)
    })
    .unwrap()
    .max_relative_error
}

fn check_batchnorm(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for mode in [Mode::Train, Mode::Eval] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = leaf(&mut store, "x", &[2, 3, 4], &mut rng);
        let bn = BatchNorm::new(&mut store, "bn", 4, &mut rng).unwrap();
        store.get_mut(bn.running_var).value = Tensor::full(&[4], 0.6);
        let r = check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
            let xv = tape.param(store, x);
            let (y, _) = bn.forward(tape, store, xv, mode)?;
            weighted_sum(tape, y, seed)
        })
        .unwrap();
        worst = worst.max(r.max_relative_error);
    }
    worst
}

fn check_attention(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = leaf(&mut store, "x", &[2, 4, 3], &mut rng);
    let [wq, wk, wv] = ["wq", "wk", "wv"].map(|n| leaf(&mut store, n, &[3, 3], &mut rng));
    check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
        let xv = tape.param(store, x);
        let flat = tape.reshape(xv, vec![8, 3])?;
        let project = |tape: &mut Tape, w: ParamId| -> drivestyle_tensor::Result<Var> {
            let wv = tape.param(store, w);
            let p = tape.matmul_nt(flat, wv)?;
            tape.reshape(p, vec![2, 4, 3])
        };
        let (q, k, v) = (project(tape, wq)?, project(tape, wk)?, project(tape, wv)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / 3f64.sqrt());
        let attn = tape.softmax(scores);
        let out = tape.bmm(attn, v, false)?;
        let pooled = tape.mean_axis1(out)?;
        weighted_sum(tape, pooled, seed)
    })
    .unwrap()
    .max_relative_error
}

fn check_activations_and_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = leaf(&mut store, "x", &[5, 3], &mut rng);
    let labels: Vec<usize> = (0..5).map(|i| (i + seed as usize) % 3).collect();
    check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let xv = tape.param(store, x);
        let s = tape.sigmoid(xv);
        let t = tape.tanh(xv);
        let r = tape.relu(xv);
        let m = tape.mul(s, t)?;
        let a = tape.add(m, r)?;
        let d = tape.dropout(a, 0.3, Mode::Train, &mut mask_rng)?;
        let p = tape.softmax(d);
        tape.cross_entropy(p, &labels)
    })
    .unwrap()
    .max_relative_error
}

/// Architectures shrunk below 1000 trainable parameters.
fn small_specs() -> Vec<ModelSpec> {
    Architecture::ALL
        .into_iter()
        .map(|arch| {
            let mut spec = match arch {
                Architecture::JrpCnn => ModelSpec::new(arch, 15, 1),
                Architecture::CnnLstm => ModelSpec::new(arch, 8, 3),
                _ => ModelSpec::new(arch, 6, 3),
            };
            spec.primary = 4;
            spec.dense = 5;
            spec.secondary = 4;
            spec
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let layers: [(&str, LayerCheck); 7] = [
        ("dense", check_dense),
        ("conv1d", check_conv1d),
        ("conv2d", check_conv2d),
        ("lstm", check_lstm),
        ("batchnorm", check_batchnorm),
        ("attention", check_attention),
        ("activations+dropout+loss", check_activations_and_loss),
    ];
    let mut worst = (0.0, String::new());
    let mut failures = Vec::new();
    let mut note = |label: String, err: f64| {
        if err > worst.0 {
            worst = (err, label.clone());
        }
        if err.is_nan() || err > GRAD_TOLERANCE {
            failures.push(label);
        }
    };
    for (name, check) in layers {
        for seed in 0..GRAD_SEEDS {
            note(format!("{name} seed {seed}"), check(seed));
        }
    }
    let mut too_large = Vec::new();
    for spec in small_specs() {
        let params = build_model(&spec, 0).unwrap().count_parameters();
        if params > 1000 {
            too_large.push(format!("{} has {params}", spec.architecture));
        }
        for seed in 0..GRAD_SEEDS {
            let r = gradient_check(&spec, seed, 6).unwrap();
            note(
                format!("{} seed {seed}", spec.architecture),
                r.max_relative_error,
            );
        }
    }
    Outcome {
        pass: failures.is_empty() && too_large.is_empty(),
        detail: format!(
            "7 layer groups and {} architectures over {GRAD_SEEDS} seeds, worst {:.2e} ({}){}{}",
            Architecture::ALL.len(),
            worst.0,
            worst.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {failures:?}")
            },
            if too_large.is_empty() {
                String::new()
            } else {
                format!(", oversized: {too_large:?}")
            },
        ),
    }
}

// ---------------------------------------------------------------- 3

fn recurrence_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let signal: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let eps = rng.random::<f64>();
        let mut brute = Vec::with_capacity(2500);
        for i in 0..50 {
            for j in 0..50 {
                brute.push((signal[i] - signal[j]).abs() <= eps);
            }
        }
        if recurrence_plot(&signal, eps).unwrap().bits != brute {
            mismatches += 1;
        }
    }
    let mut violations = 0;
    for _ in 0..100 {
        let count = rng.random_range(2..6);
        let plots: Vec<_> = (0..count)
            .map(|_| {
                let signal: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
                recurrence_plot(&signal, rng.random::<f64>() * 0.5).unwrap()
            })
            .collect();
        let joint = joint_recurrence_plot(&plots).unwrap();
        let monotone = plots
            .iter()
            .all(|p| joint.bits.iter().zip(&p.bits).all(|(j, b)| !*j || *b));
        if !monotone {
            violations += 1;
        }
    }
    Outcome {
        pass: mismatches == 0 && violations == 0,
        detail: format!("{mismatches} of 100 plots differ from the double loop, {violations} of 100 joint plots exceed an input"),
    }
}

// ---------------------------------------------------------------- 4

fn annotation_correlation() -> Outcome {
    let scenario = ScenarioConfig::cycling(600.0, 90.0, 0);
    let traces = generate_dataset(&Style::ALL, 2, &scenario, 21).unwrap();
    let windows = windows_of(&traces, 10.0, 0.0).unwrap();
    let ordinal: Vec<f64> = windows.iter().map(|w| w.label.unwrap().ordinal()).collect();
    let params: Vec<[f64; 5]> = windows
        .iter()
        .map(|w| compute_parameters(w).unwrap().as_array())
        .collect();
    let stats: Vec<(f64, f64)> = (0..5)
        .map(|j| {
            let column: Vec<f64> = params.iter().map(|p| p[j]).collect();
            pearson(&column, &ordinal).unwrap()
        })
        .collect();
    let mean_r = stats.iter().map(|s| s.0).sum::<f64>() / 5.0;
    let max_p = stats.iter().map(|s| s.1).fold(0.0, f64::max);
    Outcome {
        pass: windows.len() >= 300 && mean_r > 0.2 && max_p < 0.01,
        detail: format!(
            "{} windows, average r {mean_r:.3}, largest p {max_p:.2e}",
            windows.len()
        ),
    }
}

// ---------------------------------------------------------------- 5

fn passive_classification() -> Outcome {
    let config = ExperimentConfig::default();
    let rows = run_passive_experiment(&config).unwrap();
    let mut pass = rows.len() == 4 && rows.iter().all(|r| r.windows == 1000);
    let mut parts = Vec::new();
    for row in &rows {
        let floor = if row.model == Architecture::JrpCnn {
            0.45
        } else {
            0.85
        };
        pass &= row.accuracy >= floor;
        parts.push(format!("{} {:.3}", row.model, row.accuracy));
    }
    Outcome {
        pass,
        detail: format!("5-fold mean accuracy on 1000 windows: {}", parts.join(", ")),
    }
}

// ---------------------------------------------------------------- 6

fn mean_over_iterations_5_to_14(curves: &[&LearningCurve]) -> f64 {
    let per_seed: Vec<f64> = curves
        .iter()
        .map(|c| {
            let tail: Vec<f64> = c.points[4..].iter().map(|p| p.test_accuracy).collect();
            tail.iter().sum::<f64>() / tail.len() as f64
        })
        .collect();
    per_seed.iter().sum::<f64>() / per_seed.len() as f64
}

fn active_learning(seeds: u64) -> (Outcome, Vec<LearningCurve>, Option<f64>) {
    let config = ExperimentConfig::default();
    let windows = load_windows(&config, &config.active.window).unwrap();
    let models = [Architecture::Cnn1d, Architecture::Lstm];
    let strategies = [Strategy::Random, Strategy::Margin];
    let start = Instant::now();
    let mut smoke_seconds = None;
    let mut curves = Vec::new();
    for seed in 1..=seeds {
        for model in models {
            for strategy in strategies {
                let al = AlConfig {
                    strategy,
                    architecture: model,
                    seed,
                    train: config.train.clone(),
                    budget: config.budget,
                    dropout_rate: config.dropout_rate,
                    image_side: None,
                };
                curves.push(run_al_experiment(&windows, &al).unwrap());
            }
        }
        if seed == 3 {
            smoke_seconds = Some(start.elapsed().as_secs_f64());
        }
    }
    let gain = |model: Architecture| {
        let pick = |s: Strategy| -> Vec<&LearningCurve> {
            curves
                .iter()
                .filter(|c| c.model == model && c.strategy == s)
                .collect()
        };
        100.0
            * (mean_over_iterations_5_to_14(&pick(Strategy::Margin))
                - mean_over_iterations_5_to_14(&pick(Strategy::Random)))
    };
    let (cnn, lstm) = (gain(Architecture::Cnn1d), gain(Architecture::Lstm));
    let pass = (cnn >= 0.5 && lstm >= -1.0) || (lstm >= 0.5 && cnn >= -1.0);
    let outcome = Outcome {
        pass,
        detail: format!(
            "{seeds} seeds, margin minus random over iterations 5-14: cnn1d {cnn:+.2} pp, lstm {lstm:+.2} pp"
        ),
    };
    (outcome, curves, smoke_seconds)
}

// ---------------------------------------------------------------- 7

fn protocol_arithmetic(curves: &[LearningCurve]) -> Outcome {
    let sizes = ProtocolSizes::for_pool(1000).unwrap();
    let mut pass = sizes.labeled_after(ITERATIONS) == 800;
    for k in 1..=ITERATIONS {
        let expected = 0.15 + 0.05 * (k - 1) as f64;
        pass &= (sizes.labeled_fraction(k) - expected).abs() < 1e-12;
    }
    for c in curves {
        pass &= c.points.len() == 14;
        pass &= c.points.iter().enumerate().all(|(k, p)| {
            p.iteration == k + 1 && (p.labeled_fraction - (0.15 + 0.05 * k as f64)).abs() < 1e-12
        });
        pass &= c.points.last().map(|p| p.labeled_count) == Some(800);
    }
    Outcome {
        pass,
        detail: format!(
            "pool 1000: initial {}, batch {}, {} points from {:.2} to {:.2}, final count {}; checked on {} curves",
            sizes.initial,
            sizes.batch,
            ITERATIONS,
            sizes.labeled_fraction(1),
            sizes.labeled_fraction(ITERATIONS),
            sizes.labeled_after(ITERATIONS),
            curves.len()
        ),
    }
}

/// One single-epoch random-sampling run on the 1000-window pool.
fn quick_curve() -> LearningCurve {
    let config = ExperimentConfig::default();
    let windows = load_windows(&config, &config.active.window).unwrap();
    let mut al = AlConfig::default();
    al.train.max_epochs = 1;
    run_al_experiment(&windows, &al).unwrap()
}

// ---------------------------------------------------------------- 8

fn timing_ordering() -> Outcome {
    let mut settings = ExperimentConfig::default().bench;
    settings.window_seconds = vec![10.0];
    settings.batch_size = 5;
    let mut pass = true;
    let mut runs = Vec::new();
    for run in 0..3 {
        let rows = run_timing_bench(&settings, run).unwrap();
        pass &= rows.len() == 4 && rows.iter().all(|r| (4465..=4935).contains(&r.parameters));
        let ranking = speed_ranking(&rows, 10.0);
        pass &= ranking.first() == Some(&Architecture::Cnn1d)
            && ranking.last() == Some(&Architecture::SelfAttention);
        let cells: Vec<String> = ranking
            .iter()
            .map(|m| {
                let r = rows.iter().find(|r| r.model == *m).unwrap();
                format!("{m} {:.3} ms/{}", r.median_ms, r.parameters)
            })
            .collect();
        runs.push(format!("[{}]", cells.join(" < ")));
    }
    Outcome {
        pass,
        detail: runs.join(" "),
    }
}

// ---------------------------------------------------------------- 9

fn run_cli(out: &Path, config: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_drivestyle"))
        .current_dir(out)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&status.stderr)
        ))
    }
}

fn cli_session(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let config = dir.join("config.json");
    let body = serde_json::json!({
        "synthetic": {"n_windows": 120, "trace_seconds": 200.0, "reference_traces_per_style": 1},
        "models": ["cnn1d", "jrp_cnn"],
        "folds": 2,
        "seed": 11,
        "output_dir": "out",
        "train": {"max_epochs": 3},
        "active": {"strategies": ["random", "margin", "add-kl"], "models": ["cnn1d"], "seeds": [1, 2]}
    });
    fs::write(&config, body.to_string()).map_err(|e| e.to_string())?;
    run_cli(dir, &config, &["generate"])?;
    run_cli(
        dir,
        &config,
        &[
            "annotate",
            "--in",
            "out/traces",
            "--kde-train",
            "out/traces",
        ],
    )?;
    run_cli(dir, &config, &["train", "--model", "lstm"])?;
    run_cli(dir, &config, &["passive"])?;
    run_cli(dir, &config, &["active"])?;
    run_cli(dir, &config, &["curves", "--in", "out/curves.csv"])?;
    run_cli(dir, &config, &["rplot", "--index", "3"])?;
    let mut files = Vec::new();
    collect_outputs(&dir.join("out"), &dir.join("out"), &mut files).map_err(|e| e.to_string())?;
    files.sort();
    Ok(files)
}

fn collect_outputs(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, Vec<u8>)>,
) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path: PathBuf = entry?.path();
        if path.is_dir() {
            collect_outputs(root, &path, out)?;
        } else {
            let name = path.strip_prefix(root).unwrap().display().to_string();
            out.push((name, fs::read(&path)?));
        }
    }
    Ok(())
}

fn cli_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (cli_session(a.path()), cli_session(b.path())) {
        (Ok(first), Ok(second)) => {
            let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
            let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
            let differing: Vec<&str> = first
                .iter()
                .zip(&second)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.as_str())
                .collect();
            Outcome {
                pass: first.len() == second.len() && differing.is_empty() && csvs >= 5,
                detail: format!(
                    "{} output files ({csvs} CSV) from generate, annotate, train, passive, active, curves and rplot; differing: {differing:?}",
                    first.len()
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome {
            pass: false,
            detail: format!("command failed: {e}"),
        },
    }
}

// ----------------------------------------------------------------

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let value = f();
    (value, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let seeds: u64 = std::env::var("DRIVESTYLE_AL_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let selected: Option<Vec<usize>> = std::env::var("DRIVESTYLE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut all = true;
    let mut record = |number, name: &str, limit: f64, (mut outcome, seconds): (Outcome, f64)| {
        if seconds >= limit {
            outcome.pass = false;
            outcome
                .detail
                .push_str(&format!(", exceeded the {limit:.0} s limit"));
        }
        report(number, name, seconds, &outcome);
        all &= outcome.pass;
    };
    if wanted(1) {
        record(1, "measure oracles", 5.0, timed(measure_oracles));
    }
    if wanted(2) {
        record(2, "gradient suite", 120.0, timed(gradient_suite));
    }
    if wanted(3) {
        record(3, "recurrence oracle", 5.0, timed(recurrence_oracle));
    }
    if wanted(4) {
        record(
            4,
            "annotation correlation",
            30.0,
            timed(annotation_correlation),
        );
    }
    if wanted(5) {
        record(
            5,
            "passive classification",
            1200.0,
            timed(passive_classification),
        );
    }
    let mut curves = Vec::new();
    if wanted(6) {
        let ((mut outcome, run, smoke), seconds) = timed(|| active_learning(seeds));
        if let Some(smoke) = smoke {
            outcome
                .detail
                .push_str(&format!(", first 3 seeds took {smoke:.0} s"));
            if smoke >= 1800.0 {
                outcome.pass = false;
                outcome.detail.push_str(" (3-seed limit is 1800 s)");
            }
        }
        record(6, "active-learning benefit", 7200.0, (outcome, seconds));
        curves = run;
    }
    if wanted(7) {
        if curves.is_empty() {
            curves.push(quick_curve());
        }
        record(
            7,
            "protocol arithmetic",
            f64::INFINITY,
            timed(|| protocol_arithmetic(&curves)),
        );
    }
    if wanted(8) {
        record(8, "timing ordering", 120.0, timed(timing_ordering));
    }
    if wanted(9) {
        record(9, "cli determinism", f64::INFINITY, timed(cli_determinism));
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
