//! `drivestyle` command-line experiment runner.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drivestyle_core::active::{run_al_experiment, AlConfig, Strategy};
use drivestyle_core::annotator::{annotate, write_annotations_csv, RuleThresholds};
use drivestyle_core::eval::curves::{
    aggregate_curves, read_curves_csv, write_curves_csv, write_summary_csv, write_summary_svg,
};
use drivestyle_core::eval::data::{
    experiment_traces, fit_reference_kde, generate_traces, windows_of,
};
use drivestyle_core::eval::passive::{load_windows, run_passive_experiment, write_passive_csv};
use drivestyle_core::eval::timing::{run_timing_bench, write_timing_csv};
use drivestyle_core::eval::{ExperimentConfig, WindowConfig};
use drivestyle_core::models::{
    build_model, model_input, train, write_history_csv, Architecture, ImageTransform, ModelSpec,
    TrainConfig,
};
use drivestyle_core::recurrence::{
    channel_epsilons, recurrence_plot, rp_to_image, window_jrp, write_pgm, EPSILON_STD_FRACTION,
};
use drivestyle_core::seeds::{self, tag};
use drivestyle_core::signal::{fit_scaler, read_trace_dir, write_trace};
use drivestyle_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "drivestyle",
    version,
    about = "Driving-style classification experiments"
)]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct WindowArgs {
    /// Window length in seconds.
    #[arg(long)]
    window_seconds: Option<f64>,
    /// Fraction of overlap between consecutive windows.
    #[arg(long)]
    overlap: Option<f64>,
}

impl WindowArgs {
    fn resolve(&self, default: WindowConfig) -> WindowConfig {
        WindowConfig {
            seconds: self.window_seconds.unwrap_or(default.seconds),
            overlap: self.overlap.unwrap_or(default.overlap),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic traces, one CSV per trace.
    Generate {
        /// Traces per style; by default enough for the configured window count.
        #[arg(long)]
        per_style: Option<usize>,
    },
    /// Label windows with the rule and density annotator.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Traces with ground-truth styles for fitting the densities.
        #[arg(long)]
        kde_train: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Train one model on all windows and save it.
    Train {
        #[arg(long)]
        model: Architecture,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Cross-validated comparison of the configured models.
    Passive {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated models; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        models: Vec<Architecture>,
    },
    /// Active-learning curves.
    Active {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        model: Option<Architecture>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also write an SVG chart of the mean curves.
        #[arg(long)]
        plot: bool,
    },
    /// Forward-pass timing of budget-matched models.
    Bench {
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Write recurrence plots of one window as PGM images.
    Rplot {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index of the window in the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Aggregate curve files into per-iteration mean and std.
    Curves {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        plot: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// The `--out` path, or `name` inside the configured output directory.
fn output_path(cli: &Cli, config: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let path = cli
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.join(name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn output_dir(cli: &Cli, config: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.join(name));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::Generate { per_style } => {
            let dir = output_dir(&cli, &config, "traces")?;
            let mut synthetic = config.synthetic.clone();
            synthetic.seed = config.seed;
            let traces = match per_style {
                Some(n) => generate_traces(&synthetic, *n)?,
                None => experiment_traces(&synthetic)?,
            };
            for t in &traces {
                write_trace(&dir, t)?;
            }
            println!("wrote {} traces to {}", traces.len(), dir.display());
        }
        Command::Annotate {
            input,
            kde_train,
            window,
        } => {
            let w = window.resolve(config.windows[0]);
            let reference = read_trace_dir(kde_train)?;
            let kde = fit_reference_kde(&windows_of(&reference, w.seconds, 0.0)?)?;
            let windows = windows_of(&read_trace_dir(input)?, w.seconds, w.overlap)?;
            let th = RuleThresholds::default();
            let rows = windows
                .iter()
                .map(|win| Ok((win.id(), annotate(win, &kde, &th)?)))
                .collect::<Result<Vec<_>>>()?;
            let path = output_path(&cli, &config, "labels.csv")?;
            write_annotations_csv(create(&path)?, &rows)?;
            println!("annotated {} windows into {}", rows.len(), path.display());
        }
        Command::Train {
            model,
            data,
            window,
        } => {
            if data.is_some() {
                config.dataset = data.clone();
            }
            let w = window.resolve(config.windows[0]);
            let windows = load_windows(&config, &w)?;
            let scaler = fit_scaler(&windows)?;
            let scaled = scaler.apply(&windows)?;
            let first = &windows[0];
            let images = model.uses_images().then(|| {
                channel_epsilons(&scaled, EPSILON_STD_FRACTION).map(|epsilons| ImageTransform {
                    epsilons,
                    side: first.length,
                })
            });
            let images = images.transpose()?;
            let mut spec = if model.uses_images() {
                ModelSpec::new(*model, first.length, 1)
            } else {
                ModelSpec::new(*model, first.length, first.channel_names.len())
            };
            spec.budget = config.budget;
            spec.dropout_rate = config.dropout_rate;
            let mut net = build_model(&spec, seeds::derive(config.seed, &[tag::INIT]))?;
            let x = model_input(&scaled, images.as_ref())?;
            let labels: Vec<usize> = windows
                .iter()
                .map(|w| {
                    w.label
                        .map(|l| l.index())
                        .ok_or_else(|| Error::Data("unlabeled window".into()))
                })
                .collect::<Result<_>>()?;
            let cfg = TrainConfig {
                seed: seeds::derive(config.seed, &[tag::TRAIN]),
                ..config.train.clone()
            };
            let history = train(&mut net, &x, &labels, &cfg)?;
            let dir = output_dir(&cli, &config, "model")?;
            net.save(&dir.join("model.weights"), &dir.join("model.json"))?;
            serde_json::to_writer_pretty(create(&dir.join("scaler.json"))?, &scaler)?;
            if let Some(t) = &images {
                serde_json::to_writer_pretty(create(&dir.join("images.json"))?, t)?;
            }
            write_history_csv(create(&dir.join("history.csv"))?, &history)?;
            println!(
                "trained {model} ({} parameters) for {} epochs, best epoch {}; saved to {}",
                net.count_parameters(),
                history.epochs.len(),
                history.best_epoch,
                dir.display()
            );
        }
        Command::Passive { data, models } => {
            if data.is_some() {
                config.dataset = data.clone();
            }
            if !models.is_empty() {
                config.models = models.clone();
            }
            let rows = run_passive_experiment(&config)?;
            let path = output_path(&cli, &config, "passive.csv")?;
            write_passive_csv(create(&path)?, &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Active {
            strategy,
            model,
            data,
            seeds: run_seeds,
            plot,
        } => {
            if data.is_some() {
                config.dataset = data.clone();
            }
            let strategies = strategy.map_or(config.active.strategies.clone(), |s| vec![s]);
            let models = model.map_or(config.active.models.clone(), |m| vec![m]);
            let run_seeds = if run_seeds.is_empty() {
                config.active.seeds.clone()
            } else {
                run_seeds.clone()
            };
            let windows = load_windows(&config, &config.active.window)?;
            let mut curves = Vec::new();
            for &m in &models {
                for &s in &strategies {
                    for &seed in &run_seeds {
                        let al = AlConfig {
                            strategy: s,
                            architecture: m,
                            seed,
                            train: config.train.clone(),
                            budget: config.budget,
                            dropout_rate: config.dropout_rate,
                            image_side: None,
                        };
                        curves.push(run_al_experiment(&windows, &al)?);
                    }
                }
            }
            let path = output_path(&cli, &config, "curves.csv")?;
            write_curves_csv(create(&path)?, &curves)?;
            if *plot {
                let summary = aggregate_curves(&curves)?;
                write_summary_svg(create(&path.with_extension("svg"))?, &summary)?;
            }
            println!("wrote {} curves to {}", curves.len(), path.display());
        }
        Command::Bench { repetitions } => {
            if let Some(r) = repetitions {
                config.bench.repetitions = *r;
            }
            let rows = run_timing_bench(&config.bench, config.seed)?;
            let path = output_path(&cli, &config, "timing.csv")?;
            write_timing_csv(create(&path)?, &rows)?;
            println!("wrote timings to {}", path.display());
        }
        Command::Rplot {
            data,
            index,
            window,
        } => {
            if data.is_some() {
                config.dataset = data.clone();
            }
            let w = window.resolve(config.windows[0]);
            let windows = load_windows(&config, &w)?;
            let target = windows.get(*index).ok_or_else(|| {
                Error::Config(format!(
                    "window index {index} outside {} windows",
                    windows.len()
                ))
            })?;
            let scaled = fit_scaler(&windows)?.apply(&windows)?;
            let eps = channel_epsilons(&scaled, EPSILON_STD_FRACTION)?;
            let dir = output_dir(&cli, &config, "rplot")?;
            let side = target.length;
            for (c, name) in target.channel_names.iter().enumerate() {
                let plot = recurrence_plot(&scaled[*index].data[c], eps[c])?;
                write_pgm(
                    create(&dir.join(format!("rp_{name}.pgm")))?,
                    &rp_to_image(&plot, side)?,
                    side,
                )?;
            }
            let joint = window_jrp(&scaled[*index], &eps)?;
            write_pgm(
                create(&dir.join("jrp.pgm"))?,
                &rp_to_image(&joint, side)?,
                side,
            )?;
            println!("wrote plots of window {} to {}", target.id(), dir.display());
        }
        Command::Curves { inputs, plot } => {
            let mut curves = Vec::new();
            for p in inputs {
                curves.extend(read_curves_csv(File::open(p)?)?);
            }
            let summary = aggregate_curves(&curves)?;
            let path = output_path(&cli, &config, "summary.csv")?;
            write_summary_csv(create(&path)?, &summary)?;
            if *plot {
                write_summary_svg(create(&path.with_extension("svg"))?, &summary)?;
            }
            println!("wrote {} summary rows to {}", summary.len(), path.display());
        }
    }
    Ok(())
}
