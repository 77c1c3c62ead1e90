//! Classifier architectures, their parameter budgets, training and
//! inference.
//!
//! Every architecture ends in the same head: a dense layer with ReLU, batch
//! normalization, dropout and a dense softmax output.

pub mod attention;
pub mod budget;
mod train;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use drivestyle_tensor::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP};
use drivestyle_tensor::{
    BatchNorm, BatchStats, Conv1d, Conv2d, Dense, Init, Lstm, Mode, NnError, ParamId, ParamStore,
    Tape, Tensor, Var,
};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recurrence::{rp_to_image, window_jrp};
use crate::seeds::{self, tag};
use crate::signal::{windows_to_tensor, Window};

pub use attention::{
    attention_weights, positional_encoding, qkv_project, scaled_dot_attention, AttentionBlock,
};
pub use budget::{parameter_count, BUDGET_TOLERANCE};
pub use train::{train, write_history_csv, EpochRecord, History, TrainConfig};

/// Dropout rate used when a spec does not override it.
pub const DEFAULT_DROPOUT: f64 = 0.3;
/// Parameter budget shared by the timing comparison.
pub const DEFAULT_BUDGET: usize = 4700;
/// Rows per forward pass during batched inference.
const INFERENCE_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Cnn1d,
    Lstm,
    SelfAttention,
    JrpCnn,
    CnnLstm,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Cnn1d,
        Architecture::Lstm,
        Architecture::SelfAttention,
        Architecture::JrpCnn,
        Architecture::CnnLstm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Cnn1d => "cnn1d",
            Architecture::Lstm => "lstm",
            Architecture::SelfAttention => "self_attention",
            Architecture::JrpCnn => "jrp_cnn",
            Architecture::CnnLstm => "cnn_lstm",
        }
    }

    /// Whether the model consumes recurrence-plot images instead of raw
    /// windows.
    pub fn uses_images(self) -> bool {
        self == Architecture::JrpCnn
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

/// Architecture and layer sizes.
///
/// `time_steps × channels` is the window shape; for `jrp_cnn` it is the
/// image side and 1. `primary` is the width of the first block (filters,
/// hidden units or model dimension) and `dense` the width of the
/// classification head. `secondary` is the LSTM width of `cnn_lstm` and
/// unused elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub time_steps: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub primary: usize,
    pub dense: usize,
    #[serde(default)]
    pub secondary: usize,
    pub dropout_rate: Option<f64>,
    /// When set, `primary`/`dense` are solved to meet it at build time.
    pub budget: Option<usize>,
}

impl ModelSpec {
    /// Spec with default layer sizes for a window of `time_steps ×
    /// channels` (or an image of side `time_steps` for `jrp_cnn`).
    pub fn new(architecture: Architecture, time_steps: usize, channels: usize) -> Self {
        let (primary, dense, secondary, channels) = match architecture {
            Architecture::Cnn1d => (5, 75, 0, channels),
            Architecture::Lstm => (24, 51, 0, channels),
            Architecture::SelfAttention => (32, 35, 0, channels),
            Architecture::JrpCnn => (15, 108, 0, 1),
            Architecture::CnnLstm => (16, 32, 16, channels),
        };
        Self {
            architecture,
            time_steps,
            channels,
            n_classes: 3,
            primary,
            dense,
            secondary,
            dropout_rate: Some(DEFAULT_DROPOUT),
            budget: None,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn dropout(&self) -> f64 {
        self.dropout_rate.unwrap_or(0.0)
    }

    /// Validates the spec and, if a budget is set, solves the layer sizes.
    pub fn resolve(&self) -> Result<ModelSpec> {
        let mut spec = self.clone();
        if spec.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if spec.time_steps == 0 || spec.channels == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if let Some(rate) = spec.dropout_rate {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        match spec.architecture {
            Architecture::Cnn1d => {}
            Architecture::Lstm | Architecture::SelfAttention => {}
            Architecture::JrpCnn => {
                if spec.channels != 1 {
                    return Err(Error::Config("jrp_cnn takes single-channel images".into()));
                }
                let after_first = spec.time_steps / budget::JRP_KERNEL1;
                if after_first < budget::JRP_KERNEL2 {
                    return Err(Error::Config(format!(
                        "image side {} too small for the jrp_cnn kernels",
                        spec.time_steps
                    )));
                }
            }
            Architecture::CnnLstm => {
                if spec.time_steps < budget::CNN_LSTM_KERNEL {
                    return Err(Error::Config(format!(
                        "cnn_lstm needs at least {} time steps",
                        budget::CNN_LSTM_KERNEL
                    )));
                }
                if spec.budget.is_none() && spec.secondary == 0 {
                    return Err(Error::Config("cnn_lstm needs a positive LSTM width".into()));
                }
            }
        }
        if let Some(b) = spec.budget {
            spec = budget::solve(&spec, b)?;
        }
        if spec.primary == 0 || spec.dense == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(spec)
    }
}

/// Which layers run in training mode during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub batchnorm: Mode,
    pub dropout: Mode,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        batchnorm: Mode::Train,
        dropout: Mode::Train,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        batchnorm: Mode::Eval,
        dropout: Mode::Eval,
    };
    /// Dropout sampling for committee members with frozen normalization.
    pub const MC_DROPOUT: ForwardMode = ForwardMode {
        batchnorm: Mode::Eval,
        dropout: Mode::Train,
    };
}

#[derive(Clone, Debug)]
struct Head {
    fc: Dense,
    bn: BatchNorm,
    out: Dense,
}

#[derive(Clone, Debug)]
enum Body {
    Cnn1d {
        conv1: Conv1d,
        bn: BatchNorm,
        conv2: Conv1d,
        out: Dense,
    },
    Lstm {
        lstm: Lstm,
        head: Head,
    },
    SelfAttention {
        proj: Dense,
        w_q: ParamId,
        w_k: ParamId,
        w_v: ParamId,
        encoding: Tensor,
        head: Head,
    },
    JrpCnn {
        conv1: Conv2d,
        conv2: Conv2d,
        head: Head,
    },
    CnnLstm {
        conv: Conv1d,
        lstm: Lstm,
        head: Head,
    },
}

/// A built classifier: resolved spec, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    body: Body,
}

/// Output of a forward pass.
pub struct Forward {
    pub probs: Var,
    /// Batch statistics of the normalization layer in train mode.
    pub stats: Option<BatchStats>,
}

fn head(
    store: &mut ParamStore,
    input: usize,
    spec: &ModelSpec,
    rng: &mut seeds::Rng,
) -> Result<Head> {
    Ok(Head {
        fc: Dense::new(store, "fc", input, spec.dense, rng)?,
        bn: BatchNorm::new(store, "bn", spec.dense, rng)?,
        out: Dense::new(store, "out", spec.dense, spec.n_classes, rng)?,
    })
}

/// Builds a model with weights drawn from the generator seeded by `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let spec = spec.resolve()?;
    let mut rng = seeds::rng(seed, &[tag::INIT]);
    let mut store = ParamStore::new();
    let (t, c) = (spec.time_steps, spec.channels);
    let body = match spec.architecture {
        Architecture::Cnn1d => Body::Cnn1d {
            conv1: Conv1d::new(&mut store, "conv1", c, spec.primary, t, &mut rng)?,
            bn: BatchNorm::new(&mut store, "bn", spec.primary, &mut rng)?,
            conv2: Conv1d::new(&mut store, "conv2", spec.primary, spec.dense, 1, &mut rng)?,
            out: Dense::new(&mut store, "out", spec.dense, spec.n_classes, &mut rng)?,
        },
        Architecture::Lstm => Body::Lstm {
            lstm: Lstm::new(&mut store, "lstm", c, spec.primary, &mut rng)?,
            head: head(&mut store, spec.primary, &spec, &mut rng)?,
        },
        Architecture::SelfAttention => {
            let d = spec.primary;
            let proj = Dense::new(&mut store, "proj", c, d, &mut rng)?;
            let init = Init::FanInUniform { fan_in: d };
            let w_q = store.add("attn.w_q", &[d, d], init, &mut rng)?;
            let w_k = store.add("attn.w_k", &[d, d], init, &mut rng)?;
            let w_v = store.add("attn.w_v", &[d, d], init, &mut rng)?;
            Body::SelfAttention {
                proj,
                w_q,
                w_k,
                w_v,
                encoding: positional_encoding(t, d),
                head: head(&mut store, d, &spec, &mut rng)?,
            }
        }
        Architecture::JrpCnn => {
            let k = spec.primary;
            Body::JrpCnn {
                conv1: Conv2d::new(
                    &mut store,
                    "conv1",
                    1,
                    k,
                    budget::JRP_KERNEL1,
                    budget::JRP_KERNEL1,
                    &mut rng,
                )?,
                conv2: Conv2d::new(
                    &mut store,
                    "conv2",
                    k,
                    k,
                    budget::JRP_KERNEL2,
                    budget::JRP_STRIDE2,
                    &mut rng,
                )?,
                head: head(&mut store, k, &spec, &mut rng)?,
            }
        }
        Architecture::CnnLstm => Body::CnnLstm {
            conv: Conv1d::new(
                &mut store,
                "conv",
                c,
                spec.primary,
                budget::CNN_LSTM_KERNEL,
                &mut rng,
            )?,
            lstm: Lstm::new(&mut store, "lstm", spec.primary, spec.secondary, &mut rng)?,
            head: head(&mut store, spec.secondary, &spec, &mut rng)?,
        },
    };
    let model = Model { spec, store, body };
    debug_assert_eq!(model.count_parameters(), parameter_count(&model.spec));
    Ok(model)
}

impl Head {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        rate: f64,
        mode: ForwardMode,
        rng: &mut seeds::Rng,
    ) -> Result<Forward> {
        let h = self.fc.forward(tape, store, x)?;
        let h = tape.relu(h);
        let (h, stats) = self.bn.forward(tape, store, h, mode.batchnorm)?;
        let h = tape.dropout(h, rate, mode.dropout, rng)?;
        let logits = self.out.forward(tape, store, h)?;
        Ok(Forward {
            probs: tape.softmax(logits),
            stats,
        })
    }
}

impl Model {
    /// Sum of trainable tensor sizes.
    pub fn count_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Expected input tensor shape without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        let s = &self.spec;
        if s.architecture.uses_images() {
            vec![s.time_steps, s.time_steps, 1]
        } else {
            vec![s.time_steps, s.channels]
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.input_shape();
        if x.rank() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            return Err(Error::Data(format!(
                "{} expects inputs of shape [n, {}], got {:?}",
                self.spec.architecture,
                expected
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the network on `tape`, returning posteriors for `x`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: ForwardMode,
        rng: &mut seeds::Rng,
    ) -> Result<Forward> {
        self.forward_with(&self.store, tape, x, mode, rng)
    }

    /// [`Model::forward`] reading weights from `store`, which must have the
    /// layout of this model's own store.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        mode: ForwardMode,
        rng: &mut seeds::Rng,
    ) -> Result<Forward> {
        let rate = self.spec.dropout();
        let batch = tape.value(x).shape()[0];
        match &self.body {
            Body::Cnn1d {
                conv1,
                bn,
                conv2,
                out,
            } => {
                let h = conv1.forward(tape, store, x)?;
                let h = tape.relu(h);
                let (h, stats) = bn.forward(tape, store, h, mode.batchnorm)?;
                let h = conv2.forward(tape, store, h)?;
                let h = tape.relu(h);
                let h = tape.dropout(h, rate, mode.dropout, rng)?;
                let h = tape.reshape(h, vec![batch, self.spec.dense])?;
                let logits = out.forward(tape, store, h)?;
                Ok(Forward {
                    probs: tape.softmax(logits),
                    stats,
                })
            }
            Body::Lstm { lstm, head } => {
                let h = lstm.forward(tape, store, x)?;
                head.forward(tape, store, h, rate, mode, rng)
            }
            Body::SelfAttention {
                proj,
                w_q,
                w_k,
                w_v,
                encoding,
                head,
            } => {
                let (t, c, d) = (self.spec.time_steps, self.spec.channels, self.spec.primary);
                let flat = tape.reshape(x, vec![batch * t, c])?;
                let z = proj.forward(tape, store, flat)?;
                let z = tape.reshape(z, vec![batch, t, d])?;
                let pe = tape.constant(encoding.clone());
                let z = tape.add_broadcast(z, pe)?;
                let zf = tape.reshape(z, vec![batch * t, d])?;
                let project = |tape: &mut Tape, w: ParamId| -> Result<Var> {
                    let wv = tape.param(store, w);
                    let p = tape.matmul_nt(zf, wv)?;
                    Ok(tape.reshape(p, vec![batch, t, d])?)
                };
                let q = project(tape, *w_q)?;
                let k = project(tape, *w_k)?;
                let v = project(tape, *w_v)?;
                let scores = tape.bmm(q, k, true)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
                let weights = tape.softmax(scores);
                let attended = tape.bmm(weights, v, false)?;
                let h = tape.add(z, attended)?;
                let h = tape.relu(h);
                let pooled = tape.mean_axis1(h)?;
                head.forward(tape, store, pooled, rate, mode, rng)
            }
            Body::JrpCnn { conv1, conv2, head } => {
                let h = conv1.forward(tape, store, x)?;
                let h = tape.relu(h);
                let h = conv2.forward(tape, store, h)?;
                let h = tape.relu(h);
                let shape = tape.value(h).shape().to_vec();
                let h = tape.reshape(h, vec![batch, shape[1] * shape[2], shape[3]])?;
                let pooled = tape.mean_axis1(h)?;
                head.forward(tape, store, pooled, rate, mode, rng)
            }
            Body::CnnLstm { conv, lstm, head } => {
                let h = conv.forward(tape, store, x)?;
                let h = tape.relu(h);
                let h = lstm.forward(tape, store, h)?;
                head.forward(tape, store, h, rate, mode, rng)
            }
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let bn = match &self.body {
            Body::Cnn1d { bn, .. } => bn,
            Body::Lstm { head, .. }
            | Body::SelfAttention { head, .. }
            | Body::JrpCnn { head, .. }
            | Body::CnnLstm { head, .. } => &head.bn,
        };
        bn.update_running(&mut self.store, stats);
    }

    /// Zeroes the output layer so every posterior is uniform.
    pub fn zero_output_layer(&mut self) {
        let out = match &self.body {
            Body::Cnn1d { out, .. } => out,
            Body::Lstm { head, .. }
            | Body::SelfAttention { head, .. }
            | Body::JrpCnn { head, .. }
            | Body::CnnLstm { head, .. } => &head.out,
        };
        for id in [out.w, out.b] {
            self.store.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    fn predict_with(&self, x: &Tensor, mode: ForwardMode, rng: &mut seeds::Rng) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let k = self.spec.n_classes;
        let mut out = Vec::with_capacity(n * k);
        let mut tape = Tape::new();
        for start in (0..n).step_by(INFERENCE_BATCH) {
            let end = (start + INFERENCE_BATCH).min(n);
            tape.reset();
            let xv = tape.constant(x.slice_rows(start, end));
            let f = self.forward(&mut tape, xv, mode, rng)?;
            out.extend_from_slice(tape.value(f.probs).data());
        }
        Ok(Tensor::new(vec![n, k], out)?)
    }

    /// Posterior matrix `[n, n_classes]` in eval mode.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut rng = seeds::rng(0, &[]);
        self.predict_with(x, ForwardMode::EVAL, &mut rng)
    }

    /// Posteriors with dropout active and normalization frozen; each call
    /// with a fresh `rng` state draws a different sub-network.
    pub fn predict_proba_dropout(&self, x: &Tensor, rng: &mut seeds::Rng) -> Result<Tensor> {
        if self.spec.dropout_rate.is_none() {
            return Err(Error::Config(format!(
                "{} has no dropout layer to sample from",
                self.spec.architecture
            )));
        }
        self.predict_with(x, ForwardMode::MC_DROPOUT, rng)
    }

    /// Writes weights to `weights` and the spec as JSON to `spec_path`.
    pub fn save(&self, weights: &Path, spec_path: &Path) -> Result<()> {
        self.store.save(BufWriter::new(File::create(weights)?))?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(spec_path)?), &self.spec)?;
        Ok(())
    }

    pub fn load(weights: &Path, spec_path: &Path) -> Result<Model> {
        let spec: ModelSpec = serde_json::from_reader(BufReader::new(File::open(spec_path)?))?;
        let mut model = build_model(
            &ModelSpec {
                budget: None,
                ..spec
            },
            0,
        )?;
        model.store.load(BufReader::new(File::open(weights)?))?;
        Ok(model)
    }
}

/// Central-difference check of the cross-entropy gradient with respect to
/// every trainable weight of a freshly built model, on a random batch of
/// `batch` inputs in training mode with a fixed dropout mask.
pub fn gradient_check(spec: &ModelSpec, seed: u64, batch: usize) -> Result<GradCheckReport> {
    let mut model = build_model(spec, seed)?;
    let mut rng = seeds::rng(seed, &[tag::BENCH]);
    let mut shape = vec![batch];
    shape.extend(model.input_shape());
    let numel: usize = shape.iter().product();
    let x = Tensor::new(
        shape,
        (0..numel)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|i| i % model.spec.n_classes).collect();
    let mut store = std::mem::take(&mut model.store);
    let report = check_gradients(&mut store, DEFAULT_STEP, |tape, store| {
        let mut dropout_rng = seeds::rng(seed, &[tag::DROPOUT]);
        let xv = tape.constant(x.clone());
        let f = model
            .forward_with(store, tape, xv, ForwardMode::TRAIN, &mut dropout_rng)
            .map_err(|e| match e {
                Error::Nn(nn) => nn,
                other => NnError::State(other.to_string()),
            })?;
        tape.cross_entropy(f.probs, &labels)
    })?;
    model.store = store;
    Ok(report)
}

/// Per-channel JRP thresholds plus image side: everything needed to turn
/// scaled windows into `jrp_cnn` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTransform {
    pub epsilons: Vec<f64>,
    pub side: usize,
}

impl ImageTransform {
    /// Images `[n, side, side, 1]` of the windows' joint recurrence plots.
    pub fn apply(&self, windows: &[Window]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(windows.len() * self.side * self.side);
        for w in windows {
            let plot = window_jrp(w, &self.epsilons)?;
            data.extend(rp_to_image(&plot, self.side)?);
        }
        Ok(Tensor::new(
            vec![windows.len(), self.side, self.side, 1],
            data,
        )?)
    }
}

/// Model input for `windows`: `[n, T, C]` for sequence models or JRP images
/// when `images` is given.
pub fn model_input(windows: &[Window], images: Option<&ImageTransform>) -> Result<Tensor> {
    match images {
        Some(t) => t.apply(windows),
        None => windows_to_tensor(windows),
    }
}
