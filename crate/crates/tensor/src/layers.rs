//! Parameterized layers. Each layer registers its parameters in a
//! [`ParamStore`] under a name prefix and records its forward pass on a
//! [`Tape`].

use rand::Rng;

use crate::error::Result;
use crate::param::{Init, ParamId, ParamStore};
use crate::tape::{BatchStats, Mode, NormStats, Tape, Var};
use crate::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f64 = 0.9;

fn fan_in(n: usize) -> Init {
    Init::FanInUniform { fan_in: n }
}

/// Fully connected layer `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.weight"),
            &[input, output],
            fan_in(input),
            rng,
        )?;
        let b = store.add(&format!("{name}.bias"), &[output], fan_in(input), rng)?;
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

/// Valid 1-D convolution over `[batch, time, channels]` inputs.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub filters: usize,
    pub width: usize,
    pub channels: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        filters: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fi = width * channels;
        let kernel = store.add(
            &format!("{name}.kernel"),
            &[filters, width, channels],
            fan_in(fi),
            rng,
        )?;
        let bias = store.add(&format!("{name}.bias"), &[filters], fan_in(fi), rng)?;
        Ok(Self {
            kernel,
            bias,
            filters,
            width,
            channels,
        })
    }

    pub fn param_count(channels: usize, filters: usize, width: usize) -> usize {
        filters * width * channels + filters
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, k, b)
    }
}

/// Valid 2-D convolution over `[batch, h, w, channels]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub filters: usize,
    pub size: usize,
    pub channels: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        filters: usize,
        size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fi = size * size * channels;
        let kernel = store.add(
            &format!("{name}.kernel"),
            &[filters, size, size, channels],
            fan_in(fi),
            rng,
        )?;
        let bias = store.add(&format!("{name}.bias"), &[filters], fan_in(fi), rng)?;
        Ok(Self {
            kernel,
            bias,
            filters,
            size,
            channels,
            stride,
        })
    }

    pub fn param_count(channels: usize, filters: usize, size: usize) -> usize {
        filters * size * size * channels + filters
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, b, self.stride)
    }
}

/// Unidirectional LSTM returning the final hidden state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = fan_in(hidden);
        let w_ih = store.add(&format!("{name}.w_ih"), &[input, 4 * hidden], init, rng)?;
        let w_hh = store.add(&format!("{name}.w_hh"), &[hidden, 4 * hidden], init, rng)?;
        let bias = store.add(&format!("{name}.bias"), &[4 * hidden], init, rng)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b = tape.param(store, self.bias);
        tape.lstm(x, w_ih, w_hh, b)
    }
}

/// Batch normalization over the last axis with frozen running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
}

impl BatchNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gamma = store.add(
            &format!("{name}.gamma"),
            &[features],
            Init::Constant(1.0),
            rng,
        )?;
        let beta = store.add(
            &format!("{name}.beta"),
            &[features],
            Init::Constant(0.0),
            rng,
        )?;
        let running_mean =
            store.add_frozen(&format!("{name}.running_mean"), Tensor::zeros(&[features]))?;
        let running_var = store.add_frozen(
            &format!("{name}.running_var"),
            Tensor::full(&[features], 1.0),
        )?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            features,
        })
    }

    pub fn param_count(features: usize) -> usize {
        2 * features
    }

    /// Train mode returns the batch statistics; pass them to
    /// [`BatchNorm::update_running`] once the step is complete.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let stats = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: store.get(self.running_mean).value.data(),
                var: store.get(self.running_var).value.data(),
            },
        };
        tape.batchnorm(x, g, b, stats)
    }

    /// `running = momentum · running + (1 − momentum) · batch`.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        for (id, batch) in [
            (self.running_mean, &stats.mean),
            (self.running_var, &stats.var),
        ] {
            for (r, v) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                *r = BATCHNORM_MOMENTUM * *r + (1.0 - BATCHNORM_MOMENTUM) * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn declared_counts_match_registered_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Dense::new(&mut store, "d", 10, 5, &mut rng).unwrap();
        assert_eq!(store.trainable_count(), Dense::param_count(10, 5));

        let mut store = ParamStore::new();
        Conv1d::new(&mut store, "c", 8, 6, 100, &mut rng).unwrap();
        assert_eq!(store.trainable_count(), Conv1d::param_count(8, 6, 100));

        let mut store = ParamStore::new();
        Conv2d::new(&mut store, "c", 2, 3, 5, 1, &mut rng).unwrap();
        assert_eq!(store.trainable_count(), Conv2d::param_count(2, 3, 5));

        let mut store = ParamStore::new();
        Lstm::new(&mut store, "l", 8, 7, &mut rng).unwrap();
        assert_eq!(store.trainable_count(), Lstm::param_count(8, 7));

        let mut store = ParamStore::new();
        BatchNorm::new(&mut store, "bn", 4, &mut rng).unwrap();
        assert_eq!(store.trainable_count(), BatchNorm::param_count(4));
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, &mut rng).unwrap();
        bn.update_running(
            &mut store,
            &BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
        );
        assert!((store.get(bn.running_mean).value.data()[0] - 0.2).abs() < 1e-15);
        assert!((store.get(bn.running_var).value.data()[0] - 1.2).abs() < 1e-15);
    }
}
