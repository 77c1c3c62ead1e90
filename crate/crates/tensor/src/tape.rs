//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during a forward pass. Values
//! live on the tape; callers hold lightweight [`Var`] handles. Parameters
//! enter the tape through [`Tape::param`], and [`Tape::backward`] adds
//! `d loss / d parameter` into the matching [`ParamStore`] gradients.

use rand::{Rng, RngExt};

use crate::error::{check_dim, check_rank, NnError, Result};
use crate::kernels::{gemm, gemm_nt, gemm_tn, sigmoid, softmax_row};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch-norm; `var` is unbiased.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    /// Output positions per sample (`out_time` or `out_h * out_w`).
    positions: usize,
    patch: usize,
    filters: usize,
}

struct LstmCache {
    batch: usize,
    time: usize,
    input: usize,
    hidden: usize,
    /// Activated gates per step, `[B, 4H]` in i, f, g, o order.
    gates: Vec<Vec<f64>>,
    /// Cell states `c_0 ..= c_T`.
    cells: Vec<Vec<f64>>,
    /// Hidden states `h_0 ..= h_T`.
    hiddens: Vec<Vec<f64>>,
    tanh_cells: Vec<Vec<f64>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        input: usize,
        output: usize,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    Conv {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        patches: Vec<f64>,
        /// For each patch element, the flat input offset it was copied from.
        gather: Vec<u32>,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        cache: Box<LstmCache>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout(Var, Vec<f64>),
    MeanAxis1 {
        a: Var,
        time: usize,
        width: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
        classes: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        check_rank("matmul", self.shape(a), 2)?;
        check_rank("matmul", self.shape(b), 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (kb, n) = if trans_b {
            (self.shape(b)[1], self.shape(b)[0])
        } else {
            (self.shape(b)[0], self.shape(b)[1])
        };
        check_dim("matmul", "inner", k, kb)?;
        let mut out = vec![0.0; m * n];
        if trans_b {
            gemm_nt(m, k, n, self.data(a), self.data(b), &mut out, false);
        } else {
            gemm(m, k, n, self.data(a), self.data(b), &mut out, false);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with `b[B,n,k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        check_rank("bmm", self.shape(a), 3)?;
        check_rank("bmm", self.shape(b), 3)?;
        let (batch, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
        check_dim("bmm", "batch", batch, self.shape(b)[0])?;
        let (kb, n) = if trans_b {
            (self.shape(b)[2], self.shape(b)[1])
        } else {
            (self.shape(b)[1], self.shape(b)[2])
        };
        check_dim("bmm", "inner", k, kb)?;
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, ai, bi, oi, false);
                } else {
                    gemm(m, k, n, ai, bi, oi, false);
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Fully connected layer: `x[R,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        check_rank("linear", self.shape(x), 2)?;
        check_rank("linear", self.shape(w), 2)?;
        let (rows, input) = (self.shape(x)[0], self.shape(x)[1]);
        check_dim("linear", "input features", self.shape(w)[0], input)?;
        let output = self.shape(w)[1];
        check_dim("linear", "bias", output, self.value(b).numel())?;
        let mut out = vec![0.0; rows * output];
        gemm(
            rows,
            input,
            output,
            self.data(x),
            self.data(w),
            &mut out,
            false,
        );
        let bias = self.data(b);
        for row in out.chunks_exact_mut(output) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![rows, output], out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                input,
                output,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape {
                op: "add",
                msg: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NnError::Shape {
                op: "add_broadcast",
                msg: format!("{sb:?} is not a suffix of {sa:?}"),
            });
        }
        let inner = self.value(b).numel();
        let bd = self.data(b);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape {
                op: "mul",
                msg: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale(a, factor),
            rg,
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let width = *self.shape(a).last().expect("rank >= 1");
        let mut out = vec![0.0; self.value(a).numel()];
        for (row, o) in self
            .data(a)
            .chunks_exact(width)
            .zip(out.chunks_exact_mut(width))
        {
            softmax_row(row, o);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Softmax(a, width),
            rg,
        )
    }

    /// Valid 1-D cross-correlation with stride 1.
    ///
    /// `x[B,T,C]`, `k[F,W,C]`, `b[F]` → `[B, T-W+1, F]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        check_rank("conv1d", self.shape(x), 3)?;
        check_rank("conv1d", self.shape(k), 3)?;
        let (batch, time, chans) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (filters, width) = (self.shape(k)[0], self.shape(k)[1]);
        check_dim("conv1d", "channels", chans, self.shape(k)[2])?;
        check_dim("conv1d", "bias", filters, self.value(b).numel())?;
        if width > time {
            return Err(NnError::Dimension {
                op: "conv1d",
                axis: "kernel width exceeds time",
                expected: time,
                actual: width,
            });
        }
        let out_time = time - width + 1;
        let patch = width * chans;
        let mut gather = Vec::with_capacity(batch * out_time * patch);
        for bi in 0..batch {
            for t in 0..out_time {
                let start = (bi * time + t) * chans;
                gather.extend((start..start + patch).map(|i| i as u32));
            }
        }
        let geom = ConvGeom {
            batch,
            positions: out_time,
            patch,
            filters,
        };
        let out = self.conv_common(x, k, b, geom, gather)?;
        Ok(self.reshape_owned(out, vec![batch, out_time, filters]))
    }

    /// Valid 2-D cross-correlation.
    ///
    /// `x[B,H,W,C]`, `k[F,KH,KW,C]`, `b[F]` → `[B, H', W', F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        check_rank("conv2d", self.shape(x), 4)?;
        check_rank("conv2d", self.shape(k), 4)?;
        if stride == 0 {
            return Err(NnError::Config("conv2d stride must be positive".into()));
        }
        let [batch, height, width, chans] = <[usize; 4]>::try_from(self.shape(x)).unwrap();
        let [filters, kh, kw, kc] = <[usize; 4]>::try_from(self.shape(k)).unwrap();
        check_dim("conv2d", "channels", chans, kc)?;
        check_dim("conv2d", "bias", filters, self.value(b).numel())?;
        if kh > height || kw > width {
            return Err(NnError::Dimension {
                op: "conv2d",
                axis: "kernel extent exceeds input",
                expected: height.min(width),
                actual: kh.max(kw),
            });
        }
        let out_h = (height - kh) / stride + 1;
        let out_w = (width - kw) / stride + 1;
        let patch = kh * kw * chans;
        let row_len = kw * chans;
        let mut gather = Vec::with_capacity(batch * out_h * out_w * patch);
        for bi in 0..batch {
            for i in 0..out_h {
                for j in 0..out_w {
                    for r in 0..kh {
                        let start = ((bi * height + i * stride + r) * width + j * stride) * chans;
                        gather.extend((start..start + row_len).map(|v| v as u32));
                    }
                }
            }
        }
        let geom = ConvGeom {
            batch,
            positions: out_h * out_w,
            patch,
            filters,
        };
        let out = self.conv_common(x, k, b, geom, gather)?;
        Ok(self.reshape_owned(out, vec![batch, out_h, out_w, filters]))
    }

    fn conv_common(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        gather: Vec<u32>,
    ) -> Result<Var> {
        let xd = self.data(x);
        let patches: Vec<f64> = gather.iter().map(|&i| xd[i as usize]).collect();
        let rows = geom.batch * geom.positions;
        let mut out = vec![0.0; rows * geom.filters];
        gemm_nt(
            rows,
            geom.patch,
            geom.filters,
            &patches,
            self.data(k),
            &mut out,
            false,
        );
        let bias = self.data(b);
        for row in out.chunks_exact_mut(geom.filters) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(k) || self.needs(b);
        let (patches, gather) = if rg {
            (patches, gather)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::new(vec![rows, geom.filters], out)?,
            Op::Conv {
                x,
                k,
                b,
                geom,
                patches,
                gather,
            },
            rg,
        ))
    }

    /// Single-layer unidirectional LSTM returning the last hidden state.
    ///
    /// `x[B,T,I]`, `w_ih[I,4H]`, `w_hh[H,4H]`, `b[4H]` → `[B,H]`. Gate
    /// columns are ordered input, forget, candidate, output. Initial hidden
    /// and cell states are zero.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        check_rank("lstm", self.shape(x), 3)?;
        check_rank("lstm", self.shape(w_ih), 2)?;
        check_rank("lstm", self.shape(w_hh), 2)?;
        let (batch, time, input) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let hidden = self.shape(w_hh)[0];
        let g4 = 4 * hidden;
        check_dim("lstm", "input features", self.shape(w_ih)[0], input)?;
        check_dim("lstm", "gate width (w_ih)", g4, self.shape(w_ih)[1])?;
        check_dim("lstm", "gate width (w_hh)", g4, self.shape(w_hh)[1])?;
        check_dim("lstm", "bias", g4, self.value(b).numel())?;

        let mut zx = vec![0.0; batch * time * g4];
        gemm(
            batch * time,
            input,
            g4,
            self.data(x),
            self.data(w_ih),
            &mut zx,
            false,
        );

        let rg = self.needs(x) || self.needs(w_ih) || self.needs(w_hh) || self.needs(b);
        let whh = self.data(w_hh);
        let bias = self.data(b);
        let mut h = vec![0.0; batch * hidden];
        let mut c = vec![0.0; batch * hidden];
        let mut cache = LstmCache {
            batch,
            time,
            input,
            hidden,
            gates: Vec::new(),
            cells: vec![c.clone()],
            hiddens: vec![h.clone()],
            tanh_cells: Vec::new(),
        };
        let mut z = vec![0.0; batch * g4];
        let mut tc = vec![0.0; batch * hidden];
        for t in 0..time {
            gemm(batch, hidden, g4, &h, whh, &mut z, false);
            for bi in 0..batch {
                let zrow = &mut z[bi * g4..(bi + 1) * g4];
                let xrow = &zx[(bi * time + t) * g4..(bi * time + t + 1) * g4];
                for ((zv, xv), bv) in zrow.iter_mut().zip(xrow).zip(bias) {
                    *zv += xv + bv;
                }
                for j in 0..hidden {
                    let i_g = sigmoid(zrow[j]);
                    let f_g = sigmoid(zrow[hidden + j]);
                    let g_g = zrow[2 * hidden + j].tanh();
                    let o_g = sigmoid(zrow[3 * hidden + j]);
                    zrow[j] = i_g;
                    zrow[hidden + j] = f_g;
                    zrow[2 * hidden + j] = g_g;
                    zrow[3 * hidden + j] = o_g;
                    let idx = bi * hidden + j;
                    c[idx] = f_g * c[idx] + i_g * g_g;
                    tc[idx] = c[idx].tanh();
                    h[idx] = o_g * tc[idx];
                    if !h[idx].is_finite() || !c[idx].is_finite() {
                        return Err(NnError::NonFinite {
                            op: "lstm",
                            step: t,
                        });
                    }
                }
            }
            if rg {
                cache.gates.push(z.clone());
                cache.cells.push(c.clone());
                cache.hiddens.push(h.clone());
                cache.tanh_cells.push(tc.clone());
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, hidden], h)?,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache: Box::new(cache),
            },
            rg,
        ))
    }

    /// Batch normalization over the last axis; all leading axes are pooled.
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can update running estimates. Eval mode uses the supplied
    /// running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let features = *self.shape(x).last().expect("rank >= 1");
        check_dim("batchnorm", "gamma", features, self.value(gamma).numel())?;
        check_dim("batchnorm", "beta", features, self.value(beta).numel())?;
        let n = self.value(x).numel() / features;
        let xd = self.data(x);
        let (mean, var, train) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(NnError::Config(
                        "batch normalization in train mode needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0; features];
                for row in xd.chunks_exact(features) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; features];
                for row in xd.chunks_exact(features) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                check_dim("batchnorm", "running mean", features, mean.len())?;
                check_dim("batchnorm", "running var", features, var.len())?;
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let mut xhat = vec![0.0; xd.len()];
        for (row, out) in xd
            .chunks_exact(features)
            .zip(xhat.chunks_exact_mut(features))
        {
            for j in 0..features {
                out[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, be) = (self.data(gamma), self.data(beta));
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(features) {
            for j in 0..features {
                row[j] = g[j] * row[j] + be[j];
            }
        }
        let batch_stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| v * n as f64 / (n as f64 - 1.0))
                .collect(),
        });
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_out = self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((var_out, batch_stats))
    }

    /// Inverted dropout. Eval mode and `rate == 0` are the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout(a, mask), rg))
    }

    /// Mean over axis 1 of a rank-3 tensor: `[B,T,D]` → `[B,D]`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        check_rank("mean_axis1", self.shape(a), 3)?;
        let (batch, time, width) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
        let mut out = vec![0.0; batch * width];
        for (bi, sample) in self.data(a).chunks_exact(time * width).enumerate() {
            let o = &mut out[bi * width..(bi + 1) * width];
            for row in sample.chunks_exact(width) {
                for (ov, v) in o.iter_mut().zip(row) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= time as f64);
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![batch, width], out)?,
            Op::MeanAxis1 { a, time, width },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn reshape_owned(&mut self, a: Var, shape: Vec<usize>) -> Var {
        self.reshape(a, shape).expect("element count preserved")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of the true class, with probabilities
    /// clamped at [`PROB_CLAMP`] before the log.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        check_rank("cross_entropy", self.shape(p), 2)?;
        let (batch, classes) = (self.shape(p)[0], self.shape(p)[1]);
        check_dim("cross_entropy", "batch", batch, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Index {
                index: bad,
                classes,
            });
        }
        Ok(self.push(
            Tensor::scalar(cross_entropy_value(self.data(p), labels, classes)),
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
                classes,
            },
            self.needs(p),
        ))
    }

    /// Propagates `d loss / d node` back through the tape and accumulates
    /// parameter gradients into `store`. The tape must be [`reset`] before
    /// another backward pass.
    ///
    /// [`reset`]: Tape::reset
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(NnError::State(
                "backward called twice without resetting the tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(NnError::Shape {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if self.needs(a) {
                    let da = self.grad_buf(grads, a);
                    if trans_b {
                        gemm(m, n, k, g, self.data(b), da, true);
                    } else {
                        gemm_nt(m, n, k, g, self.data(b), da, true);
                    }
                }
                if self.needs(b) {
                    let db = self.grad_buf(grads, b);
                    if trans_b {
                        gemm_tn(n, m, k, g, self.data(a), db, true);
                    } else {
                        gemm_tn(k, m, n, self.data(a), g, db, true);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let da = self.grad_buf(grads, a);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            gemm(m, n, k, gi, bi, dai, true);
                        } else {
                            gemm_nt(m, n, k, gi, bi, dai, true);
                        }
                    }
                }
                if self.needs(b) {
                    let db = self.grad_buf(grads, b);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm_tn(n, m, k, gi, ai, dbi, true);
                        } else {
                            gemm_tn(k, m, n, ai, gi, dbi, true);
                        }
                    }
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                input,
                output,
            } => {
                if self.needs(x) {
                    let dx = self.grad_buf(grads, x);
                    gemm_nt(rows, output, input, g, self.data(w), dx, true);
                }
                if self.needs(w) {
                    let dw = self.grad_buf(grads, w);
                    gemm_tn(input, rows, output, self.data(x), g, dw, true);
                }
                if self.needs(b) {
                    let db = self.grad_buf(grads, b);
                    column_sums_into(g, output, db);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(self.grad_buf(grads, v), g);
                    }
                }
            }
            &Op::AddBroadcast(a, b) => {
                if self.needs(a) {
                    add_into(self.grad_buf(grads, a), g);
                }
                if self.needs(b) {
                    let inner = self.value(b).numel();
                    column_sums_into(g, inner, self.grad_buf(grads, b));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bd = self.data(b);
                    let da = self.grad_buf(grads, a);
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let db = self.grad_buf(grads, b);
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale(a, f) => {
                let da = self.grad_buf(grads, a);
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * f;
                }
            }
            &Op::Relu(a) => {
                let y = node.value.data();
                let da = self.grad_buf(grads, a);
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    if *yv > 0.0 {
                        *d += gv;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = self.grad_buf(grads, a);
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                let da = self.grad_buf(grads, a);
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
            &Op::Softmax(a, width) => {
                let y = node.value.data();
                let da = self.grad_buf(grads, a);
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(width)
                    .zip(g.chunks_exact(width))
                    .zip(y.chunks_exact(width))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Conv {
                x,
                k,
                b,
                geom,
                patches,
                gather,
            } => {
                let rows = geom.batch * geom.positions;
                if self.needs(*k) {
                    let dk = self.grad_buf(grads, *k);
                    gemm_tn(geom.filters, rows, geom.patch, g, patches, dk, true);
                }
                if self.needs(*b) {
                    column_sums_into(g, geom.filters, self.grad_buf(grads, *b));
                }
                if self.needs(*x) {
                    let mut dp = vec![0.0; rows * geom.patch];
                    gemm(
                        rows,
                        geom.filters,
                        geom.patch,
                        g,
                        self.data(*k),
                        &mut dp,
                        false,
                    );
                    let dx = self.grad_buf(grads, *x);
                    for (&src, v) in gather.iter().zip(&dp) {
                        dx[src as usize] += v;
                    }
                }
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache,
            } => self.lstm_backward(g, grads, (*x, *w_ih, *w_hh, *b), cache),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let features = inv_std.len();
                let n = xhat.len() / features;
                let gam = self.data(*gamma);
                let mut sum_dy = vec![0.0; features];
                let mut sum_dy_xhat = vec![0.0; features];
                for (grow, xrow) in g.chunks_exact(features).zip(xhat.chunks_exact(features)) {
                    for j in 0..features {
                        sum_dy[j] += grow[j];
                        sum_dy_xhat[j] += grow[j] * xrow[j];
                    }
                }
                if self.needs(*gamma) {
                    add_into(self.grad_buf(grads, *gamma), &sum_dy_xhat);
                }
                if self.needs(*beta) {
                    add_into(self.grad_buf(grads, *beta), &sum_dy);
                }
                if self.needs(*x) {
                    let dx = self.grad_buf(grads, *x);
                    let nf = n as f64;
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(features)
                        .zip(g.chunks_exact(features))
                        .zip(xhat.chunks_exact(features))
                    {
                        for j in 0..features {
                            let s = gam[j] * inv_std[j];
                            drow[j] += if *train {
                                s * (grow[j] - sum_dy[j] / nf - xrow[j] * sum_dy_xhat[j] / nf)
                            } else {
                                s * grow[j]
                            };
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let da = self.grad_buf(grads, *a);
                for ((d, gv), m) in da.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
            &Op::MeanAxis1 { a, time, width } => {
                let da = self.grad_buf(grads, a);
                let inv = 1.0 / time as f64;
                for (bi, sample) in da.chunks_exact_mut(time * width).enumerate() {
                    let grow = &g[bi * width..(bi + 1) * width];
                    for row in sample.chunks_exact_mut(width) {
                        for (d, gv) in row.iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            &Op::Reshape(a) => add_into(self.grad_buf(grads, a), g),
            &Op::Sum(a) => {
                let da = self.grad_buf(grads, a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::CrossEntropy { p, labels, classes } => {
                let pd = self.data(*p);
                let scale = g[0] / labels.len() as f64;
                let dp = self.grad_buf(grads, *p);
                for (row, &label) in labels.iter().enumerate() {
                    let prob = pd[row * classes + label];
                    if prob > PROB_CLAMP {
                        dp[row * classes + label] -= scale / prob;
                    }
                }
            }
        }
    }

    fn lstm_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (x, w_ih, w_hh, b): (Var, Var, Var, Var),
        cache: &LstmCache,
    ) {
        let LstmCache {
            batch,
            time,
            input,
            hidden,
            ..
        } = *cache;
        let g4 = 4 * hidden;
        let whh = self.data(w_hh);
        let mut dh = g.to_vec();
        let mut dc = vec![0.0; batch * hidden];
        let mut dz_all = vec![0.0; batch * time * g4];
        let mut dz = vec![0.0; batch * g4];
        let mut dwhh = vec![0.0; hidden * g4];
        for t in (0..time).rev() {
            let gates = &cache.gates[t];
            let c_prev = &cache.cells[t];
            let tc = &cache.tanh_cells[t];
            for bi in 0..batch {
                for j in 0..hidden {
                    let idx = bi * hidden + j;
                    let base = bi * g4;
                    let i_g = gates[base + j];
                    let f_g = gates[base + hidden + j];
                    let g_g = gates[base + 2 * hidden + j];
                    let o_g = gates[base + 3 * hidden + j];
                    let dcj = dc[idx] + dh[idx] * o_g * (1.0 - tc[idx] * tc[idx]);
                    let d_o = dh[idx] * tc[idx];
                    dz[base + j] = dcj * g_g * i_g * (1.0 - i_g);
                    dz[base + hidden + j] = dcj * c_prev[idx] * f_g * (1.0 - f_g);
                    dz[base + 2 * hidden + j] = dcj * i_g * (1.0 - g_g * g_g);
                    dz[base + 3 * hidden + j] = d_o * o_g * (1.0 - o_g);
                    dc[idx] = dcj * f_g;
                }
                let row = (bi * time + t) * g4;
                dz_all[row..row + g4].copy_from_slice(&dz[bi * g4..(bi + 1) * g4]);
            }
            gemm_tn(hidden, batch, g4, &cache.hiddens[t], &dz, &mut dwhh, true);
            gemm_nt(batch, g4, hidden, &dz, whh, &mut dh, false);
        }
        if self.needs(w_hh) {
            add_into(self.grad_buf(grads, w_hh), &dwhh);
        }
        if self.needs(b) {
            column_sums_into(&dz_all, g4, self.grad_buf(grads, b));
        }
        if self.needs(w_ih) {
            let dw = self.grad_buf(grads, w_ih);
            gemm_tn(input, batch * time, g4, self.data(x), &dz_all, dw, true);
        }
        if self.needs(x) {
            let dx = self.grad_buf(grads, x);
            gemm_nt(batch * time, g4, input, &dz_all, self.data(w_ih), dx, true);
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

pub(crate) fn cross_entropy_value(p: &[f64], labels: &[usize], classes: usize) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(row, &l)| -p[row * classes + l].max(PROB_CLAMP).ln())
        .sum();
    total / labels.len() as f64
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn column_sums_into(g: &[f64], width: usize, dst: &mut [f64]) {
    for row in g.chunks_exact(width) {
        add_into(dst, row);
    }
}
