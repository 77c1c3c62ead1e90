//! Scaled dot-product self-attention and sinusoidal positional encoding.
//!
//! Projections follow `Qᵀ = W_Q · Xᵀ`, i.e. `Q = X · W_Qᵀ` for row-wise
//! inputs `X ∈ ℝ^{n×d}`.

use drivestyle_tensor::{Tape, Tensor};

use crate::error::{Error, Result};

/// Square projection matrices of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub d: usize,
}

impl AttentionBlock {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let d = w_q.shape()[0];
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != [d, d] {
                return Err(Error::Config(format!(
                    "attention projections must all be {d}×{d}, got {:?}",
                    w.shape()
                )));
            }
        }
        Ok(Self { w_q, w_k, w_v, d })
    }
}

/// `(Q, K, V) = (X·W_Qᵀ, X·W_Kᵀ, X·W_Vᵀ)` for `X ∈ ℝ^{n×d}`.
pub fn qkv_project(x: &Tensor, block: &AttentionBlock) -> Result<(Tensor, Tensor, Tensor)> {
    if x.rank() != 2 || x.shape()[1] != block.d {
        return Err(Error::Dimension {
            what: "attention input width",
            expected: block.d,
            actual: *x.shape().last().unwrap_or(&0),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut project = |w: &Tensor| -> Result<Tensor> {
        let wv = tape.constant(w.clone());
        let out = tape.matmul_nt(xv, wv)?;
        Ok(tape.value(out).clone())
    };
    Ok((
        project(&block.w_q)?,
        project(&block.w_k)?,
        project(&block.w_v)?,
    ))
}

/// Row-wise `softmax(Q·Kᵀ/√d)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    check_pair(q, k)?;
    let d = q.shape()[1] as f64;
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let scores = tape.matmul_nt(qv, kv)?;
    let scaled = tape.scale(scores, 1.0 / d.sqrt());
    let w = tape.softmax(scaled);
    Ok(tape.value(w).clone())
}

/// `softmax(Q·Kᵀ/√d)·V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_pair(q, v)?;
    let weights = attention_weights(q, k)?;
    let mut tape = Tape::new();
    let wv = tape.constant(weights);
    let vv = tape.constant(v.clone());
    let out = tape.matmul(wv, vv)?;
    Ok(tape.value(out).clone())
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "attention operands must be equal n×d matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `p[t,i] = sin(t / 10000^{2j/d})` for even `i` and `cos(·)` for odd `i`,
/// with `j = ⌈i/2⌉` and dimensions indexed from 0.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for t in 0..n {
        for i in 0..d {
            let j = i.div_ceil(2);
            let angle = t as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![n.max(1), d.max(1)], data).expect("n, d ≥ 1")
}
