//! Pre-norm Transformer block shared by the backbone and the latent
//! generator: RMSNorm, multi-head self-attention with residual, RMSNorm,
//! ReLU feed-forward with residual. Weights are stored `[out x in]` in
//! `f32`; all arithmetic runs in `f64` on the tape.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};

pub const RMS_EPS: f64 = 1e-6;

/// Attention scores are offset by this at masked positions; exp() of the
/// shifted score underflows to exactly zero, so causality is exact.
const MASK_OFF: f64 = -1e30;

pub fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

pub fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

/// Normal(0, scale^2) init, deterministic under the caller's RNG.
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f32> {
    if scale == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0f64, scale).expect("positive scale");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng) as f32)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn_gain: Array2<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub ffn_gain: Array2<f32>,
    pub w1: Array2<f32>,
    pub w2: Array2<f32>,
}

impl BlockParams {
    pub fn init(dim: usize, d_ff: usize, init_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            attn_gain: Array2::ones((1, dim)),
            wq: normal_matrix(rng, dim, dim, init_scale),
            wk: normal_matrix(rng, dim, dim, init_scale),
            wv: normal_matrix(rng, dim, dim, init_scale),
            wo: normal_matrix(rng, dim, dim, init_scale),
            ffn_gain: Array2::ones((1, dim)),
            w1: normal_matrix(rng, d_ff, dim, init_scale),
            w2: normal_matrix(rng, dim, d_ff, init_scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.ncols()
    }

    /// Parameter views under `prefix`, in a fixed field order.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Array2<f32>)> {
        vec![
            (format!("{prefix}.attn_gain"), &self.attn_gain),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.ffn_gain"), &self.ffn_gain),
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.w2"), &self.w2),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<f32>)> {
        vec![
            (format!("{prefix}.attn_gain"), &mut self.attn_gain),
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.wo"), &mut self.wo),
            (format!("{prefix}.ffn_gain"), &mut self.ffn_gain),
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.w2"), &mut self.w2),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn_gain: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_gain: Var,
    pub w1: Var,
    pub w2: Var,
}

impl BlockVars {
    pub fn load(tape: &mut Tape, p: &BlockParams, trainable: bool) -> Self {
        let mut put = |a: &Array2<f32>| {
            if trainable {
                tape.leaf(to_f64(a))
            } else {
                tape.constant(to_f64(a))
            }
        };
        BlockVars {
            attn_gain: put(&p.attn_gain),
            wq: put(&p.wq),
            wk: put(&p.wk),
            wv: put(&p.wv),
            wo: put(&p.wo),
            ffn_gain: put(&p.ffn_gain),
            w1: put(&p.w1),
            w2: put(&p.w2),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.attn_gain"), self.attn_gain),
            (format!("{prefix}.wq"), self.wq),
            (format!("{prefix}.wk"), self.wk),
            (format!("{prefix}.wv"), self.wv),
            (format!("{prefix}.wo"), self.wo),
            (format!("{prefix}.ffn_gain"), self.ffn_gain),
            (format!("{prefix}.w1"), self.w1),
            (format!("{prefix}.w2"), self.w2),
        ]
    }
}

/// One pre-norm block over `x: [T x dim]`. `causal` masks attention above
/// the diagonal.
pub fn block_forward(tape: &mut Tape, v: &BlockVars, x: Var, heads: usize, causal: bool) -> Var {
    let (t_len, dim) = tape.value(x).dim();
    assert!(heads > 0 && dim % heads == 0, "heads {heads} must divide dim {dim}");
    let head_dim = dim / heads;

    let xn = tape.rms_norm(x, v.attn_gain, RMS_EPS);
    let q = tape.matmul_nt(xn, v.wq);
    let k = tape.matmul_nt(xn, v.wk);
    let val = tape.matmul_nt(xn, v.wv);

    let mask = if causal {
        let mut m = Array2::zeros((t_len, t_len));
        for r in 0..t_len {
            for c in r + 1..t_len {
                m[[r, c]] = MASK_OFF;
            }
        }
        Some(tape.constant(m))
    } else {
        None
    };

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(val, h * head_dim, head_dim);
        let raw = tape.matmul_nt(qh, kh);
        let mut scores = tape.scale(raw, 1.0 / (head_dim as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add(scores, m);
        }
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    let attn_out = tape.matmul_nt(merged, v.wo);
    let x = tape.add(x, attn_out);

    let xn2 = tape.rms_norm(x, v.ffn_gain, RMS_EPS);
    let pre = tape.matmul_nt(xn2, v.w1);
    let act = tape.relu(pre);
    let ffn_out = tape.matmul_nt(act, v.w2);
    tape.add(x, ffn_out)
}
