//! Transformer building blocks over [`Graph`]. Layers hold parameter ids
//! only; values live in the owning [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Xavier/Glorot uniform `fan_in × fan_out` matrix.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("consistent shape")
}

/// `rows × cols` samples from N(0, std²) via Box–Muller.
pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        data.push(std * r * t.cos());
        data.push(std * r * t.sin());
    }
    data.truncate(n);
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Dropout with its own RNG stream. `p == 0` disables it.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            p: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        g.dropout(x, self.p, &mut self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, d_in, d_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![1, d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::row(vec![1.0; d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![1, d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d, d_ff),
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        let h = drop.apply(g, h);
        self.outer.forward(g, h)
    }
}

/// Additive causal mask: `-inf` above the diagonal.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Output of one attention call: the projected result and each head's
/// `Lq × Lk` weight matrix.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "model width {d} not divisible by {heads} heads");
        MultiHeadAttention {
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: Var,
        memory: Var,
        mask: Option<&Tensor>,
    ) -> Result<Attended> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let d = g.value(q).cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add_const(scores, m)?;
            }
            let w = g.softmax(scores);
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok(Attended {
            output: self.o.forward(g, cat)?,
            weights,
        })
    }
}

/// Pre-norm encoder block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, d_ff: usize) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, d_ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Result<Var> {
        let n = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, n, n, None)?.output;
        let a = drop.apply(g, a);
        let h = g.add(x, a)?;
        let n = self.ln_ff.forward(g, h)?;
        let f = self.ff.forward(g, n, drop)?;
        let f = drop.apply(g, f);
        g.add(h, f)
    }
}

/// Pre-norm decoder block with causal self-attention and cross-attention.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, d_ff: usize) -> Self {
        DecoderLayer {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, heads),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, d_ff),
        }
    }

    /// Returns the block output and the per-head cross-attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        causal: &Tensor,
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let n = self.ln_self.forward(g, x)?;
        let a = self.self_attn.forward(g, n, n, Some(causal))?.output;
        let a = drop.apply(g, a);
        let h = g.add(x, a)?;
        let n = self.ln_cross.forward(g, h)?;
        let cross = self.cross_attn.forward(g, n, memory, None)?;
        let c = drop.apply(g, cross.output);
        let h = g.add(h, c)?;
        let n = self.ln_ff.forward(g, h)?;
        let f = self.ff.forward(g, n, drop)?;
        let f = drop.apply(g, f);
        Ok((g.add(h, f)?, cross.weights))
    }
}
