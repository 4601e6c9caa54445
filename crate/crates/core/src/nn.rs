//! Differentiable building blocks shared by the encoders and heads.

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::params::{Initializer, ParamId, ParamStore};

/// Affine map `x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.weight);
        let y = t.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }

    /// Sets the weight to zero (and the bias, when present).
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).fill(0.0);
        }
    }
}

/// Row-wise layer normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), in_dim, hidden, true),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, out_dim, true),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }
}

/// Scaled dot-product attention of `q` against `k`/`v`, returning the output and
/// the softmax weight matrix.
pub fn attend(t: &mut Tape, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = t.shape(q).1 as f64;
    let scores = t.matmul_t(q, k);
    let scores = t.scale(scores, 1.0 / d.sqrt());
    let weights = t.softmax_rows(scores);
    (t.matmul(weights, v), weights)
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    /// Output plus one attention-weight matrix per head.
    pub fn forward_with_weights(&self, t: &mut Tape, xq: Var, xkv: Var) -> (Var, Vec<Var>) {
        let q = self.q.forward(t, xq);
        let k = self.k.forward(t, xkv);
        let v = self.v.forward(t, xkv);
        let dh = self.q.out_dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, a, b);
            let kh = t.slice_cols(k, a, b);
            let vh = t.slice_cols(v, a, b);
            let (o, w) = attend(t, qh, kh, vh);
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        (self.out.forward(t, cat), weights)
    }

    pub fn forward(&self, t: &mut Tape, xq: Var, xkv: Var) -> Var {
        self.forward_with_weights(t, xq, xkv).0
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), dim, ffn_dim, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.norm1.forward(t, x);
        let a = self.attn.forward(t, h, h);
        let x = t.add(x, a);
        let h = self.norm2.forward(t, x);
        let f = self.ffn.forward(t, h);
        t.add(x, f)
    }

    /// Zeroes both residual branches so the block is the identity.
    pub fn zero_residuals(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ffn.down.zero(store);
    }
}
