//! Multi-head attention over flattened spatial tokens.

use kineflow_tensor::{Float, Var};

use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// `[B, N, D] -> [B * h, N, D / h]`
fn split_heads<T: Float>(x: &Var<T>, h: usize) -> Var<T> {
    let s = x.shape().to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    x.reshape(vec![b, n, h, d / h]).permute(&[0, 2, 1, 3]).reshape(vec![b * h, n, d / h])
}

fn merge_heads<T: Float>(x: &Var<T>, b: usize, h: usize) -> Var<T> {
    let s = x.shape().to_vec();
    let (n, dh) = (s[1], s[2]);
    x.reshape(vec![b, h, n, dh]).permute(&[0, 2, 1, 3]).reshape(vec![b, n, h * dh])
}

impl MultiHeadAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        let mut lin = |s: &str| Linear::new(store, init, &format!("{name}.{s}"), dim, dim, 1.0);
        Self {
            heads,
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    /// Softmax attention weights `[B * h, Nq, Nk]`; every row sums to one.
    pub fn weights<T: Float>(&self, ctx: &Ctx<T>, query: &Var<T>, context: &Var<T>) -> Var<T> {
        let q = split_heads(&self.q.forward(ctx, query), self.heads);
        let k = split_heads(&self.k.forward(ctx, context), self.heads);
        let dh = q.shape()[2];
        q.matmul(&k.transpose(1, 2)).scale(1.0 / (dh as f64).sqrt()).softmax_last()
    }

    /// `query: [B, Nq, D]`, `context: [B, Nk, D]` to `[B, Nq, D]`.
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, query: &Var<T>, context: &Var<T>) -> Var<T> {
        let b = query.shape()[0];
        let a = self.weights(ctx, query, context);
        let v = split_heads(&self.v.forward(ctx, context), self.heads);
        self.o.forward(ctx, &merge_heads(&a.matmul(&v), b, self.heads))
    }
}

/// Post-norm transformer block: attention then a SiLU feed-forward, each
/// wrapped in a residual connection and layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl AttentionBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff1: Linear::new(store, init, &format!("{name}.ff1"), dim, ffn_mult * dim, 1.0),
            ff2: Linear::new(store, init, &format!("{name}.ff2"), ffn_mult * dim, dim, 1.0),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Var<T>, context: &Var<T>) -> Var<T> {
        let x = self.norm1.forward(ctx, &x.add(&self.attn.forward(ctx, x, context)));
        let ff = self.ff2.forward(ctx, &self.ff1.forward(ctx, &x).silu());
        self.norm2.forward(ctx, &x.add(&ff))
    }
}
