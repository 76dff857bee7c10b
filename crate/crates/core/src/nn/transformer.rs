//! Post-norm transformer encoder block: masked multi-head self-attention and a
//! position-wise feed-forward network, each wrapped in residual + layer norm.

use rand::Rng;

use super::layers::{Ctx, LayerNorm, Linear};
use crate::graph::Var;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
    qkv: Linear,
    out: Linear,
    norm1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dim % heads == 0, "model dim must be divisible by head count");
        Self {
            heads,
            dim,
            dropout,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), dim, dim, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), dim, ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), ffn, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    /// `x` is `[t, dim]`; `mask[j] == false` hides position `j` from every query.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: Option<&[bool]>) -> Var {
        self.forward_with_attention(ctx, x, mask).0
    }

    /// Also returns each head's `[t, t]` attention matrix.
    pub fn forward_with_attention(&self, ctx: &mut Ctx, x: Var, mask: Option<&[bool]>) -> (Var, Vec<Var>) {
        let hd = self.dim / self.heads;
        let qkv = self.qkv.forward(ctx, x);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = ctx.g.slice_cols(qkv, h * hd, (h + 1) * hd);
            let k = ctx.g.slice_cols(qkv, self.dim + h * hd, self.dim + (h + 1) * hd);
            let v = ctx.g.slice_cols(qkv, 2 * self.dim + h * hd, 2 * self.dim + (h + 1) * hd);
            let scores = ctx.g.matmul_t(q, k);
            let scores = ctx.g.scale(scores, scale);
            let w = ctx.g.softmax_rows(scores, mask);
            attn.push(w);
            let w = ctx.g.dropout(w, self.dropout);
            heads.push(ctx.g.matmul(w, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { ctx.g.concat_cols(&heads) };
        let a = self.out.forward(ctx, cat);
        let a = ctx.g.dropout(a, self.dropout);
        let x = ctx.g.add(x, a);
        let x = self.norm1.forward(ctx, x);

        let f = self.ffn_in.forward(ctx, x);
        let f = ctx.g.relu(f);
        let f = self.ffn_out.forward(ctx, f);
        let f = ctx.g.dropout(f, self.dropout);
        let y = ctx.g.add(x, f);
        (self.norm2.forward(ctx, y), attn)
    }
}

/// A stack of blocks sharing one mask.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            blocks: (0..layers)
                .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), dim, heads, ffn, dropout, rng))
                .collect(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var, mask: Option<&[bool]>) -> Var {
        for b in &self.blocks {
            x = b.forward(ctx, x, mask);
        }
        x
    }
}
