//! Parameterised layers. Each layer owns [`ParamId`]s into a shared store and
//! records its computation on a [`Ctx`] graph.

use rand::Rng;

use crate::graph::{BatchStats, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One forward pass: the graph, the parameters it reads, and batch-norm
/// statistics gathered along the way.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub bn_updates: Vec<BnUpdate>,
    /// Batch norm uses running statistics even in a training graph.
    pub frozen_bn: bool,
}

/// Batch statistics observed in training mode, to be folded into running buffers.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
    pub count: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, training: bool, seed: u64) -> Self {
        Self {
            g: Graph::new(training, seed),
            store,
            bn_updates: Vec::new(),
            frozen_bn: false,
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn training(&self) -> bool {
        self.g.is_training()
    }
}

/// Fold batch statistics into running buffers with the given momentum.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let unbias = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let m = store.value_mut(u.running_mean);
        for (r, s) in m.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
        let v = store.value_mut(u.running_var);
        for (r, s) in v.data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * s * unbias;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), &[fan_in, fan_out], fan_in, fan_out, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.g.matmul(x, w);
        ctx.g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.g.layer_norm(x, g, b, 1e-5)
    }
}

/// Same-padded 1-D convolution over the time axis of a `[t, c_in]` sequence.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel;
        Self {
            kernel,
            weight: store.add_glorot(format!("{name}.weight"), &[fan_in, c_out], fan_in, c_out, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let cols = ctx.g.im2col_1d(x, self.kernel);
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.g.matmul(cols, w);
        ctx.g.add_row(y, b)
    }
}

/// Zero-padded 3×3 convolution on `[c, h, w]` feature maps.
#[derive(Clone, Debug)]
pub struct Conv2d3x3 {
    pub c_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d3x3 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        // He-uniform: these convolutions feed ReLUs.
        let fan_in = c_in * 9;
        let limit = (6.0 / fan_in as f64).sqrt();
        let data = (0..c_out * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            c_out,
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![c_out, fan_in], data)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let s = ctx.g.shape(x).to_vec();
        let cols = ctx.g.im2col_3x3(x);
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.g.matmul(w, cols);
        let y = ctx.g.add_col(y, b);
        ctx.g.reshape(y, &[self.c_out, s[1], s[2]])
    }
}

/// Per-channel batch normalization of `[c, h, w]` maps with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let s = ctx.g.shape(x).to_vec();
        let flat = ctx.g.reshape(x, &[s[0], s[1] * s[2]]);
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        let running = (!ctx.training() || ctx.frozen_bn).then(|| BatchStats {
            mean: ctx.store.value(self.running_mean).data().to_vec(),
            var: ctx.store.value(self.running_var).data().to_vec(),
        });
        let (y, stats) = ctx.g.batch_norm(flat, gamma, beta, running.as_ref(), 1e-5);
        if let Some(stats) = stats {
            ctx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
                count: s[1] * s[2],
            });
        }
        ctx.g.reshape(y, &s)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub size: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / dim as f64).sqrt();
        let data = (0..size * dim).map(|_| rng.gen_range(-scale..scale) * 3f64.sqrt()).collect();
        Self {
            table: store.add(format!("{name}.table"), Tensor::new(vec![size, dim], data)),
            size,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, ids: &[usize]) -> Var {
        assert!(ids.iter().all(|&i| i < self.size), "embedding index out of range");
        let t = ctx.p(self.table);
        ctx.g.gather_rows(t, ids)
    }
}

/// Sinusoidal absolute position encoding, `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = out.row_mut(pos);
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}
