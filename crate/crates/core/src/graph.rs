//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended in
//! evaluation order, so walking them backwards is a valid topological order for
//! the backward pass. Parameters enter the graph through [`Graph::param`] and
//! their gradients are collected by [`ParamId`] in [`Gradients`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule: `(upstream grad, input values, output value, which inputs need grads)`.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradients keyed by parameter, in ascending id order.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Statistics of one batch-norm call in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn reduce_rows(g: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    let _ = r;
    Tensor::new(vec![c], out)
}

/// Calls `f(patch_offset, source_offset, len)` for every contiguous run copied by a
/// zero-padded 3×3 im2col of a `[c, h, w]` map.
fn for_each_3x3_run(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                // Output columns whose source column `x + kx - 1` is inside the map.
                let x0 = usize::from(kx == 0);
                let x1 = if kx == 2 { w - 1 } else { w };
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let from = ci * hw + sy as usize * w + x0 + kx - 1;
                    f(row + y * w + x0, from, x1 - x0);
                }
            }
        }
    }
}

impl Graph {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A graph for inference: dropout disabled, batch norm uses running statistics.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let node = Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: needs_grad.then_some(backward),
            needs_grad,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    /// A free input whose gradient is tracked (used for probing derivatives).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Parameter leaf. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value_arc(id), true);
        self.params.insert(id, v);
        v
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(up) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &*self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].needs_grad).collect();
            let in_grads = bw(&up, &inputs, &node.value, &needs);
            grads[i] = Some(up);
            for (&j, g) in node.inputs.iter().zip(in_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, x, _, need| {
                vec![
                    need[0].then(|| g.zip_map(x[1], |g, b| g * b)),
                    need[1].then(|| g.zip_map(x[0], |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(
            out,
            &[a, b],
            Box::new(|g, x, y, need| {
                vec![
                    need[0].then(|| g.zip_map(x[1], |g, b| g / b)),
                    need[1].then(|| {
                        let gy = g.zip_map(y, |g, y| g * y);
                        gy.zip_map(x[1], |gy, b| -gy / b)
                    }),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, &[a], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(|g, x, _, _| vec![Some(g.zip_map(x[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    /// Forward identity; backward multiplies the upstream gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, a: Var, lambda: f64) -> Var {
        assert!(lambda >= 0.0, "gradient reversal strength must be non-negative");
        let out = self.value(a).clone();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| -lambda * v))]),
        )
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(a).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(
            out,
            &[a],
            Box::new(move |g, _, _, _| {
                let mut d = g.clone();
                for (v, m) in d.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                vec![Some(d)]
            }),
        )
    }

    // ---------------------------------------------------------------- broadcasting

    /// `x[n, d] + b[d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        assert_eq!(bv.len(), c, "row bias length mismatch");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.push(
            out,
            &[x, b],
            Box::new(move |g, _, _, need| {
                vec![
                    Some(g.clone()),
                    need[1].then(|| reduce_rows(g).reshape(&bshape)),
                ]
            }),
        )
    }

    /// `x[c, n] + b[c]`: one bias per row (channel).
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.len(), xv.rows(), "column bias length mismatch");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let bb = bv.data()[i];
            for o in out.row_mut(i) {
                *o += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.push(
            out,
            &[x, b],
            Box::new(move |g, _, _, need| {
                let db = need[1].then(|| {
                    let sums = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                    Tensor::new(bshape.clone(), sums)
                });
                vec![Some(g.clone()), db]
            }),
        )
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if b_t {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), b_t, 0.0, &mut out);
        self.push(
            Tensor::new(vec![m, n], out),
            &[a, b],
            Box::new(move |g, x, _, need| {
                let da = need[0].then(|| {
                    // dA = dC · op(B)ᵀ
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, x[1].data(), !b_t, 0.0, &mut d);
                    Tensor::new(x[0].shape().to_vec(), d)
                });
                let db = need[1].then(|| {
                    if b_t {
                        // B is [n, k]: dB = dCᵀ · A
                        let mut d = vec![0.0; n * k];
                        gemm(n, m, k, 1.0, g.data(), true, x[0].data(), false, 0.0, &mut d);
                        Tensor::new(x[1].shape().to_vec(), d)
                    } else {
                        // B is [k, n]: dB = Aᵀ · dC
                        let mut d = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, x[0].data(), true, g.data(), false, 0.0, &mut d);
                        Tensor::new(x[1].shape().to_vec(), d)
                    }
                });
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, &[a], Box::new(|g, _, _, _| vec![Some(g.transpose())]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(
            out,
            &[a],
            Box::new(|g, x, _, _| vec![Some(g.clone().reshape(x[0].shape()))]),
        )
    }

    // ---------------------------------------------------------------- normalization

    /// Row-wise softmax. `key_mask[j] == false` excludes column `j` from every row.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(m) = key_mask {
            assert_eq!(m.len(), c);
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let valid = |j: usize| key_mask.map_or(true, |m| m[j]);
            let mx = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for j in (0..c).filter(|&j| valid(j)) {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                s += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= s;
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out),
            &[x],
            Box::new(|g, _, y, _| {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), d))]
            }),
        )
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out),
            &[x],
            Box::new(|g, _, y, _| {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..c {
                        d[i * c + j] = g.row(i)[j] - y.row(i)[j].exp() * gs;
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), d))]
            }),
        )
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out),
            &[x, gamma, beta],
            Box::new(move |g, x, _, need| {
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let gr = g.row(i);
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[i * c + j] = inv_std[i] * (dh - m1 - hr[j] * m2);
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(x[0].shape().to_vec(), dx)),
                    need[1].then(|| Tensor::new(x[1].shape().to_vec(), dgamma)),
                    need[2].then(|| Tensor::new(x[2].shape().to_vec(), dbeta)),
                ]
            }),
        )
    }

    /// Batch normalization of `x[c, ...]` over all positions of each channel.
    ///
    /// Without `running`, the statistics of `x` are used and returned so the caller
    /// can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&BatchStats>,
        eps: f64,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (ch, n) = (xv.rows(), xv.cols());
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let use_batch = running.is_none();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for c in 0..ch {
            if use_batch {
                let row = xv.row(c);
                let m = row.iter().sum::<f64>() / n as f64;
                mean[c] = m;
                var[c] = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            } else {
                let r = running.unwrap();
                mean[c] = r.mean[c];
                var[c] = r.var[c];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; ch * n];
        let mut out = vec![0.0; ch * n];
        for c in 0..ch {
            let row = xv.row(c);
            for j in 0..n {
                let h = (row[j] - mean[c]) * inv_std[c];
                xhat[c * n + j] = h;
                out[c * n + j] = gv[c] * h + bv[c];
            }
        }
        let stats = use_batch.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let var_out = self.push(
            Tensor::new(xv.shape().to_vec(), out),
            &[x, gamma, beta],
            Box::new(move |g, x, _, need| {
                let mut dx = vec![0.0; ch * n];
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for c in 0..ch {
                    let gr = g.row(c);
                    let hr = &xhat[c * n..(c + 1) * n];
                    let sg: f64 = gr.iter().sum();
                    let sgh: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                    dgamma[c] = sgh;
                    dbeta[c] = sg;
                    let k = gv[c] * inv_std[c];
                    for j in 0..n {
                        dx[c * n + j] = if use_batch {
                            k * (gr[j] - sg / n as f64 - hr[j] * sgh / n as f64)
                        } else {
                            k * gr[j]
                        };
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(x[0].shape().to_vec(), dx)),
                    need[1].then(|| Tensor::new(x[1].shape().to_vec(), dgamma)),
                    need[2].then(|| Tensor::new(x[2].shape().to_vec(), dbeta)),
                ]
            }),
        );
        (var_out, stats)
    }

    // ---------------------------------------------------------------- indexing

    /// Output row `i` is input row `indices[i]`. Used for embeddings and length regulation.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(xv.row(i));
        }
        let idx = indices.to_vec();
        self.push(
            Tensor::new(vec![indices.len(), c], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = Tensor::zeros(x[0].shape());
                for (o, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                        *dv += gv;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let r = xv.rows();
        let out = reduce_rows(xv).map(|v| v / r as f64).reshape(&[1, xv.cols()]);
        self.push(
            out,
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = Tensor::zeros(x[0].shape());
                for i in 0..r {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *dv = gv / r as f64;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(|g, x, _, _| vec![Some(Tensor::full(x[0].shape(), g.item()))]),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        assert!(start <= end && end <= c);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        self.push(
            Tensor::new(vec![r, w], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = Tensor::zeros(x[0].shape());
                for i in 0..r {
                    d.row_mut(i)[start..end].copy_from_slice(g.row(i));
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), r, "concat_cols row mismatch");
                out.extend_from_slice(v.row(i));
            }
        }
        self.push(
            Tensor::new(vec![r, total], out),
            parts,
            Box::new(move |g, x, _, need| {
                let mut off = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    if need[k] {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        res.push(Some(Tensor::new(x[k].shape().to_vec(), d)));
                    } else {
                        res.push(None);
                    }
                    off += w;
                }
                res
            }),
        )
    }

    /// Concatenate along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], tail.as_slice(), "concat_rows shape mismatch");
            rows += v.rows();
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(
            Tensor::new(shape, data),
            parts,
            Box::new(move |g, x, _, need| {
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        let d = need[k].then(|| {
                            Tensor::new(x[k].shape().to_vec(), g.data()[off..off + s].to_vec())
                        });
                        off += s;
                        d
                    })
                    .collect()
            }),
        )
    }

    // ---------------------------------------------------------------- convolution helpers

    /// `[t, c] -> [t, k*c]`: each output row stacks the `k` neighbouring input rows
    /// centred on it, zero outside the sequence. Followed by a matmul this is a
    /// same-padded 1-D convolution over time.
    pub fn im2col_1d(&mut self, x: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "odd kernel expected");
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        let half = (k / 2) as isize;
        let mut out = vec![0.0; t * k * c];
        for i in 0..t {
            for o in 0..k {
                let src = i as isize + o as isize - half;
                if src >= 0 && (src as usize) < t {
                    out[i * k * c + o * c..i * k * c + (o + 1) * c]
                        .copy_from_slice(xv.row(src as usize));
                }
            }
        }
        self.push(
            Tensor::new(vec![t, k * c], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = Tensor::zeros(x[0].shape());
                for i in 0..t {
                    for o in 0..k {
                        let src = i as isize + o as isize - half;
                        if src >= 0 && (src as usize) < t {
                            let gs = &g.row(i)[o * c..(o + 1) * c];
                            for (dv, gv) in d.row_mut(src as usize).iter_mut().zip(gs) {
                                *dv += gv;
                            }
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// `[c, h, w] -> [c*9, h*w]` patches for a zero-padded 3×3 convolution.
    pub fn im2col_3x3(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * 9 * hw];
        let src = xv.data();
        for_each_3x3_run(c, h, w, |dst, from, len| {
            out[dst..dst + len].copy_from_slice(&src[from..from + len]);
        });
        self.push(
            Tensor::new(vec![c * 9, hw], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = vec![0.0; c * hw];
                let gd = g.data();
                for_each_3x3_run(c, h, w, |dst, from, len| {
                    for (a, b) in d[from..from + len].iter_mut().zip(&gd[dst..dst + len]) {
                        *a += b;
                    }
                });
                vec![Some(Tensor::new(x[0].shape().to_vec(), d))]
            }),
        )
    }

    /// 2×2 max pooling with stride 2 on `[c, h, w]` (`h`, `w` even).
    pub fn max_pool_2x2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ci * h * w + (2 * y + dy) * w + 2 * xx + dx;
                            if src[i] > best {
                                best = src[i];
                                bi = i;
                            }
                        }
                    }
                    let o = ci * oh * ow + y * ow + xx;
                    out[o] = best;
                    argmax[o] = bi;
                }
            }
        }
        self.push(
            Tensor::new(vec![c, oh, ow], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = vec![0.0; x[0].len()];
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                vec![Some(Tensor::new(x[0].shape().to_vec(), d))]
            }),
        )
    }

    /// Nearest-neighbour ×2 upsampling of `[c, h, w]`.
    pub fn upsample_2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[ci * oh * ow + y * ow + xx] = src[ci * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            Tensor::new(vec![c, oh, ow], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[ci * h * w + (y / 2) * w + xx / 2] +=
                                g.data()[ci * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(x[0].shape().to_vec(), d))]
            }),
        )
    }

    /// Resize the last axis of `[c, h, w]` to `new_w`: crop, or pad on the right with `fill`.
    pub fn resize_last(&mut self, x: Var, new_w: usize, fill: f64) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let keep = w.min(new_w);
        let mut out = vec![fill; c * h * new_w];
        for r in 0..c * h {
            out[r * new_w..r * new_w + keep].copy_from_slice(&xv.data()[r * w..r * w + keep]);
        }
        self.push(
            Tensor::new(vec![c, h, new_w], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = vec![0.0; c * h * w];
                for r in 0..c * h {
                    d[r * w..r * w + keep].copy_from_slice(&g.data()[r * new_w..r * new_w + keep]);
                }
                vec![Some(Tensor::new(x[0].shape().to_vec(), d))]
            }),
        )
    }

    /// Apply a fixed linear operator `y = A x` along the rows of `x[r, c]`
    /// (`A` is `[r', r]`), i.e. `y = A · x`, with the transpose for the gradient.
    pub fn apply_left(&mut self, op: Arc<Tensor>, x: Var) -> Var {
        let xv = self.value(x);
        let (r2, r) = (op.rows(), op.cols());
        assert_eq!(xv.rows(), r);
        let c = xv.cols();
        let mut out = vec![0.0; r2 * c];
        gemm(r2, r, c, 1.0, op.data(), false, xv.data(), false, 0.0, &mut out);
        self.push(
            Tensor::new(vec![r2, c], out),
            &[x],
            Box::new(move |g, x, _, _| {
                let mut d = vec![0.0; r * c];
                gemm(r, r2, c, 1.0, op.data(), true, g.data(), false, 0.0, &mut d);
                vec![Some(Tensor::new(x[0].shape().to_vec(), d))]
            }),
        )
    }

    /// Mean absolute error over rows with `mask[i] == true` (all rows when `None`).
    pub fn mae(&mut self, pred: Var, target: Var, mask: Option<&[bool]>) -> Var {
        self.masked_error(pred, target, mask, false)
    }

    /// Mean squared error over rows with `mask[i] == true` (all rows when `None`).
    pub fn mse(&mut self, pred: Var, target: Var, mask: Option<&[bool]>) -> Var {
        self.masked_error(pred, target, mask, true)
    }

    fn masked_error(&mut self, pred: Var, target: Var, mask: Option<&[bool]>, squared: bool) -> Var {
        let (pv, tv) = (self.value(pred), self.value(target));
        assert_eq!(pv.shape(), tv.shape(), "loss operands differ in shape");
        let (r, c) = (pv.rows(), pv.cols());
        let rows: Vec<bool> = match mask {
            Some(m) => {
                assert_eq!(m.len(), r, "mask length must equal the number of rows");
                m.to_vec()
            }
            None => vec![true; r],
        };
        let count = rows.iter().filter(|&&b| b).count() * c;
        assert!(count > 0, "loss over an empty mask");
        let n = count as f64;
        let mut s = 0.0;
        for i in (0..r).filter(|&i| rows[i]) {
            for (a, b) in pv.row(i).iter().zip(tv.row(i)) {
                let d = a - b;
                s += if squared { d * d } else { d.abs() };
            }
        }
        self.push(
            Tensor::scalar(s / n),
            &[pred, target],
            Box::new(move |g, x, _, need| {
                let gs = g.item();
                let mut d = Tensor::zeros(x[0].shape());
                for i in (0..r).filter(|&i| rows[i]) {
                    let (pr, tr) = (x[0].row(i), x[1].row(i));
                    for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                        let diff = pr[j] - tr[j];
                        *dv = gs / n
                            * if squared {
                                2.0 * diff
                            } else if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                    }
                }
                let dt = need[1].then(|| d.map(|v| -v));
                vec![need[0].then_some(d), dt]
            }),
        )
    }

    /// CTC negative log-likelihood of `target` under per-frame log-probabilities
    /// `log_probs[t, v]` with the blank at index `blank`.
    ///
    /// Returns `+inf` (and zero gradient) when the target cannot be emitted in `t` frames.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize], blank: usize) -> Var {
        let lp = self.value(log_probs);
        let result = crate::nn::ctc::forward_backward(lp, target, blank);
        let (loss, grad) = match result {
            Some(r) => (r.loss, Some(r.grad)),
            None => (f64::INFINITY, None),
        };
        self.push(
            Tensor::scalar(loss),
            &[log_probs],
            Box::new(move |g, x, _, _| {
                let d = match &grad {
                    Some(gr) => gr.map(|v| v * g.item()),
                    None => Tensor::zeros(x[0].shape()),
                };
                vec![Some(d)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x` against the tape gradient.
    fn check_grad(x0: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new(false, 0);
        let x = g.input(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.wrt(x).expect("gradient").clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new(false, 0);
                let x = g.constant(t);
                let y = f(&mut g, x);
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "component {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn probe(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = probe(g.shape(y), seed);
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.sum_all(p)
    }

    #[test]
    fn matmul_gradients() {
        let b = probe(&[4, 3], 7);
        check_grad(probe(&[2, 4], 1), |g, x| {
            let bb = g.constant(b.clone());
            let y = g.matmul(x, bb);
            weighted_sum(g, y, 3)
        });
        check_grad(probe(&[3, 4], 2), |g, x| {
            let a = g.constant(probe(&[2, 4], 5));
            let y = g.matmul_t(a, x);
            weighted_sum(g, y, 4)
        });
    }

    #[test]
    fn normalization_gradients() {
        check_grad(probe(&[3, 5], 1), |g, x| {
            let gm = g.constant(probe(&[5], 2));
            let bt = g.constant(probe(&[5], 3));
            let y = g.layer_norm(x, gm, bt, 1e-5);
            weighted_sum(g, y, 4)
        });
        check_grad(probe(&[2, 3, 4], 1), |g, x| {
            let gm = g.constant(probe(&[2], 2));
            let bt = g.constant(probe(&[2], 3));
            let x2 = g.reshape(x, &[2, 12]);
            let (y, _) = g.batch_norm(x2, gm, bt, None, 1e-5);
            weighted_sum(g, y, 4)
        });
        check_grad(probe(&[3, 4], 1), |g, x| {
            let y = g.softmax_rows(x, Some(&[true, false, true, true]));
            weighted_sum(g, y, 4)
        });
        check_grad(probe(&[3, 4], 1), |g, x| {
            let y = g.log_softmax_rows(x);
            weighted_sum(g, y, 4)
        });
    }

    #[test]
    fn structural_op_gradients() {
        check_grad(probe(&[5, 3], 1), |g, x| {
            let y = g.im2col_1d(x, 3);
            weighted_sum(g, y, 2)
        });
        check_grad(probe(&[2, 4, 6], 1), |g, x| {
            let y = g.im2col_3x3(x);
            weighted_sum(g, y, 2)
        });
        check_grad(probe(&[2, 4, 6], 1), |g, x| {
            let y = g.max_pool_2x2(x);
            weighted_sum(g, y, 2)
        });
        check_grad(probe(&[2, 2, 3], 1), |g, x| {
            let y = g.upsample_2x(x);
            let y = g.resize_last(y, 4, -1.0);
            weighted_sum(g, y, 2)
        });
        check_grad(probe(&[4, 3], 1), |g, x| {
            let a = g.gather_rows(x, &[0, 0, 2, 3, 3, 3]);
            let b = g.slice_cols(a, 1, 3);
            let c = g.mean_rows(x);
            let d = g.concat_cols(&[b, a]);
            let e = g.concat_rows(&[c, x]);
            let s1 = weighted_sum(g, d, 5);
            let s2 = weighted_sum(g, e, 6);
            g.add(s1, s2)
        });
    }

    #[test]
    fn elementwise_and_loss_gradients() {
        let t = probe(&[3, 4], 9);
        check_grad(probe(&[3, 4], 1), |g, x| {
            let c = g.constant(probe(&[3, 4], 2).map(|v| v.abs() + 0.5));
            let q = g.div(x, c);
            let r = g.div(c, q);
            let s = g.relu(r);
            weighted_sum(g, s, 4)
        });
        check_grad(probe(&[3, 4], 1), |g, x| {
            let tt = g.constant(t.clone());
            g.mse(x, tt, Some(&[true, false, true]))
        });
        check_grad(probe(&[3, 4], 1), |g, x| {
            let b = g.constant(probe(&[4], 2));
            let c = g.constant(probe(&[3], 3));
            let y = g.add_row(x, b);
            let y = g.add_col(y, c);
            weighted_sum(g, y, 4)
        });
    }

    #[test]
    fn gradient_reversal_negates_and_scales() {
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let mut g = Graph::eval();
            let x = g.input(probe(&[2, 3], 1));
            let y = g.gradient_reversal(x, lambda);
            assert_eq!(g.value(x), g.value(y));
            let s = weighted_sum(&mut g, y, 2);
            let gr = g.backward(s);
            let w = probe(&[2, 3], 2);
            for (a, b) in gr.wrt(x).unwrap().data().iter().zip(w.data()) {
                assert_eq!(*a, -lambda * b);
            }
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::full(&[10, 10], 1.0));
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);
        let run = |seed| {
            let mut g = Graph::new(true, seed);
            let x = g.constant(Tensor::full(&[10, 10], 1.0));
            let y = g.dropout(x, 0.5);
            g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert!(run(3).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
