//! Mean structural similarity between two spectrogram-shaped matrices.
//!
//! Local statistics use an 11×11 Gaussian window (σ = 1.5). Near the borders the
//! window is truncated and renormalised, so constant inputs give exact local
//! means and zero variance everywhere regardless of size.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// Affine map from raw values to the `[0, 1]` dynamic range SSIM is defined on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

/// Stabilising constants for a dynamic range of 1.
pub fn constants() -> (f64, f64) {
    (K1 * K1, K2 * K2)
}

/// `[n, n]` row-normalised truncated Gaussian smoothing operator.
fn smoothing_operator(n: usize) -> Arc<Tensor> {
    let half = (WINDOW / 2) as isize;
    let mut op = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = op.row_mut(i);
        let mut s = 0.0;
        for d in -half..=half {
            let j = i as isize + d;
            if j >= 0 && (j as usize) < n {
                let w = (-(d * d) as f64 / (2.0 * SIGMA * SIGMA)).exp();
                row[j as usize] = w;
                s += w;
            }
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Arc::new(op)
}

struct Smoother {
    rows: Arc<Tensor>,
    cols: Arc<Tensor>,
}

impl Smoother {
    fn new(shape: &[usize]) -> Self {
        Self {
            rows: smoothing_operator(shape[0]),
            cols: smoothing_operator(shape[1]),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let a = g.apply_left(Arc::clone(&self.rows), x);
        let at = g.transpose(a);
        let b = g.apply_left(Arc::clone(&self.cols), at);
        g.transpose(b)
    }
}

/// Per-cell SSIM of two `[rows, cols]` matrices already scaled to `[0, 1]`.
pub fn ssim_map(g: &mut Graph, x: Var, y: Var) -> Var {
    assert_eq!(g.shape(x), g.shape(y), "SSIM operands differ in shape");
    let (c1, c2) = constants();
    let sm = Smoother::new(g.shape(x));
    let mu_x = sm.apply(g, x);
    let mu_y = sm.apply(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let e_xx = sm.apply(g, xx);
    let e_yy = sm.apply(g, yy);
    let e_xy = sm.apply(g, xy);
    let mu_xx = g.mul(mu_x, mu_x);
    let mu_yy = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(e_xx, mu_xx);
    let var_y = g.sub(e_yy, mu_yy);
    let cov = g.sub(e_xy, mu_xy);

    let n1 = g.scale(mu_xy, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let d1 = g.add(mu_xx, mu_yy);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_x, var_y);
    let d2 = g.add_scalar(d2, c2);
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    g.div(num, den)
}

fn normalized(g: &mut Graph, x: Var, range: ValueRange) -> Var {
    let s = g.scale(x, 1.0 / (range.hi - range.lo));
    g.add_scalar(s, -range.lo / (range.hi - range.lo))
}

/// `1 − mean SSIM` over the first `valid_rows` rows (all rows when `None`).
pub fn mssim_loss(g: &mut Graph, pred: Var, target: Var, range: ValueRange, valid_rows: Option<usize>) -> Var {
    let (mut p, mut t) = (pred, target);
    if let Some(n) = valid_rows {
        assert!(n >= 1 && n <= g.shape(pred)[0], "valid rows out of range");
        if n < g.shape(pred)[0] {
            let idx: Vec<usize> = (0..n).collect();
            p = g.gather_rows(pred, &idx);
            t = g.gather_rows(target, &idx);
        }
    }
    let pn = normalized(g, p, range);
    let tn = normalized(g, t, range);
    let map = ssim_map(g, pn, tn);
    let n = g.value(map).len() as f64;
    let s = g.sum_all(map);
    let m = g.scale(s, -1.0 / n);
    g.add_scalar(m, 1.0)
}

/// Convenience evaluation outside a training graph.
pub fn mssim_loss_value(pred: &Tensor, target: &Tensor, range: ValueRange) -> f64 {
    let mut g = Graph::eval();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = mssim_loss(&mut g, p, t, range, None);
    g.value(l).item()
}
