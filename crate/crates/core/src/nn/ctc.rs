//! Connectionist temporal classification loss, computed by the log-space
//! forward-backward recursion over the blank-augmented label sequence.

use crate::tensor::Tensor;

/// Stand-in for `ln 0` that keeps every recursion step finite.
pub const LOG_ZERO: f64 = -1e30;

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Smallest number of frames that can emit `target`: one per label plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub struct CtcResult {
    pub loss: f64,
    /// d loss / d log_probs.
    pub grad: Tensor,
}

/// Loss and gradient, or `None` when the target is unreachable in the given frames.
pub fn forward_backward(log_probs: &Tensor, target: &[usize], blank: usize) -> Option<CtcResult> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    assert!(blank < v, "blank index outside the vocabulary");
    assert!(target.iter().all(|&c| c < v && c != blank), "invalid CTC target");
    if t_len == 0 || t_len < min_frames(target) {
        return None;
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let skip_ok = |s: usize| s >= 2 && label(s) != blank && label(s) != label(s - 2);
    let lp = |t: usize, k: usize| log_probs.row(t)[k];

    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc <= LOG_ZERO { LOG_ZERO } else { acc + lp(t, label(s)) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p <= LOG_ZERO {
        return None;
    }

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding the emission at frame t itself.
    let mut beta = vec![LOG_ZERO; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |sp: usize| beta[(t + 1) * s_len + sp] + lp(t + 1, label(sp));
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = if acc <= LOG_ZERO { LOG_ZERO } else { acc };
        }
    }

    let mut grad = Tensor::zeros(&[t_len, v]);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > LOG_ZERO / 2.0 {
                row[label(s)] -= (ab - log_p).exp();
            }
        }
    }
    Some(CtcResult { loss: -log_p, grad })
}

/// Greedy best-path decoding: argmax per frame, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap_or(blank);
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(t: usize, v: usize) -> Tensor {
        Tensor::full(&[t, v], -(v as f64).ln())
    }

    /// Sum of path probabilities over all `v^t` frame labelings that collapse to `target`.
    fn brute_force(log_probs: &Tensor, target: &[usize], blank: usize) -> f64 {
        let (t, v) = (log_probs.rows(), log_probs.cols());
        let mut total = 0.0;
        for code in 0..v.pow(t as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..t)
                .map(|_| {
                    let k = c % v;
                    c /= v;
                    k
                })
                .collect();
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if Some(k) != prev && k != blank {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed == target {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| log_probs.row(i)[k])
                    .sum::<f64>()
                    .exp();
            }
        }
        -total.ln()
    }

    #[test]
    fn hand_computed_cases() {
        let r = forward_backward(&uniform(1, 2), &[1], 0).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-12);
        let r = forward_backward(&uniform(2, 2), &[1], 0).unwrap();
        assert!((r.loss + 0.75f64.ln()).abs() < 1e-12);
        let r = forward_backward(&uniform(2, 2), &[], 0).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unreachable_target_is_none() {
        assert!(forward_backward(&uniform(2, 3), &[1, 1], 0).is_none());
        assert!(forward_backward(&uniform(3, 3), &[1, 1], 0).is_some());
        assert!(forward_backward(&uniform(2, 3), &[1, 2, 1], 0).is_none());
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=4);
            let len = rng.gen_range(0..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
            let logits: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let lp = Tensor::from_rows(
                &logits
                    .iter()
                    .map(|r| {
                        let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
                        r.iter().map(|x| x - lse).collect()
                    })
                    .collect::<Vec<_>>(),
            );
            let expected = brute_force(&lp, &target, 0);
            match forward_backward(&lp, &target, 0) {
                Some(r) => assert!((r.loss - expected).abs() < 1e-9, "{} vs {expected}", r.loss),
                None => assert!(expected.is_infinite()),
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-2.0..0.0)).collect());
        let target = [1, 2, 2];
        let r = forward_backward(&lp, &target, 0).unwrap();
        let h = 1e-6;
        for i in 0..lp.len() {
            let mut up = lp.clone();
            up.data_mut()[i] += h;
            let mut dn = lp.clone();
            dn.data_mut()[i] -= h;
            let fd = (forward_backward(&up, &target, 0).unwrap().loss
                - forward_backward(&dn, &target, 0).unwrap().loss)
                / (2.0 * h);
            assert!((fd - r.grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn greedy_decode_collapses() {
        let mut lp = Tensor::full(&[5, 3], -5.0);
        for (t, k) in [1, 1, 0, 1, 2].iter().enumerate() {
            lp.row_mut(t)[*k] = 0.0;
        }
        assert_eq!(greedy_decode(&lp, 0), vec![1, 1, 2]);
    }
}
