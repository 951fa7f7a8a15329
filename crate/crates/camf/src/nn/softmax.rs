//! Numerically stable softmax and log-sum-exp.

use ndarray::{Array1, Array2};

/// Softmax of a 1-D slice, stabilized by max subtraction.
pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Row-wise softmax of an `n x m` matrix.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward through a row-wise softmax: given row probabilities `p` and
/// upstream gradient `grad_p`, returns the gradient w.r.t. the scores:
/// `ds_i = p_i * (g_i - sum_j g_j p_j)` per row.
pub fn softmax_rows_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p_row, g_row), mut o_row) in probs
        .rows()
        .into_iter()
        .zip(grad_probs.rows())
        .zip(out.rows_mut())
    {
        let dot: f64 = p_row.iter().zip(g_row.iter()).map(|(p, g)| p * g).sum();
        for ((o, &p), &g) in o_row.iter_mut().zip(p_row.iter()).zip(g_row.iter()) {
            *o = p * (g - dot);
        }
    }
    out
}

/// Same backward rule for a 1-D softmax.
pub fn softmax_vec_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// log(sum(exp(x))) with max-shift stabilization.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() && max < 0.0 {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax probabilities as an owned `Array1` for a single row.
pub fn softmax_row(view: ndarray::ArrayView1<f64>) -> Array1<f64> {
    Array1::from(softmax_vec(view.as_slice().expect("contiguous row")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rows_sum_to_one() {
        let s = array![[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&s);
        for row in p.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn shift_invariance() {
        let a = softmax_vec(&[0.3, -1.2, 2.0]);
        let b = softmax_vec(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = array![[0.4, -0.3, 1.1], [2.0, 0.0, -1.0]];
        let g = array![[0.7, -0.2, 0.5], [0.1, 0.9, -0.4]];
        let analytic = softmax_rows_backward(&softmax_rows(&s), &g);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut sp = s.clone();
                sp[[i, j]] += h;
                let mut sm = s.clone();
                sm[[i, j]] -= h;
                let fp: f64 = (softmax_rows(&sp) * &g).sum();
                let fm: f64 = (softmax_rows(&sm) * &g).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((analytic[[i, j]] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn log_sum_exp_stable() {
        assert!((log_sum_exp(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }
}
