//! Dense layers and the plain matrix products used by the attention modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// `x (n, in) @ w (in, out)`, naive and deterministic: the inner accumulation
/// order is fixed, so results are identical across execution modes.
pub fn matmul(x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let (k2, m) = w.dim();
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let xs = x.as_slice().expect("contiguous lhs");
    let ws = w.as_slice().expect("contiguous rhs");
    let mut out = Array2::<f64>::zeros((n, m));
    let os = out.as_slice_mut().unwrap();
    for i in 0..n {
        let xrow = &xs[i * k..(i + 1) * k];
        let orow = &mut os[i * m..(i + 1) * m];
        for (kk, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &ws[kk * m..(kk + 1) * m];
            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// `x (n, k) @ y^T` where `y` is (m, k): returns (n, m).
pub fn matmul_nt(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let (m, k2) = y.dim();
    assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice().unwrap();
    let mut out = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let xrow = &xs[i * k..(i + 1) * k];
        for j in 0..m {
            let yrow = &ys[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += xrow[t] * yrow[t];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// `x^T (k, n) @ y (n, m)` where `x` is (n, k): returns (k, m).
pub fn matmul_tn(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let (n2, m) = y.dim();
    assert_eq!(n, n2, "matmul_tn inner dimension mismatch");
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice().unwrap();
    let mut out = Array2::<f64>::zeros((k, m));
    let os = out.as_slice_mut().unwrap();
    for i in 0..n {
        let xrow = &xs[i * k..(i + 1) * k];
        let yrow = &ys[i * m..(i + 1) * m];
        for (t, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let orow = &mut os[t * m..(t + 1) * m];
            for (o, &yv) in orow.iter_mut().zip(yrow.iter()) {
                *o += xv * yv;
            }
        }
    }
    out
}

/// Forward of a dense layer: `y = x @ w + b`.
pub fn linear_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = matmul(x, w);
    for mut row in out.rows_mut() {
        for (v, bv) in row.iter_mut().zip(b.iter()) {
            *v += bv;
        }
    }
    out
}

/// Backward of a dense layer: returns (grad_x, grad_w, grad_b).
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let grad_x = matmul_nt(grad_out, w); // (n, out) @ (in, out)^T
    let grad_w = matmul_tn(x, grad_out); // (n, in)^T @ (n, out)
    let grad_b = grad_out.sum_axis(ndarray::Axis(0));
    (grad_x, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_variants_agree() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]; // 3x2
        let b = array![[1.0, 0.0, 2.0], [0.5, -1.0, 1.0]]; // 2x3
        let ab = matmul(a.view(), b.view());
        assert_eq!(ab, array![[2.0, -2.0, 4.0], [5.0, -4.0, 10.0], [8.0, -6.0, 16.0]]);
        // a @ b == a @ (b^T)^T
        let bt = b.t().as_standard_layout().to_owned();
        assert_eq!(matmul_nt(a.view(), bt.view()), ab);
        // (a^T)^T @ b via matmul_tn on transposed lhs
        let at = a.t().as_standard_layout().to_owned();
        assert_eq!(matmul_tn(at.view(), b.view()), ab);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(5, 0);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let go = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| {
            (&linear_forward(x.view(), w.view(), b.view()) * &go).sum()
        };
        let (gx, gw, gb) = linear_backward(x.view(), w.view(), go.view());
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[2, 3]] += h;
        let mut xm = x.clone();
        xm[[2, 3]] -= h;
        assert!((gx[[2, 3]] - (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h)).abs() < 1e-8);
        let mut wp = w.clone();
        wp[[1, 1]] += h;
        let mut wm = w.clone();
        wm[[1, 1]] -= h;
        assert!((gw[[1, 1]] - (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h)).abs() < 1e-8);
        let mut bp = b.clone();
        bp[0] += h;
        let mut bm = b.clone();
        bm[0] -= h;
        assert!((gb[0] - (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h)).abs() < 1e-8);
    }
}
