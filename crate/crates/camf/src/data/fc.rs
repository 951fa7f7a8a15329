//! Connectivity-matrix construction from ROI time series.

use ndarray::Array2;

use crate::error::{CamfError, Result};

/// Pearson correlation between every pair of columns of a (T, R) time-series
/// matrix. The result is exactly symmetric with unit diagonal and entries
/// clamped to [-1, 1]. Zero-variance columns produce 0 correlations
/// off-diagonal (logged as a warning) so downstream tensors stay finite.
pub fn compute_fc(timeseries: &Array2<f64>) -> Result<Array2<f64>> {
    let (t, r) = timeseries.dim();
    if t < 2 || r < 2 {
        return Err(CamfError::Data(format!(
            "compute_fc needs at least 2 timepoints and 2 ROIs, got ({t}, {r})"
        )));
    }
    if timeseries.iter().any(|v| !v.is_finite()) {
        return Err(CamfError::Data("non-finite values in time series".into()));
    }

    let tf = t as f64;
    let means: Vec<f64> = (0..r)
        .map(|j| timeseries.column(j).sum() / tf)
        .collect();
    let stds: Vec<f64> = (0..r)
        .map(|j| {
            let m = means[j];
            (timeseries.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / tf).sqrt()
        })
        .collect();

    let degenerate: Vec<usize> = (0..r).filter(|&j| stds[j] == 0.0).collect();
    if !degenerate.is_empty() {
        log::warn!(
            "zero-variance ROI columns {:?}: their correlations are set to 0",
            degenerate
        );
    }

    let mut fc = Array2::<f64>::zeros((r, r));
    for i in 0..r {
        fc[[i, i]] = 1.0;
        for j in (i + 1)..r {
            let value = if stds[i] == 0.0 || stds[j] == 0.0 {
                0.0
            } else {
                let mut cov = 0.0;
                for ti in 0..t {
                    cov += (timeseries[[ti, i]] - means[i]) * (timeseries[[ti, j]] - means[j]);
                }
                (cov / (tf * stds[i] * stds[j])).clamp(-1.0, 1.0)
            };
            fc[[i, j]] = value;
            fc[[j, i]] = value;
        }
    }
    Ok(fc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_columns_correlate_perfectly() {
        let ts = array![[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]];
        let fc = compute_fc(&ts).unwrap();
        assert!((fc[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_column_anticorrelates() {
        let ts = array![[1.0, -1.0], [2.0, -2.0], [5.0, -5.0]];
        let fc = compute_fc(&ts).unwrap();
        assert!((fc[[0, 1]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_pearson_evaluation() {
        // Fixed 4x3 matrix; oracle evaluates the covariance/std definition
        // with its own independent arithmetic.
        let ts = array![
            [0.3, -1.2, 2.0],
            [1.7, 0.4, -0.6],
            [-0.9, 2.2, 1.1],
            [0.5, -0.7, 0.9]
        ];
        let fc = compute_fc(&ts).unwrap();
        let pearson = |a: &[f64], b: &[f64]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let sa = (a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n).sqrt();
            let sb = (b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n).sqrt();
            cov / (sa * sb)
        };
        for i in 0..3 {
            for j in 0..3 {
                let a: Vec<f64> = ts.column(i).to_vec();
                let b: Vec<f64> = ts.column(j).to_vec();
                let want = if i == j { 1.0 } else { pearson(&a, &b) };
                assert!(
                    (fc[[i, j]] - want).abs() < 1e-12,
                    "({i},{j}): {} vs {want}",
                    fc[[i, j]]
                );
            }
        }
        // Exact symmetry by construction.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(fc[[i, j]], fc[[j, i]]);
            }
        }
    }

    #[test]
    fn zero_variance_column_yields_zero_entries() {
        let ts = array![[1.0, 3.0], [1.0, 4.0], [1.0, 5.0]];
        let fc = compute_fc(&ts).unwrap();
        assert_eq!(fc[[0, 1]], 0.0);
        assert_eq!(fc[[1, 0]], 0.0);
        assert_eq!(fc[[0, 0]], 1.0);
        assert_eq!(fc[[1, 1]], 1.0);
    }

    #[test]
    fn too_few_rows_or_columns_rejected() {
        assert!(compute_fc(&Array2::zeros((1, 4))).is_err());
        assert!(compute_fc(&Array2::zeros((5, 1))).is_err());
    }

    #[test]
    fn affine_transform_per_column_leaves_fc_unchanged() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(31, 0);
        let ts = Array2::from_shape_fn((12, 5), |_| rng.gen_range(-2.0..2.0));
        let fc = compute_fc(&ts).unwrap();
        let mut transformed = ts.clone();
        for j in 0..5 {
            let a = rng.gen_range(0.1..3.0);
            let b = rng.gen_range(-5.0..5.0);
            transformed.column_mut(j).mapv_inplace(|v| a * v + b);
        }
        let fc2 = compute_fc(&transformed).unwrap();
        for (x, y) in fc.iter().zip(fc2.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
