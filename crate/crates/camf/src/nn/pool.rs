//! Global max pooling over all spatial positions of each channel.

use ndarray::Array2;

/// Pools a contiguous activation tensor laid out as (n, channels, spatial).
/// Returns the pooled (n, channels) matrix and the flat spatial argmax per
/// (sample, channel). Ties resolve to the first (lowest-index) position.
pub fn global_max_pool(
    data: &[f64],
    n: usize,
    channels: usize,
    spatial: usize,
) -> (Array2<f64>, Vec<usize>) {
    assert_eq!(data.len(), n * channels * spatial);
    assert!(spatial > 0);
    let mut pooled = Array2::<f64>::zeros((n, channels));
    let mut argmax = vec![0usize; n * channels];
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            let mut best = data[base];
            let mut best_i = 0usize;
            for i in 1..spatial {
                let v = data[base + i];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            pooled[[ni, c]] = best;
            argmax[ni * channels + c] = best_i;
        }
    }
    (pooled, argmax)
}

/// Scatters the pooled gradient back to the argmax positions; all other
/// positions receive zero. Output layout matches the forward input.
pub fn global_max_pool_backward(
    grad_pooled: &Array2<f64>,
    argmax: &[usize],
    spatial: usize,
) -> Vec<f64> {
    let (n, channels) = grad_pooled.dim();
    let mut grad = vec![0.0; n * channels * spatial];
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            grad[base + argmax[ni * channels + c]] = grad_pooled[[ni, c]];
        }
    }
    grad
}
