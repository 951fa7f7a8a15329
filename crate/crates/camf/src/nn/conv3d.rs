//! 3-D convolution kernels, the volumetric counterpart of `conv2d`.

use ndarray::{Array1, Array5, ArrayView1, ArrayView5};

use crate::error::{CamfError, Result};
use crate::exec::ExecMode;
use crate::nn::conv2d::conv_out_size;

/// `x`: (n, cin, dx, dy, dz); `weight`: (cout, cin, kx, ky, kz).
pub fn conv3d_forward(
    x: &Array5<f64>,
    weight: ArrayView5<f64>,
    bias: ArrayView1<f64>,
    stride: usize,
    pad: usize,
    exec: ExecMode,
) -> Result<Array5<f64>> {
    let (n, cin, dx, dy, dz) = x.dim();
    let (cout, wcin, kx, ky, kz) = weight.dim();
    if cin != wcin {
        return Err(CamfError::Config(format!(
            "conv3d channel mismatch: input {cin}, weight {wcin}"
        )));
    }
    let ox_n = conv_out_size(dx, kx, stride, pad)?;
    let oy_n = conv_out_size(dy, ky, stride, pad)?;
    let oz_n = conv_out_size(dz, kz, stride, pad)?;

    let xs = x.as_slice().expect("contiguous input");
    let ws = weight.as_slice().expect("contiguous weight");
    let bs = bias.as_slice().expect("contiguous bias");

    let spatial = ox_n * oy_n * oz_n;
    let mut out = Array5::<f64>::zeros((n, cout, ox_n, oy_n, oz_n));
    let out_slice = out.as_slice_mut().unwrap();
    exec.for_each_chunk_mut(out_slice, spatial, |chunk_idx, chunk| {
        let ni = chunk_idx / cout;
        let co = chunk_idx % cout;
        let x_base = ni * cin * dx * dy * dz;
        let w_base = co * cin * kx * ky * kz;
        for ox in 0..ox_n {
            let ix0 = (ox * stride) as isize - pad as isize;
            for oy in 0..oy_n {
                let iy0 = (oy * stride) as isize - pad as isize;
                for oz in 0..oz_n {
                    let iz0 = (oz * stride) as isize - pad as isize;
                    let mut acc = bs[co];
                    for ci in 0..cin {
                        let xc = x_base + ci * dx * dy * dz;
                        let wc = w_base + ci * kx * ky * kz;
                        for kxi in 0..kx {
                            let ix = ix0 + kxi as isize;
                            if ix < 0 || ix >= dx as isize {
                                continue;
                            }
                            let xp = xc + ix as usize * dy * dz;
                            let wp = wc + kxi * ky * kz;
                            for kyi in 0..ky {
                                let iy = iy0 + kyi as isize;
                                if iy < 0 || iy >= dy as isize {
                                    continue;
                                }
                                let xrow = xp + iy as usize * dz;
                                let wrow = wp + kyi * kz;
                                for kzi in 0..kz {
                                    let iz = iz0 + kzi as isize;
                                    if iz < 0 || iz >= dz as isize {
                                        continue;
                                    }
                                    acc += xs[xrow + iz as usize] * ws[wrow + kzi];
                                }
                            }
                        }
                    }
                    chunk[(ox * oy_n + oy) * oz_n + oz] = acc;
                }
            }
        }
    });
    Ok(out)
}

/// Returns (grad_x, grad_weight, grad_bias).
pub fn conv3d_backward(
    x: &Array5<f64>,
    weight: ArrayView5<f64>,
    grad_out: &Array5<f64>,
    stride: usize,
    pad: usize,
    exec: ExecMode,
) -> (Array5<f64>, Array5<f64>, Array1<f64>) {
    let (n, cin, dx, dy, dz) = x.dim();
    let (cout, _, kx, ky, kz) = weight.dim();
    let (_, _, ox_n, oy_n, oz_n) = grad_out.dim();

    let xs = x.as_slice().unwrap();
    let ws = weight.as_slice().unwrap();
    let gos = grad_out.as_slice().unwrap();

    let in_spatial = dx * dy * dz;
    let out_spatial = ox_n * oy_n * oz_n;

    let mut grad_x = Array5::<f64>::zeros((n, cin, dx, dy, dz));
    let gx_slice = grad_x.as_slice_mut().unwrap();
    exec.for_each_chunk_mut(gx_slice, cin * in_spatial, |ni, gx| {
        for co in 0..cout {
            let go_base = (ni * cout + co) * out_spatial;
            let w_base = co * cin * kx * ky * kz;
            for ox in 0..ox_n {
                let ix0 = (ox * stride) as isize - pad as isize;
                for oy in 0..oy_n {
                    let iy0 = (oy * stride) as isize - pad as isize;
                    for oz in 0..oz_n {
                        let g = gos[go_base + (ox * oy_n + oy) * oz_n + oz];
                        if g == 0.0 {
                            continue;
                        }
                        let iz0 = (oz * stride) as isize - pad as isize;
                        for ci in 0..cin {
                            let gxc = ci * in_spatial;
                            let wc = w_base + ci * kx * ky * kz;
                            for kxi in 0..kx {
                                let ix = ix0 + kxi as isize;
                                if ix < 0 || ix >= dx as isize {
                                    continue;
                                }
                                let gxp = gxc + ix as usize * dy * dz;
                                let wp = wc + kxi * ky * kz;
                                for kyi in 0..ky {
                                    let iy = iy0 + kyi as isize;
                                    if iy < 0 || iy >= dy as isize {
                                        continue;
                                    }
                                    let gxrow = gxp + iy as usize * dz;
                                    let wrow = wp + kyi * kz;
                                    for kzi in 0..kz {
                                        let iz = iz0 + kzi as isize;
                                        if iz < 0 || iz >= dz as isize {
                                            continue;
                                        }
                                        gx[gxrow + iz as usize] += g * ws[wrow + kzi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let mut grad_w = Array5::<f64>::zeros((cout, cin, kx, ky, kz));
    let gw_slice = grad_w.as_slice_mut().unwrap();
    exec.for_each_chunk_mut(gw_slice, cin * kx * ky * kz, |co, gw| {
        for ni in 0..n {
            let x_base = ni * cin * in_spatial;
            let go_base = (ni * cout + co) * out_spatial;
            for ox in 0..ox_n {
                let ix0 = (ox * stride) as isize - pad as isize;
                for oy in 0..oy_n {
                    let iy0 = (oy * stride) as isize - pad as isize;
                    for oz in 0..oz_n {
                        let g = gos[go_base + (ox * oy_n + oy) * oz_n + oz];
                        if g == 0.0 {
                            continue;
                        }
                        let iz0 = (oz * stride) as isize - pad as isize;
                        for ci in 0..cin {
                            let xc = x_base + ci * in_spatial;
                            let gwc = ci * kx * ky * kz;
                            for kxi in 0..kx {
                                let ix = ix0 + kxi as isize;
                                if ix < 0 || ix >= dx as isize {
                                    continue;
                                }
                                let xp = xc + ix as usize * dy * dz;
                                let gwp = gwc + kxi * ky * kz;
                                for kyi in 0..ky {
                                    let iy = iy0 + kyi as isize;
                                    if iy < 0 || iy >= dy as isize {
                                        continue;
                                    }
                                    let xrow = xp + iy as usize * dz;
                                    let gwrow = gwp + kyi * kz;
                                    for kzi in 0..kz {
                                        let iz = iz0 + kzi as isize;
                                        if iz < 0 || iz >= dz as isize {
                                            continue;
                                        }
                                        gw[gwrow + kzi] += g * xs[xrow + iz as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let mut grad_b = Array1::<f64>::zeros(cout);
    for ni in 0..n {
        for co in 0..cout {
            let go_base = (ni * cout + co) * out_spatial;
            let mut acc = 0.0;
            for i in 0..out_spatial {
                acc += gos[go_base + i];
            }
            grad_b[co] += acc;
        }
    }

    (grad_x, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;

    #[test]
    fn impulse_response_reproduces_kernel() {
        // Single-voxel impulse; identity bias; the output at the aligned
        // position equals the corresponding kernel tap.
        let mut x = Array5::<f64>::zeros((1, 1, 5, 5, 5));
        x[[0, 0, 2, 2, 2]] = 1.0;
        let mut w = Array5::<f64>::zeros((1, 1, 2, 2, 2));
        w[[0, 0, 0, 0, 0]] = 3.0;
        w[[0, 0, 1, 1, 1]] = -2.0;
        let b = ndarray::array![0.0];
        let out = conv3d_forward(&x, w.view(), b.view(), 1, 0, ExecMode::Sequential).unwrap();
        assert_eq!(out.dim(), (1, 1, 4, 4, 4));
        // Kernel anchored at (2,2,2) hits tap (0,0,0); anchored at (1,1,1) hits tap (1,1,1).
        assert_eq!(out[[0, 0, 2, 2, 2]], 3.0);
        assert_eq!(out[[0, 0, 1, 1, 1]], -2.0);
        assert_eq!(out[[0, 0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(13, 0);
        let x = Array5::from_shape_fn((2, 2, 4, 5, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array5::from_shape_fn((2, 2, 2, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-0.5..0.5));
        let out = conv3d_forward(&x, w.view(), b.view(), 2, 0, ExecMode::Sequential).unwrap();
        let go = Array5::from_shape_fn(out.dim(), |_| rng.gen_range(-1.0..1.0));
        let loss = |x: &Array5<f64>, w: &Array5<f64>, b: &Array1<f64>| -> f64 {
            let out = conv3d_forward(x, w.view(), b.view(), 2, 0, ExecMode::Sequential).unwrap();
            (&out * &go).sum()
        };
        let (gx, gw, gb) = conv3d_backward(&x, w.view(), &go, 2, 0, ExecMode::Sequential);
        let h = 1e-6;

        for idx in [[0usize, 1, 2, 3, 1], [1, 0, 0, 0, 0]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((gx[idx] - fd).abs() < 1e-7);
        }
        let mut wp = w.clone();
        wp[[1, 1, 0, 1, 0]] += h;
        let mut wm = w.clone();
        wm[[1, 1, 0, 1, 0]] -= h;
        let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
        assert!((gw[[1, 1, 0, 1, 0]] - fd).abs() < 1e-7);

        let mut bp = b.clone();
        bp[0] += h;
        let mut bm = b.clone();
        bm[0] -= h;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
        assert!((gb[0] - fd).abs() < 1e-7);
    }
}
