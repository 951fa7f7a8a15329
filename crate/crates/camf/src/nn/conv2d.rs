//! 2-D convolution kernels (forward and backward), written against raw
//! slices for speed. Batch/channel loops are data-parallel via [`ExecMode`];
//! all accumulation inside a chunk is sequential, so results do not depend
//! on the execution mode.

use ndarray::{Array1, Array4, ArrayView1, ArrayView4};

use crate::error::{CamfError, Result};
use crate::exec::ExecMode;

/// Output size along one axis: `(in + 2*pad - kernel) / stride + 1`.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(CamfError::Config(format!(
            "conv input size {input} (pad {pad}) smaller than kernel {kernel}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// `x`: (n, cin, h, w); `weight`: (cout, cin, kh, kw); returns (n, cout, oh, ow).
pub fn conv2d_forward(
    x: &Array4<f64>,
    weight: ArrayView4<f64>,
    bias: ArrayView1<f64>,
    stride: usize,
    pad: usize,
    exec: ExecMode,
) -> Result<Array4<f64>> {
    let (n, cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    if cin != wcin {
        return Err(CamfError::Config(format!(
            "conv2d channel mismatch: input {cin}, weight {wcin}"
        )));
    }
    let oh = conv_out_size(h, kh, stride, pad)?;
    let ow = conv_out_size(w, kw, stride, pad)?;

    let xs = x.as_slice().expect("contiguous input");
    let ws = weight.as_slice().expect("contiguous weight");
    let bs = bias.as_slice().expect("contiguous bias");

    let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
    let out_slice = out.as_slice_mut().expect("contiguous output");
    exec.for_each_chunk_mut(out_slice, oh * ow, |chunk_idx, chunk| {
        let ni = chunk_idx / cout;
        let co = chunk_idx % cout;
        let x_base = ni * cin * h * w;
        let w_base = co * cin * kh * kw;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let mut acc = bs[co];
                for ci in 0..cin {
                    let xc = x_base + ci * h * w;
                    let wc = w_base + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xc + iy as usize * w;
                        let wrow = wc + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xs[xrow + ix as usize] * ws[wrow + kx];
                        }
                    }
                }
                chunk[oy * ow + ox] = acc;
            }
        }
    });
    Ok(out)
}

/// Gradients of a conv2d: returns (grad_x, grad_weight, grad_bias).
pub fn conv2d_backward(
    x: &Array4<f64>,
    weight: ArrayView4<f64>,
    grad_out: &Array4<f64>,
    stride: usize,
    pad: usize,
    exec: ExecMode,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, h, w) = x.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = grad_out.dim();

    let xs = x.as_slice().expect("contiguous input");
    let ws = weight.as_slice().expect("contiguous weight");
    let gos = grad_out.as_slice().expect("contiguous grad");

    // Input gradient: parallel over samples, each sample's slice is disjoint.
    let mut grad_x = Array4::<f64>::zeros((n, cin, h, w));
    let gx_slice = grad_x.as_slice_mut().unwrap();
    exec.for_each_chunk_mut(gx_slice, cin * h * w, |ni, gx| {
        for co in 0..cout {
            let go_base = (ni * cout + co) * oh * ow;
            let w_base = co * cin * kh * kw;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let g = gos[go_base + oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ci in 0..cin {
                        let gxc = ci * h * w;
                        let wc = w_base + ci * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let gxrow = gxc + iy as usize * w;
                            let wrow = wc + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[gxrow + ix as usize] += g * ws[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    });

    // Weight gradient: parallel over output channels (disjoint weight slices),
    // sequential over samples and positions inside.
    let mut grad_w = Array4::<f64>::zeros((cout, cin, kh, kw));
    let gw_slice = grad_w.as_slice_mut().unwrap();
    exec.for_each_chunk_mut(gw_slice, cin * kh * kw, |co, gw| {
        for ni in 0..n {
            let x_base = ni * cin * h * w;
            let go_base = (ni * cout + co) * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let g = gos[go_base + oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ci in 0..cin {
                        let xc = x_base + ci * h * w;
                        let gwc = ci * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xc + iy as usize * w;
                            let gwrow = gwc + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gw[gwrow + kx] += g * xs[xrow + ix as usize];
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
            let go_base = (ni * cout + co) * oh * ow;
            let mut acc = 0.0;
            for i in 0..oh * ow {
                acc += gos[go_base + i];
            }
            grad_b[co] += acc;
        }
    }

    (grad_x, grad_w, grad_b)
}
