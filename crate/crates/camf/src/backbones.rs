//! Convolutional feature extractors.
//!
//! A backbone is a stack of conv blocks followed by global max pooling; the
//! pooled vector is the per-modality latent feature. The same config type
//! drives the 2-D (connectivity matrix) and 3-D (volume) stacks.

use ndarray::{Array2, Array4, Array5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CamfError, Result};
use crate::exec::ExecMode;
use crate::nn::conv2d::{conv2d_backward, conv2d_forward, conv_out_size};
use crate::nn::conv3d::{conv3d_backward, conv3d_forward};
use crate::nn::init::kaiming_normal;
use crate::nn::pool::{global_max_pool, global_max_pool_backward};
use crate::nn::Activation;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockCfg {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Stack description shared by both modalities. The last block's
/// `out_channels` is the latent width `d1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: Vec<ConvBlockCfg>,
    pub activation: Activation,
}

impl BackboneConfig {
    /// Kernel-4 / stride-2 / no-padding stack with the given channel
    /// progression; this is the default family used throughout.
    pub fn stack(channels: &[usize]) -> Self {
        BackboneConfig {
            blocks: channels
                .iter()
                .map(|&c| ConvBlockCfg {
                    out_channels: c,
                    kernel: 4,
                    stride: 2,
                    padding: 0,
                })
                .collect(),
            activation: Activation::Relu,
        }
    }

    /// Five blocks reducing a 264x264 connectivity matrix to 6x6 spatial maps.
    pub fn paper_2d() -> Self {
        Self::stack(&[32, 64, 128, 256, 256])
    }

    /// Four blocks reducing a 121x145x121 volume to 5x7x5 spatial maps.
    pub fn paper_3d() -> Self {
        Self::stack(&[32, 64, 128, 256])
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(CamfError::Config("backbone needs at least one conv block".into()));
        }
        for b in &self.blocks {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(CamfError::Config("conv block fields must be positive".into()));
            }
        }
        Ok(())
    }

    /// Latent feature width = channels of the last conv block.
    pub fn d1(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    /// Spatial size along one axis after the whole stack.
    pub fn out_size(&self, mut size: usize) -> Result<usize> {
        for b in &self.blocks {
            size = conv_out_size(size, b.kernel, b.stride, b.padding)?;
        }
        Ok(size)
    }

    /// Smallest per-axis input size the stack accepts (every block must see
    /// an input at least as large as its kernel after padding).
    pub fn min_input(&self) -> usize {
        let mut need = 1usize;
        for b in self.blocks.iter().rev() {
            // in >= (out-1)*stride + kernel - 2*padding
            let raw = (need - 1) * b.stride + b.kernel;
            need = raw.saturating_sub(2 * b.padding).max(1);
        }
        need
    }

    fn names(&self, prefix: &str) -> Vec<(String, String)> {
        (0..self.blocks.len())
            .map(|i| (format!("{prefix}.conv{i}.weight"), format!("{prefix}.conv{i}.bias")))
            .collect()
    }

    /// Registers freshly initialized parameters for a 2-D stack.
    pub fn register_2d<R: Rng>(&self, prefix: &str, params: &mut ParamSet, rng: &mut R) {
        let mut cin = 1usize;
        for (i, b) in self.blocks.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel;
            let w = kaiming_normal(&[b.out_channels, cin, b.kernel, b.kernel], fan_in, rng);
            params.insert(format!("{prefix}.conv{i}.weight"), w, true);
            params.insert(
                format!("{prefix}.conv{i}.bias"),
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[b.out_channels])),
                false,
            );
            cin = b.out_channels;
        }
    }

    /// Registers freshly initialized parameters for a 3-D stack.
    pub fn register_3d<R: Rng>(&self, prefix: &str, params: &mut ParamSet, rng: &mut R) {
        let mut cin = 1usize;
        for (i, b) in self.blocks.iter().enumerate() {
            let fan_in = cin * b.kernel * b.kernel * b.kernel;
            let w = kaiming_normal(
                &[b.out_channels, cin, b.kernel, b.kernel, b.kernel],
                fan_in,
                rng,
            );
            params.insert(format!("{prefix}.conv{i}.weight"), w, true);
            params.insert(
                format!("{prefix}.conv{i}.bias"),
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[b.out_channels])),
                false,
            );
            cin = b.out_channels;
        }
    }
}

/// Forward state of a 2-D stack kept for the backward pass.
pub struct Stack2dCache {
    /// inputs[0] is the raw input; inputs[i+1] the post-activation of block i.
    pub inputs: Vec<Array4<f64>>,
    pub preacts: Vec<Array4<f64>>,
    pub argmax: Vec<usize>,
}

pub struct Stack2dOutput {
    pub features: Array2<f64>,
    /// Post-activation maps of the last block (the pre-pooling tensor).
    pub prepool: Array4<f64>,
    pub cache: Option<Stack2dCache>,
}

pub fn forward_2d(
    cfg: &BackboneConfig,
    params: &ParamSet,
    prefix: &str,
    x: &Array4<f64>,
    exec: ExecMode,
    keep_cache: bool,
) -> Result<Stack2dOutput> {
    let names = cfg.names(prefix);
    let mut inputs: Vec<Array4<f64>> = vec![x.clone()];
    let mut preacts: Vec<Array4<f64>> = Vec::new();
    let mut cur = x.clone();
    for (b, (wname, bname)) in cfg.blocks.iter().zip(&names) {
        let w = params
            .get(wname)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("2d conv weight rank");
        let bias = params
            .get(bname)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias rank");
        let z = conv2d_forward(&cur, w, bias, b.stride, b.padding, exec)?;
        let mut a = z.clone();
        a.mapv_inplace(|v| cfg.activation.apply(v));
        preacts.push(z);
        inputs.push(a.clone());
        cur = a;
    }
    let (n, c, h, w) = cur.dim();
    let (features, argmax) = global_max_pool(cur.as_slice().unwrap(), n, c, h * w);
    Ok(Stack2dOutput {
        features,
        prepool: cur,
        cache: if keep_cache {
            Some(Stack2dCache {
                inputs,
                preacts,
                argmax,
            })
        } else {
            None
        },
    })
}

/// Backward through pool + conv stack. Accumulates parameter gradients into
/// `grads` and returns the gradient w.r.t. the stack input.
pub fn backward_2d(
    cfg: &BackboneConfig,
    params: &ParamSet,
    prefix: &str,
    cache: &Stack2dCache,
    grad_features: &Array2<f64>,
    grads: &mut ParamSet,
    exec: ExecMode,
) -> Array4<f64> {
    let names = cfg.names(prefix);
    let last = cache.inputs.last().unwrap();
    let (n, c, h, w) = last.dim();
    let flat = global_max_pool_backward(grad_features, &cache.argmax, h * w);
    let mut grad_act = Array4::from_shape_vec((n, c, h, w), flat).unwrap();

    for (i, b) in cfg.blocks.iter().enumerate().rev() {
        // Through the nonlinearity.
        let mut grad_z = grad_act;
        grad_z
            .iter_mut()
            .zip(cache.preacts[i].iter())
            .for_each(|(g, &z)| *g *= cfg.activation.derivative(z));
        let wt = params
            .get(&names[i].0)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let (gx, gw, gb) = conv2d_backward(&cache.inputs[i], wt, &grad_z, b.stride, b.padding, exec);
        *grads.get_mut(&names[i].0) += &gw.into_dyn();
        *grads.get_mut(&names[i].1) += &gb.into_dyn();
        grad_act = gx;
    }
    grad_act
}

pub struct Stack3dCache {
    pub inputs: Vec<Array5<f64>>,
    pub preacts: Vec<Array5<f64>>,
    pub argmax: Vec<usize>,
}

pub struct Stack3dOutput {
    pub features: Array2<f64>,
    pub prepool: Array5<f64>,
    pub cache: Option<Stack3dCache>,
}

pub fn forward_3d(
    cfg: &BackboneConfig,
    params: &ParamSet,
    prefix: &str,
    x: &Array5<f64>,
    exec: ExecMode,
    keep_cache: bool,
) -> Result<Stack3dOutput> {
    let names = cfg.names(prefix);
    let mut inputs: Vec<Array5<f64>> = vec![x.clone()];
    let mut preacts: Vec<Array5<f64>> = Vec::new();
    let mut cur = x.clone();
    for (b, (wname, bname)) in cfg.blocks.iter().zip(&names) {
        let w = params
            .get(wname)
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .expect("3d conv weight rank");
        let bias = params
            .get(bname)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias rank");
        let z = conv3d_forward(&cur, w, bias, b.stride, b.padding, exec)?;
        let mut a = z.clone();
        a.mapv_inplace(|v| cfg.activation.apply(v));
        preacts.push(z);
        inputs.push(a.clone());
        cur = a;
    }
    let (n, c, dx, dy, dz) = cur.dim();
    let (features, argmax) = global_max_pool(cur.as_slice().unwrap(), n, c, dx * dy * dz);
    Ok(Stack3dOutput {
        features,
        prepool: cur,
        cache: if keep_cache {
            Some(Stack3dCache {
                inputs,
                preacts,
                argmax,
            })
        } else {
            None
        },
    })
}

pub fn backward_3d(
    cfg: &BackboneConfig,
    params: &ParamSet,
    prefix: &str,
    cache: &Stack3dCache,
    grad_features: &Array2<f64>,
    grads: &mut ParamSet,
    exec: ExecMode,
) -> Array5<f64> {
    let names = cfg.names(prefix);
    let last = cache.inputs.last().unwrap();
    let (n, c, dx, dy, dz) = last.dim();
    let flat = global_max_pool_backward(grad_features, &cache.argmax, dx * dy * dz);
    let mut grad_act = Array5::from_shape_vec((n, c, dx, dy, dz), flat).unwrap();

    for (i, b) in cfg.blocks.iter().enumerate().rev() {
        let mut grad_z = grad_act;
        grad_z
            .iter_mut()
            .zip(cache.preacts[i].iter())
            .for_each(|(g, &z)| *g *= cfg.activation.derivative(z));
        let wt = params
            .get(&names[i].0)
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .unwrap();
        let (gx, gw, gb) = conv3d_backward(&cache.inputs[i], wt, &grad_z, b.stride, b.padding, exec);
        *grads.get_mut(&names[i].0) += &gw.into_dyn();
        *grads.get_mut(&names[i].1) += &gb.into_dyn();
        grad_act = gx;
    }
    grad_act
}
