//! The end-to-end classifier: per-modality conv backbones, the attention
//! fusion stage (in any of its ablation wirings), and the MLP head, with a
//! hand-derived reverse pass over the whole graph.

use ndarray::{Array1, Array2, Array3, Array4, Array5};
use serde::{Deserialize, Serialize};

use crate::backbones::{
    backward_2d, backward_3d, forward_2d, forward_3d, BackboneConfig, Stack2dCache, Stack3dCache,
};
use crate::error::{CamfError, Result};
use crate::exec::ExecMode;
use crate::fusion::{
    adaptive_fuse, adaptive_fuse_backward, attention_backward, attention_forward, ce_loss,
    ce_loss_backward, fusion_alphas, head_backward, head_forward, AttentionCache,
    AttentionWeights, FusionMode, FusionState, HeadCache, HeadWeights, ValueSource,
};
use crate::nn::init::kaiming_normal;
use crate::nn::Activation;
use crate::params::ParamSet;
use crate::rng::{rng_for, STREAM_INIT};

/// Everything needed to build the network: input geometry, backbone stacks,
/// attention width, head width, and the fusion wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub roi_count: usize,
    pub grid_shape: (usize, usize, usize),
    pub backbone_2d: BackboneConfig,
    pub backbone_3d: BackboneConfig,
    /// Attention output width.
    pub d2: usize,
    pub classifier_hidden: usize,
    pub fusion_mode: FusionMode,
    pub ca_value_source: ValueSource,
    /// Z-score each connectivity matrix over its entries before the 2-D
    /// stack. Off by default; the raw correlations are used as-is.
    pub zscore_fc: bool,
}

impl ModelConfig {
    /// Full-resolution configuration: 264x264 connectivity matrices and
    /// 121x145x121 volumes, 256-wide latents, 128-wide head.
    pub fn paper_scale() -> Self {
        ModelConfig {
            roi_count: 264,
            grid_shape: (121, 145, 121),
            backbone_2d: BackboneConfig::paper_2d(),
            backbone_3d: BackboneConfig::paper_3d(),
            d2: 256,
            classifier_hidden: 128,
            fusion_mode: FusionMode::Camf,
            ca_value_source: ValueSource::Query,
            zscore_fc: false,
        }
    }

    /// Small configuration sized for the synthetic datasets; the whole
    /// training/interpretation pipeline runs in minutes on a laptop.
    pub fn desk_scale() -> Self {
        ModelConfig {
            roi_count: 32,
            grid_shape: (16, 20, 16),
            backbone_2d: BackboneConfig::stack(&[16, 32]),
            backbone_3d: BackboneConfig::stack(&[16, 32]),
            d2: 32,
            classifier_hidden: 32,
            fusion_mode: FusionMode::Camf,
            ca_value_source: ValueSource::Query,
            zscore_fc: false,
        }
    }

    /// Down-scaled model used by the gradient test suites
    /// (R=16, grid 8x10x8, d1=d2=8, n=3).
    pub fn tiny_gradcheck() -> Self {
        ModelConfig {
            roi_count: 16,
            grid_shape: (8, 10, 8),
            backbone_2d: BackboneConfig::stack(&[8, 8]),
            backbone_3d: BackboneConfig::stack(&[8]),
            d2: 8,
            classifier_hidden: 8,
            fusion_mode: FusionMode::Camf,
            ca_value_source: ValueSource::Query,
            zscore_fc: false,
        }
    }

    pub fn d1(&self) -> usize {
        if self.fusion_mode.uses_fmri() {
            self.backbone_2d.d1()
        } else {
            self.backbone_3d.d1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_2d.validate()?;
        self.backbone_3d.validate()?;
        if self.d2 == 0 || self.classifier_hidden == 0 {
            return Err(CamfError::Config("d2 and classifier_hidden must be positive".into()));
        }
        if self.fusion_mode.uses_fmri() && self.roi_count < self.backbone_2d.min_input() {
            return Err(CamfError::Config(format!(
                "roi_count {} below the 2-D backbone minimum input {}",
                self.roi_count,
                self.backbone_2d.min_input()
            )));
        }
        if self.fusion_mode.uses_smri() {
            let min = self.backbone_3d.min_input();
            let (dx, dy, dz) = self.grid_shape;
            if dx < min || dy < min || dz < min {
                return Err(CamfError::Config(format!(
                    "grid {:?} below the 3-D backbone minimum input {min}",
                    self.grid_shape
                )));
            }
        }
        if self.fusion_mode.uses_fmri()
            && self.fusion_mode.uses_smri()
            && self.backbone_2d.d1() != self.backbone_3d.d1()
        {
            return Err(CamfError::Config(format!(
                "latent widths differ: 2-D d1={} vs 3-D d1={}",
                self.backbone_2d.d1(),
                self.backbone_3d.d1()
            )));
        }
        // The stacks must actually fit the declared input geometry.
        if self.fusion_mode.uses_fmri() {
            self.backbone_2d.out_size(self.roi_count)?;
        }
        if self.fusion_mode.uses_smri() {
            let (dx, dy, dz) = self.grid_shape;
            self.backbone_3d.out_size(dx)?;
            self.backbone_3d.out_size(dy)?;
            self.backbone_3d.out_size(dz)?;
        }
        Ok(())
    }
}

/// One batch of inputs. Both modalities are always carried; modes that
/// ignore one never read it.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (n, R, R) connectivity matrices.
    pub fc: Array3<f64>,
    /// (n, dx, dy, dz) volumes.
    pub vol: Array4<f64>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug)]
pub struct InferenceOutput {
    pub logits: Array2<f64>,
    /// Populated in the full fusion mode only.
    pub fusion_state: Option<FusionState>,
    /// Simplex weights for any adaptive mode (length 2 or 4).
    pub alphas: Option<Vec<f64>>,
    /// Pre-pooling activation maps, retrievable by name for interpretation.
    pub prepool_fmri: Option<Array4<f64>>,
    pub prepool_smri: Option<Array5<f64>>,
}

impl InferenceOutput {
    /// Named-layer retrieval used by the interpretation pipeline.
    pub fn named_activation(&self, name: &str) -> Option<ndarray::ArrayViewD<'_, f64>> {
        match name {
            "fmri.prepool" => self.prepool_fmri.as_ref().map(|a| a.view().into_dyn()),
            "smri.prepool" => self.prepool_smri.as_ref().map(|a| a.view().into_dyn()),
            _ => None,
        }
    }
}

struct ZscoreCache {
    normalized: Array3<f64>,
    inv_std: Vec<f64>,
}

pub struct ForwardCache {
    f1: Option<Array2<f64>>,
    f2: Option<Array2<f64>>,
    stack2d: Option<Stack2dCache>,
    stack3d: Option<Stack3dCache>,
    sa1: Option<(Array2<f64>, AttentionCache)>,
    sa2: Option<(Array2<f64>, AttentionCache)>,
    ca1: Option<(Array2<f64>, AttentionCache)>,
    ca2: Option<(Array2<f64>, AttentionCache)>,
    alphas: Option<Vec<f64>>,
    head: HeadCache,
    zscore: Option<ZscoreCache>,
    pub logits: Array2<f64>,
}

/// Gradients of a scalar function of the logits w.r.t. the raw model inputs.
pub struct InputGrads {
    pub fc: Option<Array3<f64>>,
    pub vol: Option<Array4<f64>>,
}

pub struct CamfModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub exec: ExecMode,
}

const ZSCORE_EPS: f64 = 1e-8;

impl CamfModel {
    /// Fresh model with fan-based weight init, zero biases, zero fusion
    /// logits (uniform branch weights), deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, STREAM_INIT);
        let mut params = ParamSet::new();
        let mode = config.fusion_mode;
        if mode.uses_fmri() {
            config.backbone_2d.register_2d("fmri", &mut params, &mut rng);
        }
        if mode.uses_smri() {
            config.backbone_3d.register_3d("smri", &mut params, &mut rng);
        }
        let d1 = config.d1();
        if mode.uses_self_attention() {
            for name in ["sa1", "sa2"] {
                for proj in ["w_q", "w_k", "w_v"] {
                    params.insert(
                        format!("{name}.{proj}"),
                        kaiming_normal(&[d1, config.d2], d1, &mut rng),
                        true,
                    );
                }
            }
        }
        if mode.uses_cross_attention() {
            for name in ["ca1", "ca2"] {
                for proj in ["w_q", "w_k", "w_v"] {
                    params.insert(
                        format!("{name}.{proj}"),
                        kaiming_normal(&[d1, config.d2], d1, &mut rng),
                        true,
                    );
                }
            }
        }
        let n_logits = mode.n_fusion_logits();
        if n_logits > 0 {
            params.insert(
                "fusion.logits",
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[n_logits])),
                false,
            );
        }
        let head_in = mode.head_input_width(d1, config.d2);
        params.insert(
            "head.fc1.weight",
            kaiming_normal(&[head_in, config.classifier_hidden], head_in, &mut rng),
            true,
        );
        params.insert(
            "head.fc1.bias",
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[config.classifier_hidden])),
            false,
        );
        params.insert(
            "head.fc2.weight",
            kaiming_normal(&[config.classifier_hidden, 2], config.classifier_hidden, &mut rng),
            true,
        );
        params.insert(
            "head.fc2.bias",
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[2])),
            false,
        );
        Ok(CamfModel {
            config,
            params,
            exec: ExecMode::default(),
        })
    }

    fn attn_weights(&self, module: &str) -> AttentionWeights<'_> {
        AttentionWeights {
            w_q: self.param2(&format!("{module}.w_q")),
            w_k: self.param2(&format!("{module}.w_k")),
            w_v: self.param2(&format!("{module}.w_v")),
        }
    }

    fn param2(&self, name: &str) -> ndarray::ArrayView2<'_, f64> {
        self.params
            .get(name)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank-2 parameter")
    }

    fn param1(&self, name: &str) -> ndarray::ArrayView1<'_, f64> {
        self.params
            .get(name)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank-1 parameter")
    }

    pub(crate) fn head_weights(&self) -> HeadWeights<'_> {
        HeadWeights {
            w1: self.param2("head.fc1.weight"),
            b1: self.param1("head.fc1.bias"),
            w2: self.param2("head.fc2.weight"),
            b2: self.param1("head.fc2.bias"),
            activation: Activation::Relu,
        }
    }

    /// Inference forward pass; also exposes the pre-pooling maps.
    pub fn forward(&self, batch: &Batch) -> Result<InferenceOutput> {
        let (cache, prepool2d, prepool3d) = self.forward_impl(batch, false)?;
        let fusion_state = self.fusion_state_from(&cache);
        Ok(InferenceOutput {
            logits: cache.logits,
            fusion_state,
            alphas: cache.alphas,
            prepool_fmri: prepool2d,
            prepool_smri: prepool3d,
        })
    }

    /// Forward keeping everything needed for `backward`.
    pub fn forward_cached(&self, batch: &Batch) -> Result<ForwardCache> {
        let (cache, _, _) = self.forward_impl(batch, true)?;
        Ok(cache)
    }

    fn fusion_state_from(&self, cache: &ForwardCache) -> Option<FusionState> {
        if self.config.fusion_mode != FusionMode::Camf {
            return None;
        }
        let logits_t = self.params.get("fusion.logits");
        let logits = [logits_t[[0]], logits_t[[1]], logits_t[[2]], logits_t[[3]]];
        let a = cache.alphas.as_ref().unwrap();
        Some(FusionState {
            f_sa1: cache.sa1.as_ref().unwrap().0.clone(),
            f_sa2: cache.sa2.as_ref().unwrap().0.clone(),
            f_ca1: cache.ca1.as_ref().unwrap().0.clone(),
            f_ca2: cache.ca2.as_ref().unwrap().0.clone(),
            logits,
            alphas: [a[0], a[1], a[2], a[3]],
        })
    }

    fn check_finite_3(x: &Array3<f64>, what: &str) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CamfError::Data(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    fn check_finite_4(x: &Array4<f64>, what: &str) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CamfError::Data(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    fn zscore_forward(&self, fc: &Array3<f64>) -> (Array3<f64>, ZscoreCache) {
        let (n, r, _) = fc.dim();
        let count = (r * r) as f64;
        let mut out = fc.clone();
        let mut inv_std = Vec::with_capacity(n);
        for mut m in out.outer_iter_mut() {
            let mean = m.sum() / count;
            let var = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let inv = 1.0 / (var + ZSCORE_EPS).sqrt();
            m.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let cache = ZscoreCache {
            normalized: out.clone(),
            inv_std,
        };
        (out, cache)
    }

    fn zscore_backward(&self, cache: &ZscoreCache, grad: &Array3<f64>) -> Array3<f64> {
        let (n, r, _) = grad.dim();
        let count = (r * r) as f64;
        let mut out = Array3::<f64>::zeros(grad.raw_dim());
        for i in 0..n {
            let g = grad.index_axis(ndarray::Axis(0), i);
            let z = cache.normalized.index_axis(ndarray::Axis(0), i);
            let g_mean = g.sum() / count;
            let gz_mean = g.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() / count;
            let inv = cache.inv_std[i];
            let mut o = out.index_axis_mut(ndarray::Axis(0), i);
            o.iter_mut()
                .zip(g.iter().zip(z.iter()))
                .for_each(|(ov, (&gv, &zv))| *ov = inv * (gv - g_mean - zv * gz_mean));
        }
        out
    }

    fn forward_impl(
        &self,
        batch: &Batch,
        keep_cache: bool,
    ) -> Result<(ForwardCache, Option<Array4<f64>>, Option<Array5<f64>>)> {
        let n = batch.n();
        if n == 0 {
            return Err(CamfError::EmptyBatch);
        }
        let mode = self.config.fusion_mode;
        let r = self.config.roi_count;
        let (gx, gy, gz) = self.config.grid_shape;

        let mut zscore = None;
        let mut f1 = None;
        let mut stack2d = None;
        let mut prepool2d = None;
        if mode.uses_fmri() {
            let dim = batch.fc.dim();
            if dim != (n, r, r) {
                return Err(CamfError::Data(format!(
                    "fc batch shape {:?} does not match (n={n}, R={r}, R={r})",
                    dim
                )));
            }
            Self::check_finite_3(&batch.fc, "fc batch")?;
            let fc = if self.config.zscore_fc {
                let (normalized, cache) = self.zscore_forward(&batch.fc);
                zscore = Some(cache);
                normalized
            } else {
                batch.fc.clone()
            };
            let x = fc.into_shape((n, 1, r, r)).unwrap();
            let out = forward_2d(
                &self.config.backbone_2d,
                &self.params,
                "fmri",
                &x,
                self.exec,
                keep_cache,
            )?;
            f1 = Some(out.features);
            stack2d = out.cache;
            prepool2d = Some(out.prepool);
        }

        let mut f2 = None;
        let mut stack3d = None;
        let mut prepool3d = None;
        if mode.uses_smri() {
            let dim = batch.vol.dim();
            if dim != (n, gx, gy, gz) {
                return Err(CamfError::Data(format!(
                    "volume batch shape {:?} does not match (n={n}, {gx}, {gy}, {gz})",
                    dim
                )));
            }
            Self::check_finite_4(&batch.vol, "volume batch")?;
            let x = batch
                .vol
                .clone()
                .into_shape((n, 1, gx, gy, gz))
                .unwrap();
            let out = forward_3d(
                &self.config.backbone_3d,
                &self.params,
                "smri",
                &x,
                self.exec,
                keep_cache,
            )?;
            f2 = Some(out.features);
            stack3d = out.cache;
            prepool3d = Some(out.prepool);
        }

        let vsrc = self.config.ca_value_source;
        let mut sa1 = None;
        let mut sa2 = None;
        let mut ca1 = None;
        let mut ca2 = None;
        if mode.uses_self_attention() {
            let (o1, c1) =
                attention_forward(f1.as_ref().unwrap(), f1.as_ref().unwrap(), &self.attn_weights("sa1"), ValueSource::Query)?;
            sa1 = Some((o1, c1));
            let (o2, c2) =
                attention_forward(f2.as_ref().unwrap(), f2.as_ref().unwrap(), &self.attn_weights("sa2"), ValueSource::Query)?;
            sa2 = Some((o2, c2));
        }
        if mode.uses_cross_attention() {
            let (o1, c1) = attention_forward(
                f1.as_ref().unwrap(),
                f2.as_ref().unwrap(),
                &self.attn_weights("ca1"),
                vsrc,
            )?;
            ca1 = Some((o1, c1));
            let (o2, c2) = attention_forward(
                f2.as_ref().unwrap(),
                f1.as_ref().unwrap(),
                &self.attn_weights("ca2"),
                vsrc,
            )?;
            ca2 = Some((o2, c2));
        }

        // Fusion stage: build the head input.
        let mut alphas_out = None;
        let head_input: Array2<f64> = match mode {
            FusionMode::Camf => {
                let logits = self.params.get("fusion.logits");
                let alphas = fusion_alphas(logits.as_slice().unwrap());
                let fused = adaptive_fuse(
                    &[
                        &sa1.as_ref().unwrap().0,
                        &sa2.as_ref().unwrap().0,
                        &ca1.as_ref().unwrap().0,
                        &ca2.as_ref().unwrap().0,
                    ],
                    &alphas,
                )?;
                alphas_out = Some(alphas);
                fused
            }
            FusionMode::SaAdaptive => {
                let logits = self.params.get("fusion.logits");
                let alphas = fusion_alphas(logits.as_slice().unwrap());
                let fused = adaptive_fuse(
                    &[&sa1.as_ref().unwrap().0, &sa2.as_ref().unwrap().0],
                    &alphas,
                )?;
                alphas_out = Some(alphas);
                fused
            }
            FusionMode::CaAdaptive => {
                let logits = self.params.get("fusion.logits");
                let alphas = fusion_alphas(logits.as_slice().unwrap());
                let fused = adaptive_fuse(
                    &[&ca1.as_ref().unwrap().0, &ca2.as_ref().unwrap().0],
                    &alphas,
                )?;
                alphas_out = Some(alphas);
                fused
            }
            FusionMode::AdaptiveWeights => {
                let logits = self.params.get("fusion.logits");
                let alphas = fusion_alphas(logits.as_slice().unwrap());
                let fused =
                    adaptive_fuse(&[f1.as_ref().unwrap(), f2.as_ref().unwrap()], &alphas)?;
                alphas_out = Some(alphas);
                fused
            }
            FusionMode::AttnConcat => concat_cols(&[
                &sa1.as_ref().unwrap().0,
                &sa2.as_ref().unwrap().0,
                &ca1.as_ref().unwrap().0,
                &ca2.as_ref().unwrap().0,
            ]),
            FusionMode::Concat => concat_cols(&[f1.as_ref().unwrap(), f2.as_ref().unwrap()]),
            FusionMode::ElementwiseSum => f1.as_ref().unwrap() + f2.as_ref().unwrap(),
            FusionMode::UnimodalFmri => f1.as_ref().unwrap().clone(),
            FusionMode::UnimodalSmri => f2.as_ref().unwrap().clone(),
        };

        let (logits, head_cache) = head_forward(&head_input, &self.head_weights());
        Ok((
            ForwardCache {
                f1,
                f2,
                stack2d,
                stack3d,
                sa1,
                sa2,
                ca1,
                ca2,
                alphas: alphas_out,
                head: head_cache,
                zscore,
                logits,
            },
            prepool2d,
            prepool3d,
        ))
    }

    /// Reverse pass from an arbitrary gradient on the logits. Returns the
    /// parameter gradients and the gradients w.r.t. the raw inputs.
    pub fn backward(
        &self,
        batch: &Batch,
        cache: &ForwardCache,
        grad_logits: &Array2<f64>,
    ) -> (ParamSet, InputGrads) {
        let mode = self.config.fusion_mode;
        let mut grads = self.params.zeros_like();
        let n = batch.n();
        let d1 = self.config.d1();

        let head_grads = head_backward(&self.head_weights(), &cache.head, grad_logits);
        *grads.get_mut("head.fc1.weight") += &head_grads.d_w1.into_dyn();
        *grads.get_mut("head.fc1.bias") += &head_grads.d_b1.into_dyn();
        *grads.get_mut("head.fc2.weight") += &head_grads.d_w2.into_dyn();
        *grads.get_mut("head.fc2.bias") += &head_grads.d_b2.into_dyn();
        let d_fused = head_grads.d_input;

        // Route the fused gradient to the attention branches / latent features.
        let mut d_f1 = Array2::<f64>::zeros((n, d1));
        let mut d_f2 = Array2::<f64>::zeros((n, d1));
        let mut d_sa1 = None;
        let mut d_sa2 = None;
        let mut d_ca1 = None;
        let mut d_ca2 = None;
        match mode {
            FusionMode::Camf => {
                let branches = [
                    &cache.sa1.as_ref().unwrap().0,
                    &cache.sa2.as_ref().unwrap().0,
                    &cache.ca1.as_ref().unwrap().0,
                    &cache.ca2.as_ref().unwrap().0,
                ];
                let alphas = cache.alphas.as_ref().unwrap();
                let (mut d_branches, d_logits) =
                    adaptive_fuse_backward(&branches, alphas, &d_fused);
                *grads.get_mut("fusion.logits") +=
                    &Array1::from(d_logits).into_dyn();
                d_ca2 = Some(d_branches.pop().unwrap());
                d_ca1 = Some(d_branches.pop().unwrap());
                d_sa2 = Some(d_branches.pop().unwrap());
                d_sa1 = Some(d_branches.pop().unwrap());
            }
            FusionMode::SaAdaptive => {
                let branches = [
                    &cache.sa1.as_ref().unwrap().0,
                    &cache.sa2.as_ref().unwrap().0,
                ];
                let alphas = cache.alphas.as_ref().unwrap();
                let (mut d_branches, d_logits) =
                    adaptive_fuse_backward(&branches, alphas, &d_fused);
                *grads.get_mut("fusion.logits") += &Array1::from(d_logits).into_dyn();
                d_sa2 = Some(d_branches.pop().unwrap());
                d_sa1 = Some(d_branches.pop().unwrap());
            }
            FusionMode::CaAdaptive => {
                let branches = [
                    &cache.ca1.as_ref().unwrap().0,
                    &cache.ca2.as_ref().unwrap().0,
                ];
                let alphas = cache.alphas.as_ref().unwrap();
                let (mut d_branches, d_logits) =
                    adaptive_fuse_backward(&branches, alphas, &d_fused);
                *grads.get_mut("fusion.logits") += &Array1::from(d_logits).into_dyn();
                d_ca2 = Some(d_branches.pop().unwrap());
                d_ca1 = Some(d_branches.pop().unwrap());
            }
            FusionMode::AdaptiveWeights => {
                let branches = [cache.f1.as_ref().unwrap(), cache.f2.as_ref().unwrap()];
                let alphas = cache.alphas.as_ref().unwrap();
                let (mut d_branches, d_logits) =
                    adaptive_fuse_backward(&branches, alphas, &d_fused);
                *grads.get_mut("fusion.logits") += &Array1::from(d_logits).into_dyn();
                d_f2 += &d_branches.pop().unwrap();
                d_f1 += &d_branches.pop().unwrap();
            }
            FusionMode::AttnConcat => {
                let d2 = self.config.d2;
                d_sa1 = Some(d_fused.slice(ndarray::s![.., 0..d2]).to_owned());
                d_sa2 = Some(d_fused.slice(ndarray::s![.., d2..2 * d2]).to_owned());
                d_ca1 = Some(d_fused.slice(ndarray::s![.., 2 * d2..3 * d2]).to_owned());
                d_ca2 = Some(d_fused.slice(ndarray::s![.., 3 * d2..4 * d2]).to_owned());
            }
            FusionMode::Concat => {
                d_f1 += &d_fused.slice(ndarray::s![.., 0..d1]);
                d_f2 += &d_fused.slice(ndarray::s![.., d1..2 * d1]);
            }
            FusionMode::ElementwiseSum => {
                d_f1 += &d_fused;
                d_f2 += &d_fused;
            }
            FusionMode::UnimodalFmri => {
                d_f1 += &d_fused;
            }
            FusionMode::UnimodalSmri => {
                d_f2 += &d_fused;
            }
        }

        // Attention modules.
        let vsrc = self.config.ca_value_source;
        if let Some(d_out) = d_sa1 {
            let f = cache.f1.as_ref().unwrap();
            let w = self.attn_weights("sa1");
            let g = attention_backward(f, f, &w, ValueSource::Query, &cache.sa1.as_ref().unwrap().1, &d_out);
            *grads.get_mut("sa1.w_q") += &g.d_w_q.into_dyn();
            *grads.get_mut("sa1.w_k") += &g.d_w_k.into_dyn();
            *grads.get_mut("sa1.w_v") += &g.d_w_v.into_dyn();
            d_f1 += &g.d_f_query;
            d_f1 += &g.d_f_key;
        }
        if let Some(d_out) = d_sa2 {
            let f = cache.f2.as_ref().unwrap();
            let w = self.attn_weights("sa2");
            let g = attention_backward(f, f, &w, ValueSource::Query, &cache.sa2.as_ref().unwrap().1, &d_out);
            *grads.get_mut("sa2.w_q") += &g.d_w_q.into_dyn();
            *grads.get_mut("sa2.w_k") += &g.d_w_k.into_dyn();
            *grads.get_mut("sa2.w_v") += &g.d_w_v.into_dyn();
            d_f2 += &g.d_f_query;
            d_f2 += &g.d_f_key;
        }
        if let Some(d_out) = d_ca1 {
            let fq = cache.f1.as_ref().unwrap();
            let fk = cache.f2.as_ref().unwrap();
            let w = self.attn_weights("ca1");
            let g = attention_backward(fq, fk, &w, vsrc, &cache.ca1.as_ref().unwrap().1, &d_out);
            *grads.get_mut("ca1.w_q") += &g.d_w_q.into_dyn();
            *grads.get_mut("ca1.w_k") += &g.d_w_k.into_dyn();
            *grads.get_mut("ca1.w_v") += &g.d_w_v.into_dyn();
            d_f1 += &g.d_f_query;
            d_f2 += &g.d_f_key;
        }
        if let Some(d_out) = d_ca2 {
            let fq = cache.f2.as_ref().unwrap();
            let fk = cache.f1.as_ref().unwrap();
            let w = self.attn_weights("ca2");
            let g = attention_backward(fq, fk, &w, vsrc, &cache.ca2.as_ref().unwrap().1, &d_out);
            *grads.get_mut("ca2.w_q") += &g.d_w_q.into_dyn();
            *grads.get_mut("ca2.w_k") += &g.d_w_k.into_dyn();
            *grads.get_mut("ca2.w_v") += &g.d_w_v.into_dyn();
            d_f2 += &g.d_f_query;
            d_f1 += &g.d_f_key;
        }

        // Backbones down to the raw inputs.
        let r = self.config.roi_count;
        let (gxd, gyd, gzd) = self.config.grid_shape;
        let mut grad_fc = None;
        if mode.uses_fmri() {
            let gx4 = backward_2d(
                &self.config.backbone_2d,
                &self.params,
                "fmri",
                cache.stack2d.as_ref().expect("training cache"),
                &d_f1,
                &mut grads,
                self.exec,
            );
            let g3 = gx4.into_shape((n, r, r)).unwrap();
            let g3 = match (&cache.zscore, self.config.zscore_fc) {
                (Some(z), true) => self.zscore_backward(z, &g3),
                _ => g3,
            };
            grad_fc = Some(g3);
        }
        let mut grad_vol = None;
        if mode.uses_smri() {
            let gx5 = backward_3d(
                &self.config.backbone_3d,
                &self.params,
                "smri",
                cache.stack3d.as_ref().expect("training cache"),
                &d_f2,
                &mut grads,
                self.exec,
            );
            grad_vol = Some(gx5.into_shape((n, gxd, gyd, gzd)).unwrap());
        }

        (
            grads,
            InputGrads {
                fc: grad_fc,
                vol: grad_vol,
            },
        )
    }

    /// Mean cross-entropy on the batch plus the gradients of every parameter
    /// group: the one call the trainer needs per step.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, ParamSet, Array2<f64>)> {
        let cache = self.forward_cached(batch)?;
        let loss = ce_loss(&cache.logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(CamfError::Numeric(format!("non-finite loss {loss}")));
        }
        let grad_logits = ce_loss_backward(&cache.logits, &batch.labels);
        let (grads, _) = self.backward(batch, &cache, &grad_logits);
        let logits = cache.logits;
        Ok((loss, grads, logits))
    }

    /// Loss only (used by the finite-difference suites).
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let cache = self.forward_cached(batch)?;
        ce_loss(&cache.logits, &batch.labels)
    }

    /// Gradient of `sum_i logits[i, class_i]` w.r.t. the raw inputs.
    pub fn input_gradient(&self, batch: &Batch, classes: &[u8]) -> Result<InputGrads> {
        let cache = self.forward_cached(batch)?;
        let mut grad_logits = Array2::<f64>::zeros(cache.logits.raw_dim());
        for (i, &c) in classes.iter().enumerate() {
            grad_logits[[i, c as usize]] = 1.0;
        }
        let (_, input_grads) = self.backward(batch, &cache, &grad_logits);
        Ok(input_grads)
    }
}

fn concat_cols(parts: &[&Array2<f64>]) -> Array2<f64> {
    let n = parts[0].nrows();
    let total: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::<f64>::zeros((n, total));
    let mut col = 0;
    for p in parts {
        out.slice_mut(ndarray::s![.., col..col + p.ncols()]).assign(p);
        col += p.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::predict;

    fn desk_batch(seed: u64, n: usize) -> Batch {
        use rand::Rng;
        let mut rng = rng_for(seed, 99);
        let cfg = ModelConfig::desk_scale();
        let r = cfg.roi_count;
        let (gx, gy, gz) = cfg.grid_shape;
        Batch {
            fc: Array3::from_shape_fn((n, r, r), |_| rng.gen_range(-1.0..1.0)),
            vol: Array4::from_shape_fn((n, gx, gy, gz), |_| rng.gen_range(-1.0..1.0)),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
        }
    }

    #[test]
    fn camf_forward_shapes_and_state() {
        let model = CamfModel::init(ModelConfig::desk_scale(), 7).unwrap();
        let batch = desk_batch(1, 4);
        let out = model.forward(&batch).unwrap();
        assert_eq!(out.logits.dim(), (4, 2));
        assert!(out.named_activation("fmri.prepool").is_some());
        assert!(out.named_activation("smri.prepool").is_some());
        assert!(out.named_activation("nope").is_none());
        let fs = out.fusion_state.expect("camf populates the fusion state");
        assert_eq!(fs.f_sa1.dim(), (4, 32));
        let sum: f64 = fs.alphas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        // Zero-initialized logits start at the uniform simplex point.
        for a in fs.alphas {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn unimodal_fmri_ignores_volume_bits() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.fusion_mode = FusionMode::UnimodalFmri;
        let model = CamfModel::init(cfg, 7).unwrap();
        let batch = desk_batch(2, 3);
        let a = model.forward(&batch).unwrap();
        let mut perturbed = batch.clone();
        perturbed.vol.mapv_inplace(|v| v * -3.0 + 1.7);
        let b = model.forward(&perturbed).unwrap();
        assert_eq!(a.logits, b.logits); // bit-identical
    }

    #[test]
    fn elementwise_sum_matches_composition_oracle() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.fusion_mode = FusionMode::ElementwiseSum;
        let model = CamfModel::init(cfg.clone(), 11).unwrap();
        let batch = desk_batch(3, 3);
        let out = model.forward(&batch).unwrap();

        // Oracle: run the extractors and the head by hand on the same params.
        let n = batch.n();
        let x2 = batch
            .fc
            .clone()
            .into_shape((n, 1, cfg.roi_count, cfg.roi_count))
            .unwrap();
        let f1 = forward_2d(&cfg.backbone_2d, &model.params, "fmri", &x2, model.exec, false)
            .unwrap()
            .features;
        let (gx, gy, gz) = cfg.grid_shape;
        let x3 = batch.vol.clone().into_shape((n, 1, gx, gy, gz)).unwrap();
        let f2 = forward_3d(&cfg.backbone_3d, &model.params, "smri", &x3, model.exec, false)
            .unwrap()
            .features;
        let fused = &f1 + &f2;
        let (want, _) = head_forward(&fused, &model.head_weights());
        assert_eq!(out.logits, want);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let model = CamfModel::init(ModelConfig::desk_scale(), 5).unwrap();
        let batch = desk_batch(4, 5);
        let out = model.forward(&batch).unwrap();
        // Reverse the batch.
        let idx: Vec<usize> = (0..5).rev().collect();
        let mut rev = batch.clone();
        for (new_i, &old_i) in idx.iter().enumerate() {
            rev.fc
                .index_axis_mut(ndarray::Axis(0), new_i)
                .assign(&batch.fc.index_axis(ndarray::Axis(0), old_i));
            rev.vol
                .index_axis_mut(ndarray::Axis(0), new_i)
                .assign(&batch.vol.index_axis(ndarray::Axis(0), old_i));
            rev.labels[new_i] = batch.labels[old_i];
        }
        let out_rev = model.forward(&rev).unwrap();
        for (new_i, &old_i) in idx.iter().enumerate() {
            for c in 0..2 {
                let a = out.logits[[old_i, c]];
                let b = out_rev.logits[[new_i, c]];
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn predictions_follow_argmax() {
        let model = CamfModel::init(ModelConfig::desk_scale(), 7).unwrap();
        let batch = desk_batch(8, 4);
        let out = model.forward(&batch).unwrap();
        let preds = predict(&out.logits);
        assert_eq!(preds.len(), 4);
    }

    #[test]
    fn empty_batch_rejected() {
        let model = CamfModel::init(ModelConfig::desk_scale(), 7).unwrap();
        let batch = Batch {
            fc: Array3::zeros((0, 32, 32)),
            vol: Array4::zeros((0, 16, 20, 16)),
            labels: vec![],
        };
        assert!(matches!(model.forward(&batch), Err(CamfError::EmptyBatch)));
    }

    #[test]
    fn non_finite_input_rejected() {
        let model = CamfModel::init(ModelConfig::desk_scale(), 7).unwrap();
        let mut batch = desk_batch(1, 2);
        batch.fc[[0, 3, 4]] = f64::NAN;
        match model.forward(&batch) {
            Err(CamfError::Data(msg)) => assert!(msg.contains("non-finite")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = CamfModel::init(ModelConfig::desk_scale(), 42).unwrap();
        let b = CamfModel::init(ModelConfig::desk_scale(), 42).unwrap();
        for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(ta.values, tb.values, "{}", ta.name);
        }
        for t in a.params.tensors() {
            if t.name.ends_with(".bias") || t.name == "fusion.logits" {
                assert!(t.values.iter().all(|&v| v == 0.0), "{} not zero", t.name);
            }
        }
    }

    #[test]
    fn zscore_backward_matches_finite_differences() {
        let mut cfg = ModelConfig::desk_scale();
        cfg.zscore_fc = true;
        cfg.fusion_mode = FusionMode::UnimodalFmri;
        let model = CamfModel::init(cfg, 3).unwrap();
        let batch = desk_batch(6, 2);
        let cache = model.forward_cached(&batch).unwrap();
        let grad_logits = ce_loss_backward(&cache.logits, &batch.labels);
        let (_, ig) = model.backward(&batch, &cache, &grad_logits);
        let gfc = ig.fc.unwrap();
        let h = 1e-6;
        for idx in [[0usize, 5, 7], [1, 20, 3]] {
            let mut bp = batch.clone();
            bp.fc[idx] += h;
            let mut bm = batch.clone();
            bm.fc[idx] -= h;
            let lp = model.loss(&bp).unwrap();
            let lm = model.loss(&bm).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (gfc[idx] - fd).abs() < 1e-6,
                "fd {fd} analytic {}",
                gfc[idx]
            );
        }
    }
}
