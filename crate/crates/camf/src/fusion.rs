//! The fusion core: self-attention and cross-attention over the batch,
//! simplex-weighted adaptive combination, the MLP classifier head, and the
//! cross-entropy loss. Attention operates across subjects: the n x n
//! attention matrix relates samples in the batch, not tokens.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CamfError, Result};
use crate::nn::linear::{linear_backward, linear_forward, matmul, matmul_nt, matmul_tn};
use crate::nn::softmax::{
    log_sum_exp, softmax_rows, softmax_rows_backward, softmax_vec, softmax_vec_backward,
};
use crate::nn::Activation;

/// Which modality supplies the attention values in a cross-attention module.
/// `Query` matches the fusion equations as written; `Key` is the conventional
/// cross-attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    #[default]
    Query,
    Key,
}

/// The enumerated fusion wirings: the full model, its ablations, and the
/// uni-modal baselines. String spellings are the config/CLI vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Two self-attention + two cross-attention branches, adaptively weighted.
    #[default]
    Camf,
    /// f1 + f2, elementwise.
    ElementwiseSum,
    /// [f1, f2] concatenated.
    Concat,
    /// Adaptive simplex weights over the raw latent features (no attention).
    AdaptiveWeights,
    /// Two self-attention branches with adaptive weights.
    SaAdaptive,
    /// Two cross-attention branches with adaptive weights.
    CaAdaptive,
    /// All four attention branches concatenated (no adaptive weights).
    AttnConcat,
    /// fMRI branch only.
    UnimodalFmri,
    /// sMRI branch only.
    UnimodalSmri,
}

impl FusionMode {
    pub const ALL: [FusionMode; 9] = [
        FusionMode::Camf,
        FusionMode::ElementwiseSum,
        FusionMode::Concat,
        FusionMode::AdaptiveWeights,
        FusionMode::SaAdaptive,
        FusionMode::CaAdaptive,
        FusionMode::AttnConcat,
        FusionMode::UnimodalFmri,
        FusionMode::UnimodalSmri,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Camf => "camf",
            FusionMode::ElementwiseSum => "elementwise_sum",
            FusionMode::Concat => "concat",
            FusionMode::AdaptiveWeights => "adaptive_weights",
            FusionMode::SaAdaptive => "sa_adaptive",
            FusionMode::CaAdaptive => "ca_adaptive",
            FusionMode::AttnConcat => "attn_concat",
            FusionMode::UnimodalFmri => "unimodal_fmri",
            FusionMode::UnimodalSmri => "unimodal_smri",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CamfError::UnknownFusionMode(s.to_string()))
    }

    pub fn uses_fmri(self) -> bool {
        self != FusionMode::UnimodalSmri
    }

    pub fn uses_smri(self) -> bool {
        self != FusionMode::UnimodalFmri
    }

    pub fn uses_self_attention(self) -> bool {
        matches!(
            self,
            FusionMode::Camf | FusionMode::SaAdaptive | FusionMode::AttnConcat
        )
    }

    pub fn uses_cross_attention(self) -> bool {
        matches!(
            self,
            FusionMode::Camf | FusionMode::CaAdaptive | FusionMode::AttnConcat
        )
    }

    /// Number of adaptive fusion logits, zero when the mode has none.
    pub fn n_fusion_logits(self) -> usize {
        match self {
            FusionMode::Camf => 4,
            FusionMode::AdaptiveWeights | FusionMode::SaAdaptive | FusionMode::CaAdaptive => 2,
            _ => 0,
        }
    }

    /// Classifier input width given latent widths d1 (backbone) and d2 (attention).
    pub fn head_input_width(self, d1: usize, d2: usize) -> usize {
        match self {
            FusionMode::Camf | FusionMode::SaAdaptive | FusionMode::CaAdaptive => d2,
            FusionMode::AttnConcat => 4 * d2,
            FusionMode::Concat => 2 * d1,
            FusionMode::ElementwiseSum
            | FusionMode::AdaptiveWeights
            | FusionMode::UnimodalFmri
            | FusionMode::UnimodalSmri => d1,
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Borrowed q/k/v projection matrices of one attention module.
pub struct AttentionWeights<'a> {
    pub w_q: ArrayView2<'a, f64>,
    pub w_k: ArrayView2<'a, f64>,
    pub w_v: ArrayView2<'a, f64>,
}

pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-stochastic n x n attention matrix.
    pub probs: Array2<f64>,
}

/// Scaled dot-product attention over the batch:
/// `softmax(q k^T / sqrt(d2)) v`, with q from `f_query`, k from `f_key`, and
/// v from the modality selected by `value_source`. Self-attention passes the
/// same matrix for both inputs.
pub fn attention_forward(
    f_query: &Array2<f64>,
    f_key: &Array2<f64>,
    w: &AttentionWeights<'_>,
    value_source: ValueSource,
) -> Result<(Array2<f64>, AttentionCache)> {
    let n = f_query.nrows();
    if n == 0 {
        return Err(CamfError::EmptyBatch);
    }
    if f_key.nrows() != n {
        return Err(CamfError::Data(format!(
            "attention row-count mismatch: query {n}, key {}",
            f_key.nrows()
        )));
    }
    let d2 = w.w_q.ncols();
    let q = matmul(f_query.view(), w.w_q);
    let k = matmul(f_key.view(), w.w_k);
    let v = match value_source {
        ValueSource::Query => matmul(f_query.view(), w.w_v),
        ValueSource::Key => matmul(f_key.view(), w.w_v),
    };
    let mut scores = matmul_nt(q.view(), k.view());
    scores.mapv_inplace(|s| s / (d2 as f64).sqrt());
    let probs = softmax_rows(&scores);
    let out = matmul(probs.view(), v.view());
    Ok((
        out,
        AttentionCache { q, k, v, probs },
    ))
}

pub struct AttentionGrads {
    pub d_f_query: Array2<f64>,
    pub d_f_key: Array2<f64>,
    pub d_w_q: Array2<f64>,
    pub d_w_k: Array2<f64>,
    pub d_w_v: Array2<f64>,
}

pub fn attention_backward(
    f_query: &Array2<f64>,
    f_key: &Array2<f64>,
    w: &AttentionWeights<'_>,
    value_source: ValueSource,
    cache: &AttentionCache,
    grad_out: &Array2<f64>,
) -> AttentionGrads {
    let d2 = w.w_q.ncols() as f64;
    let scale = 1.0 / d2.sqrt();

    // out = probs @ v
    let grad_probs = matmul_nt(grad_out.view(), cache.v.view()); // (n, n)
    let grad_v = matmul_tn(cache.probs.view(), grad_out.view()); // (n, d2)
    let grad_scores = softmax_rows_backward(&cache.probs, &grad_probs);

    // scores = scale * q @ k^T
    let mut grad_q = matmul(grad_scores.view(), cache.k.view());
    grad_q.mapv_inplace(|g| g * scale);
    let mut grad_k = matmul_tn(grad_scores.view(), cache.q.view());
    grad_k.mapv_inplace(|g| g * scale);

    let d_w_q = matmul_tn(f_query.view(), grad_q.view());
    let d_w_k = matmul_tn(f_key.view(), grad_k.view());
    let mut d_f_query = matmul_nt(grad_q.view(), w.w_q);
    let mut d_f_key = matmul_nt(grad_k.view(), w.w_k);
    let d_w_v;
    match value_source {
        ValueSource::Query => {
            d_w_v = matmul_tn(f_query.view(), grad_v.view());
            d_f_query = d_f_query + matmul_nt(grad_v.view(), w.w_v);
        }
        ValueSource::Key => {
            d_w_v = matmul_tn(f_key.view(), grad_v.view());
            d_f_key = d_f_key + matmul_nt(grad_v.view(), w.w_v);
        }
    }
    AttentionGrads {
        d_f_query,
        d_f_key,
        d_w_q,
        d_w_k,
        d_w_v,
    }
}

/// The four attention-branch outputs with the simplex weights that combine
/// them. Only the full fusion mode populates this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionState {
    pub f_sa1: Array2<f64>,
    pub f_sa2: Array2<f64>,
    pub f_ca1: Array2<f64>,
    pub f_ca2: Array2<f64>,
    pub logits: [f64; 4],
    pub alphas: [f64; 4],
}

/// Softmax of the fusion logits: the branch weights on the probability simplex.
pub fn fusion_alphas(logits: &[f64]) -> Vec<f64> {
    softmax_vec(logits)
}

/// Weighted sum of branch outputs: `sum_b alpha_b * branch_b`.
pub fn adaptive_fuse(branches: &[&Array2<f64>], alphas: &[f64]) -> Result<Array2<f64>> {
    if branches.is_empty() || branches.len() != alphas.len() {
        return Err(CamfError::Config("branch/alpha count mismatch".into()));
    }
    let dim = branches[0].raw_dim();
    for b in branches {
        if b.raw_dim() != dim {
            return Err(CamfError::Data(format!(
                "fusion branch shape mismatch: {:?} vs {:?}",
                b.dim(),
                dim
            )));
        }
    }
    let mut out = Array2::<f64>::zeros(dim);
    for (b, &a) in branches.iter().zip(alphas) {
        out.scaled_add(a, b);
    }
    Ok(out)
}

/// Backward of the adaptive fusion: returns per-branch gradients and the
/// gradient w.r.t. the fusion logits.
pub fn adaptive_fuse_backward(
    branches: &[&Array2<f64>],
    alphas: &[f64],
    grad_out: &Array2<f64>,
) -> (Vec<Array2<f64>>, Vec<f64>) {
    let grad_branches: Vec<Array2<f64>> = alphas.iter().map(|&a| grad_out * a).collect();
    let grad_alphas: Vec<f64> = branches.iter().map(|b| (*b * grad_out).sum()).collect();
    let grad_logits = softmax_vec_backward(alphas, &grad_alphas);
    (grad_branches, grad_logits)
}

/// One-hidden-layer MLP classifier mapping the fused feature to 2 logits.
pub struct HeadWeights<'a> {
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView1<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView1<'a, f64>,
    pub activation: Activation,
}

pub struct HeadCache {
    pub input: Array2<f64>,
    pub pre_hidden: Array2<f64>,
    pub hidden: Array2<f64>,
}

pub fn head_forward(x: &Array2<f64>, w: &HeadWeights<'_>) -> (Array2<f64>, HeadCache) {
    let pre_hidden = linear_forward(x.view(), w.w1, w.b1);
    let mut hidden = pre_hidden.clone();
    hidden.mapv_inplace(|v| w.activation.apply(v));
    let logits = linear_forward(hidden.view(), w.w2, w.b2);
    (
        logits,
        HeadCache {
            input: x.clone(),
            pre_hidden,
            hidden,
        },
    )
}

pub struct HeadGrads {
    pub d_input: Array2<f64>,
    pub d_w1: Array2<f64>,
    pub d_b1: Array1<f64>,
    pub d_w2: Array2<f64>,
    pub d_b2: Array1<f64>,
}

pub fn head_backward(w: &HeadWeights<'_>, cache: &HeadCache, grad_logits: &Array2<f64>) -> HeadGrads {
    let (mut d_hidden, d_w2, d_b2) = linear_backward(cache.hidden.view(), w.w2, grad_logits.view());
    d_hidden
        .iter_mut()
        .zip(cache.pre_hidden.iter())
        .for_each(|(g, &z)| *g *= w.activation.derivative(z));
    let (d_input, d_w1, d_b1) = linear_backward(cache.input.view(), w.w1, d_hidden.view());
    HeadGrads {
        d_input,
        d_w1,
        d_b1,
        d_w2,
        d_b2,
    }
}

/// Mean cross-entropy of 2-class logits against integer labels (0/1),
/// computed through log-sum-exp.
pub fn ce_loss(logits: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    let n = logits.nrows();
    if n == 0 {
        return Err(CamfError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(CamfError::Data(format!(
            "loss length mismatch: {n} logit rows, {} labels",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let r = row.as_slice().unwrap();
        total += log_sum_exp(r) - r[y as usize];
    }
    Ok(total / n as f64)
}

/// Gradient of `ce_loss` w.r.t. the logits: `(softmax(row) - onehot) / n`.
pub fn ce_loss_backward(logits: &Array2<f64>, labels: &[u8]) -> Array2<f64> {
    let n = logits.nrows();
    let mut grad = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y as usize]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f64);
    grad
}

/// Predicted label per row: argmax with ties resolved to class 0.
pub fn predict(logits: &Array2<f64>) -> Vec<u8> {
    logits
        .rows()
        .into_iter()
        .map(|r| if r[1] > r[0] { 1 } else { 0 })
        .collect()
}
