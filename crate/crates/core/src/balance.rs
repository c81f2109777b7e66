//! Balancing methods, one or more per taxonomy group, as hooks for the trainer.
//!
//! | group        | method                                   |
//! |--------------|------------------------------------------|
//! | Objective    | [`unimodal_blend_loss`], cosine head, [`kl_align_loss`] |
//! | Optimization | [`grad_modulation`]                      |
//! | Feed-forward | [`feature_mask`], [`feature_drop`]       |
//! | Data         | [`resample_weights`]                     |
//!
//! Dominance is judged from per-modality performance scores: the batch-mean
//! probability of the true class under a modality's partial logits. Ties go to
//! the lowest modality index.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SamplingWeights};
use crate::error::{Error, Result};
use crate::fusion::{
    cosine_term, encoder_backward, forward, partial_logits, term_backward, FeatureGate,
    ForwardCache, FusionGradients, FusionModel, HeadKind, ModalityMask,
};
use crate::numkit::Matrix;
use crate::trainer::{cross_entropy, softmax};

/// Feed-forward drop probability ceiling.
pub const MAX_DROP_PROB: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Baseline,
    Objective,
    Optimization,
    FeedForward,
    Data,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Baseline => "Baseline",
            Category::Objective => "Objective",
            Category::Optimization => "Optimization",
            Category::FeedForward => "Feed-forward",
            Category::Data => "Data",
        })
    }
}

/// The active balancing method and its strength parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    Baseline,
    /// Fused loss plus `w_uni` times each modality's own cross-entropy.
    UnimodalBlend {
        w_uni: f64,
    },
    /// Bias-free cosine-similarity head with scale `scale`.
    CosineLogits {
        scale: f64,
    },
    /// Symmetric KL between modality predictions, weighted by `lambda`.
    KlAlign {
        lambda: f64,
    },
    /// Encoder-gradient damping of dominant modalities with strength `alpha`.
    GradModulation {
        alpha: f64,
    },
    /// Zero a `rho_mask` fraction of the dominant modality's feature coordinates.
    FeatureMask {
        rho_mask: f64,
    },
    /// Drop the dominant modality's features with probability up to `p_max`.
    FeatureDrop {
        p_max: f64,
    },
    /// Reweight samples by the weak modality's contribution at temperature `tau`.
    Resample {
        tau: f64,
    },
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind_name())
    }
}

impl MethodSpec {
    pub const KINDS: [&'static str; 8] = [
        "baseline", "blend", "cosine", "klalign", "gradmod", "featmask", "featdrop", "resample",
    ];

    /// Spec for `kind` with its default strength.
    pub fn from_kind(kind: &str) -> Result<Self> {
        Ok(match kind {
            "baseline" => MethodSpec::Baseline,
            "blend" => MethodSpec::UnimodalBlend { w_uni: 1.0 },
            "cosine" => MethodSpec::CosineLogits { scale: 5.0 },
            "klalign" => MethodSpec::KlAlign { lambda: 0.5 },
            "gradmod" => MethodSpec::GradModulation { alpha: 1.0 },
            "featmask" => MethodSpec::FeatureMask { rho_mask: 0.25 },
            "featdrop" => MethodSpec::FeatureDrop { p_max: 0.5 },
            "resample" => MethodSpec::Resample { tau: 1.0 },
            other => return Err(Error::Dispatch(other.to_string())),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            MethodSpec::Baseline => "baseline",
            MethodSpec::UnimodalBlend { .. } => "blend",
            MethodSpec::CosineLogits { .. } => "cosine",
            MethodSpec::KlAlign { .. } => "klalign",
            MethodSpec::GradModulation { .. } => "gradmod",
            MethodSpec::FeatureMask { .. } => "featmask",
            MethodSpec::FeatureDrop { .. } => "featdrop",
            MethodSpec::Resample { .. } => "resample",
        }
    }

    pub fn category(&self) -> Category {
        match self {
            MethodSpec::Baseline => Category::Baseline,
            MethodSpec::UnimodalBlend { .. }
            | MethodSpec::CosineLogits { .. }
            | MethodSpec::KlAlign { .. } => Category::Objective,
            MethodSpec::GradModulation { .. } => Category::Optimization,
            MethodSpec::FeatureMask { .. } | MethodSpec::FeatureDrop { .. } => {
                Category::FeedForward
            }
            MethodSpec::Resample { .. } => Category::Data,
        }
    }

    /// Name and value of the strength parameter, if any.
    pub fn param(&self) -> Option<(&'static str, f64)> {
        match *self {
            MethodSpec::Baseline => None,
            MethodSpec::UnimodalBlend { w_uni } => Some(("w_uni", w_uni)),
            MethodSpec::CosineLogits { scale } => Some(("scale", scale)),
            MethodSpec::KlAlign { lambda } => Some(("lambda", lambda)),
            MethodSpec::GradModulation { alpha } => Some(("alpha", alpha)),
            MethodSpec::FeatureMask { rho_mask } => Some(("rho_mask", rho_mask)),
            MethodSpec::FeatureDrop { p_max } => Some(("p_max", p_max)),
            MethodSpec::Resample { tau } => Some(("tau", tau)),
        }
    }

    pub fn with_param(self, name: &str, value: f64) -> Result<Self> {
        let spec = match (self, name) {
            (MethodSpec::UnimodalBlend { .. }, "w_uni") => {
                MethodSpec::UnimodalBlend { w_uni: value }
            }
            (MethodSpec::CosineLogits { .. }, "scale") => MethodSpec::CosineLogits { scale: value },
            (MethodSpec::KlAlign { .. }, "lambda") => MethodSpec::KlAlign { lambda: value },
            (MethodSpec::GradModulation { .. }, "alpha") => {
                MethodSpec::GradModulation { alpha: value }
            }
            (MethodSpec::FeatureMask { .. }, "rho_mask") => {
                MethodSpec::FeatureMask { rho_mask: value }
            }
            (MethodSpec::FeatureDrop { .. }, "p_max") => MethodSpec::FeatureDrop { p_max: value },
            (MethodSpec::Resample { .. }, "tau") => MethodSpec::Resample { tau: value },
            _ => {
                return Err(Error::InvalidParam(format!(
                    "method `{}` has no parameter `{name}`",
                    self.kind_name()
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same method with its strength at the value that switches it off.
    /// Cosine logits have no such value.
    pub fn neutral(&self) -> Option<Self> {
        Some(match self {
            MethodSpec::Baseline => MethodSpec::Baseline,
            MethodSpec::UnimodalBlend { .. } => MethodSpec::UnimodalBlend { w_uni: 0.0 },
            MethodSpec::CosineLogits { .. } => return None,
            MethodSpec::KlAlign { .. } => MethodSpec::KlAlign { lambda: 0.0 },
            MethodSpec::GradModulation { .. } => MethodSpec::GradModulation { alpha: 0.0 },
            MethodSpec::FeatureMask { .. } => MethodSpec::FeatureMask { rho_mask: 0.0 },
            MethodSpec::FeatureDrop { .. } => MethodSpec::FeatureDrop { p_max: 0.0 },
            MethodSpec::Resample { .. } => MethodSpec::Resample { tau: f64::INFINITY },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        match *self {
            MethodSpec::Baseline => Ok(()),
            MethodSpec::UnimodalBlend { w_uni: v }
            | MethodSpec::KlAlign { lambda: v }
            | MethodSpec::GradModulation { alpha: v } => {
                if v.is_finite() && v >= 0.0 {
                    Ok(())
                } else {
                    bad(format!(
                        "{} strength must be finite and non-negative, got {v}",
                        self.kind_name()
                    ))
                }
            }
            MethodSpec::CosineLogits { scale } => {
                if scale.is_finite() && scale > 0.0 {
                    Ok(())
                } else {
                    bad(format!("cosine scale must be positive, got {scale}"))
                }
            }
            MethodSpec::FeatureMask { rho_mask: v } | MethodSpec::FeatureDrop { p_max: v } => {
                if (0.0..=1.0).contains(&v) {
                    Ok(())
                } else {
                    bad(format!(
                        "{} fraction must lie in [0, 1], got {v}",
                        self.kind_name()
                    ))
                }
            }
            MethodSpec::Resample { tau } => {
                if tau > 0.0 && !tau.is_nan() {
                    Ok(())
                } else {
                    bad(format!("resample temperature must be positive, got {tau}"))
                }
            }
        }
    }

    /// Head the model must use when trained with this method.
    pub fn head_kind(&self) -> HeadKind {
        match *self {
            MethodSpec::CosineLogits { scale } => HeadKind::Cosine { scale },
            _ => HeadKind::Linear,
        }
    }

    /// False when the strength sits at its neutral value, i.e. the run is plain Baseline.
    pub fn is_active(&self) -> bool {
        self.neutral() != Some(*self)
    }

    /// Whether this method consumes the running modality scores.
    pub fn uses_scores(&self) -> bool {
        matches!(
            self,
            MethodSpec::GradModulation { .. }
                | MethodSpec::FeatureMask { .. }
                | MethodSpec::FeatureDrop { .. }
        )
    }
}

/// Loss value and its logit-space gradients.
///
/// `fused` is `∂L/∂f(x)`; `partial[i]` is the extra gradient on modality `i`'s
/// partial logits. With `project_conflicts`, each partial term's head-block
/// gradient loses its component along `−g_fused` when the two conflict.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub fused: Matrix,
    pub partial: Vec<Option<Matrix>>,
    pub project_conflicts: bool,
}

impl Objective {
    pub fn plain(loss: f64, fused: Matrix, m: usize) -> Self {
        Self {
            loss,
            fused,
            partial: vec![None; m],
            project_conflicts: false,
        }
    }
}

/// Removes the component of `g` along `−reference` when `⟨g, reference⟩ < 0`.
pub fn project_conflict(g: &mut Matrix, reference: &Matrix) -> Result<bool> {
    let dot = g.dot(reference)?;
    let norm_sq = reference.frobenius_sq();
    if dot < 0.0 && norm_sq > 0.0 {
        g.axpy(-dot / norm_sq, reference)?;
        return Ok(true);
    }
    Ok(false)
}

/// Backpropagates an [`Objective`] through head and encoders.
pub fn objective_backward(
    model: &FusionModel,
    cache: &ForwardCache,
    objective: &Objective,
) -> Result<FusionGradients> {
    let m = model.num_modalities();
    let mut grads = FusionGradients::zeros_like(model);
    let mut bias = objective.fused.col_sums();
    for i in 0..m {
        if !cache.mask().is_present(i) {
            continue;
        }
        let (mut dw, mut dphi) = term_backward(model, cache, i, &objective.fused)?;
        if let Some(p) = objective.partial.get(i).and_then(Option::as_ref) {
            let (mut dw_p, dphi_p) = term_backward(model, cache, i, p)?;
            if objective.project_conflicts {
                project_conflict(&mut dw_p, &dw)?;
            }
            dw.add_assign(&dw_p)?;
            dphi.add_assign(&dphi_p)?;
            if model.head() == HeadKind::Linear {
                for (b, s) in bias.iter_mut().zip(p.col_sums()) {
                    *b += s / m as f64;
                }
            }
        }
        grads.head_blocks[i] = dw;
        grads.encoders[i] = encoder_backward(model, cache, i, &dphi)?;
    }
    if model.head() == HeadKind::Linear {
        grads.head_bias = bias;
    }
    Ok(grads)
}

/// Fused cross-entropy plus `w_uni`-weighted unimodal cross-entropies on partial logits,
/// with the head-block conflict guard.
pub fn unimodal_blend_loss(
    model: &FusionModel,
    cache: &ForwardCache,
    labels: &[usize],
    w_uni: f64,
) -> Result<Objective> {
    let m = model.num_modalities();
    if !cache.mask().is_full() {
        return Err(Error::Contract(
            "unimodal blend needs a full-mask forward pass".into(),
        ));
    }
    let (loss, fused) = cross_entropy(cache.logits(), labels)?;
    if w_uni == 0.0 {
        return Ok(Objective::plain(loss, fused, m));
    }
    let mut total = loss;
    let mut partial = Vec::with_capacity(m);
    for i in 0..m {
        let (l, mut g) = cross_entropy(&partial_logits(model, cache, i)?, labels)?;
        total += w_uni * l;
        g.scale(w_uni);
        partial.push(Some(g));
    }
    Ok(Objective {
        loss: total,
        fused,
        partial,
        project_conflicts: true,
    })
}

/// Cosine-head logits recomputed from cached features: `s · Σ_i cos∠(W^i_h, Φ^i)`.
pub fn cosine_logits(model: &FusionModel, cache: &ForwardCache, scale: f64) -> Result<Matrix> {
    if scale == 0.0 {
        return Err(Error::InvalidParam("cosine scale must be nonzero".into()));
    }
    let mut out = Matrix::zeros(cache.batch_size(), model.num_classes());
    for i in 0..model.num_modalities() {
        if let Some(phi) = cache.features(i) {
            out.add_assign(&cosine_term(model.head_block(i), phi, scale)?)?;
        }
    }
    Ok(out)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

/// Symmetric KL between two probability vectors: `KL(p‖q) + KL(q‖p)`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    kl(p, q) + kl(q, p)
}

/// Gradient of `KL(p‖q) + KL(q‖p)` with respect to the logits behind `p`.
fn symmetric_kl_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    let kl_pq = kl(p, q);
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.ln() - b.ln() - kl_pq) + (a - b))
        .collect()
}

/// `λ · mean_batch Σ_{i<j} [KL(p^i‖p^j) + KL(p^j‖p^i)]` over partial-logit
/// distributions, with gradients on every modality's partial logits.
pub fn kl_align_loss(
    model: &FusionModel,
    cache: &ForwardCache,
    lambda: f64,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let m = model.num_modalities();
    if m < 2 {
        return Err(Error::Contract(
            "KL alignment needs at least two modalities".into(),
        ));
    }
    let probs: Vec<Matrix> = (0..m)
        .map(|i| softmax_rows(&partial_logits(model, cache, i)?))
        .collect::<Result<_>>()?;
    let rows = cache.batch_size();
    let h = model.num_classes();
    let mut grads = vec![Matrix::zeros(rows, h); m];
    let mut total = 0.0;
    let scale = lambda / rows as f64;
    for i in 0..m {
        for j in i + 1..m {
            for r in 0..rows {
                let (p, q) = (probs[i].row(r), probs[j].row(r));
                total += symmetric_kl(p, q);
                let gp = symmetric_kl_grad(p, q);
                let gq = symmetric_kl_grad(q, p);
                for (d, g) in grads[i].row_mut(r).iter_mut().zip(gp) {
                    *d += scale * g;
                }
                for (d, g) in grads[j].row_mut(r).iter_mut().zip(gq) {
                    *d += scale * g;
                }
            }
        }
    }
    Ok((
        lambda * total / rows as f64,
        grads.into_iter().map(Some).collect(),
    ))
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax(logits.row(r))?);
    }
    Ok(out)
}

/// Fused cross-entropy plus the KL alignment addend.
pub fn kl_align_objective(
    model: &FusionModel,
    cache: &ForwardCache,
    labels: &[usize],
    lambda: f64,
) -> Result<Objective> {
    let m = model.num_modalities();
    if !cache.mask().is_full() {
        return Err(Error::Contract(
            "KL alignment needs a full-mask forward pass".into(),
        ));
    }
    let (loss, fused) = cross_entropy(cache.logits(), labels)?;
    if lambda == 0.0 {
        return Ok(Objective::plain(loss, fused, m));
    }
    let (addend, partial) = kl_align_loss(model, cache, lambda)?;
    Ok(Objective {
        loss: loss + addend,
        fused,
        partial,
        project_conflicts: false,
    })
}

/// `score^i / mean_{j≠i} score^j` for each modality.
pub fn score_ratios(scores: &[f64]) -> Vec<f64> {
    let m = scores.len();
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let others = scores
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .sum::<f64>()
                / (m - 1) as f64;
            if others > 0.0 {
                s / others
            } else {
                1.0
            }
        })
        .collect()
}

/// Encoder-gradient coefficients: `κ^i = 1 − tanh(α(ρ^i − 1))` when `ρ^i > 1`, else 1.
pub fn grad_modulation(scores: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Contract(
            "modulation needs at least two modalities".into(),
        ));
    }
    Ok(score_ratios(scores)
        .into_iter()
        .map(|rho| {
            if rho > 1.0 {
                // 1 − tanh(x) = 2 / (1 + e^{2x}); this form stays positive far past
                // the point where tanh rounds to 1.
                (2.0 / (1.0 + (2.0 * alpha * (rho - 1.0)).exp())).max(f64::MIN_POSITIVE)
            } else {
                1.0
            }
        })
        .collect())
}

/// Highest-scoring modality; ties go to the lowest index.
pub fn dominant_modality(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Zeroes a random `⌈ρ·d_Φ⌉` subset of the dominant modality's feature
/// coordinates, the same subset for every sample in the batch.
pub fn feature_mask<R: Rng + ?Sized>(
    feature_dims: &[usize],
    batch: usize,
    scores: &[f64],
    rho_mask: f64,
    rng: &mut R,
) -> Result<FeatureGate> {
    if !(0.0..=1.0).contains(&rho_mask) {
        return Err(Error::InvalidParam(format!(
            "rho_mask must lie in [0, 1], got {rho_mask}"
        )));
    }
    let mut gate = FeatureGate::identity(feature_dims.len());
    let dom = dominant_modality(scores);
    let d = feature_dims[dom];
    let k = ((rho_mask * d as f64).ceil() as usize).min(d);
    if k == 0 {
        return Ok(gate);
    }
    let mut cols = vec![1.0; d];
    for c in sample(rng, d, k) {
        cols[c] = 0.0;
    }
    gate.0[dom] = Some(Matrix::broadcast_row(&cols, batch));
    Ok(gate)
}

/// Drop probability for the dominant modality: `p_max · clip(ρ − 1, 0, 1)`, capped.
pub fn drop_probability(scores: &[f64], p_max: f64) -> f64 {
    let dom = dominant_modality(scores);
    let rho = score_ratios(scores)[dom];
    let p = p_max * (rho - 1.0).clamp(0.0, 1.0);
    if p > MAX_DROP_PROB {
        log::warn!("feature drop probability {p} capped at {MAX_DROP_PROB}");
        MAX_DROP_PROB
    } else {
        p
    }
}

/// Per-sample dropout of the dominant modality's whole feature vector; survivors
/// are rescaled by `1/(1−p)`.
pub fn feature_drop<R: Rng + ?Sized>(
    feature_dims: &[usize],
    batch: usize,
    scores: &[f64],
    p_max: f64,
    rng: &mut R,
) -> Result<FeatureGate> {
    if !(0.0..=1.0).contains(&p_max) {
        return Err(Error::InvalidParam(format!(
            "p_max must lie in [0, 1], got {p_max}"
        )));
    }
    let mut gate = FeatureGate::identity(feature_dims.len());
    let p = drop_probability(scores, p_max);
    if p == 0.0 {
        return Ok(gate);
    }
    let dom = dominant_modality(scores);
    let keep = 1.0 / (1.0 - p);
    let mut g = Matrix::zeros(batch, feature_dims[dom]);
    for r in 0..batch {
        let v = if rng.random::<f64>() < p { 0.0 } else { keep };
        g.row_mut(r).iter_mut().for_each(|x| *x = v);
    }
    gate.0[dom] = Some(g);
    Ok(gate)
}

/// Per-sample, per-modality true-class probability under partial logits (`[modality][sample]`).
pub fn sample_contributions(model: &FusionModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let m = model.num_modalities();
    let cache = forward(model, &data.as_batch(), &ModalityMask::full(m))?;
    (0..m)
        .map(|i| {
            let probs = softmax_rows(&partial_logits(model, &cache, i)?)?;
            Ok(data
                .labels()
                .iter()
                .enumerate()
                .map(|(k, &y)| probs.get(k, y))
                .collect())
        })
        .collect()
}

/// Sampling weights `∝ exp(c_k^weak / τ)`, normalised to mean 1, where `weak` is
/// the modality with the lowest mean contribution.
pub fn resample_weights(model: &FusionModel, train: &Dataset, tau: f64) -> Result<SamplingWeights> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParam(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let contrib = sample_contributions(model, train)?;
    let means: Vec<f64> = contrib
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mut weak = 0;
    for (i, &s) in means.iter().enumerate().skip(1) {
        if s < means[weak] {
            weak = i;
        }
    }
    let c = &contrib[weak];
    let top = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = c.iter().map(|&v| ((v - top) / tau).exp()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    SamplingWeights::new(raw.into_iter().map(|w| w / mean).collect())
}
