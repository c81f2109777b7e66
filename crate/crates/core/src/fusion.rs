//! Concatenation-fusion classifier.
//!
//! Each modality `i` runs its own encoder `Φ^i`; the head is split into blocks so
//! the logits are `Σ_i W^i·Φ^i + b`. Masking a modality drops its term entirely
//! (equivalent to a zero feature vector), so the empty mask yields the bias-only
//! predictor.
//!
//! The cosine head variant replaces each block term with
//! `s · cos∠(W^i_h, Φ^i)` and drops the bias.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::numkit::{
    matmul, matmul_nt, matmul_tn, mlp_backward, mlp_forward, DenseLayer, Matrix, MlpCache,
    MlpGradients, MlpParams, ParamVec,
};
use crate::seed::{self, stream};

/// Guard for zero-length vectors in cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadKind {
    Linear,
    Cosine { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    encoders: Vec<MlpParams>,
    /// `H × d_Φ^i` per modality.
    head_blocks: Vec<Matrix>,
    head_bias: Vec<f64>,
    head: HeadKind,
    seed: u64,
}

/// Which modalities take part in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModalityMask(Vec<bool>);

impl ModalityMask {
    pub fn new(present: Vec<bool>) -> Self {
        Self(present)
    }

    pub fn full(m: usize) -> Self {
        Self(vec![true; m])
    }

    pub fn empty(m: usize) -> Self {
        Self(vec![false; m])
    }

    pub fn only(m: usize, i: usize) -> Self {
        let mut v = vec![false; m];
        v[i] = true;
        Self(v)
    }

    pub fn without(m: usize, i: usize) -> Self {
        let mut v = vec![true; m];
        v[i] = false;
        Self(v)
    }

    /// Bit `i` set means modality `i` is present.
    pub fn from_bits(m: usize, bits: u32) -> Self {
        Self((0..m).map(|i| bits & (1 << i) != 0).collect())
    }

    pub fn bits(&self) -> u32 {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .fold(0, |acc, (i, _)| acc | (1 << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.0.get(i).copied().unwrap_or(false)
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&p| p)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&p| p).count()
    }
}

/// Per-modality multiplicative gates on encoder features, used by feed-forward
/// interventions. `None` leaves a modality untouched.
#[derive(Debug, Clone, Default)]
pub struct FeatureGate(pub Vec<Option<Matrix>>);

impl FeatureGate {
    pub fn identity(m: usize) -> Self {
        Self(vec![None; m])
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }

    pub fn get(&self, i: usize) -> Option<&Matrix> {
        self.0.get(i).and_then(Option::as_ref)
    }

    pub fn apply(&self, i: usize, features: &Matrix) -> Result<Matrix> {
        match self.get(i) {
            Some(g) => features.hadamard(g),
            None => Ok(features.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    mask: ModalityMask,
    encoder_caches: Vec<Option<MlpCache>>,
    /// Encoder outputs after gating; these feed the head.
    features: Vec<Option<Matrix>>,
    gates: FeatureGate,
    /// Per-modality head terms (`W^i·Φ^i`, or the cosine term), `B × H`.
    terms: Vec<Option<Matrix>>,
    logits: Matrix,
}

impl ForwardCache {
    pub fn mask(&self) -> &ModalityMask {
        &self.mask
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn features(&self, i: usize) -> Option<&Matrix> {
        self.features.get(i).and_then(Option::as_ref)
    }

    pub fn term(&self, i: usize) -> Option<&Matrix> {
        self.terms.get(i).and_then(Option::as_ref)
    }

    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Gradients laid out like [`FusionModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub encoders: Vec<MlpGradients>,
    pub head_blocks: Vec<Matrix>,
    pub head_bias: Vec<f64>,
}

impl FusionGradients {
    pub fn zeros_like(model: &FusionModel) -> Self {
        Self {
            encoders: model.encoders.iter().map(MlpParams::zeros_like).collect(),
            head_blocks: model
                .head_blocks
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            head_bias: vec![0.0; model.head_bias.len()],
        }
    }

    /// Slices in the canonical parameter order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for e in &self.encoders {
            for l in &e.layers {
                out.push(l.weight.as_slice());
                out.push(&l.bias);
            }
        }
        for w in &self.head_blocks {
            out.push(w.as_slice());
        }
        out.push(&self.head_bias);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for e in &mut self.encoders {
            for l in &mut e.layers {
                out.push(l.weight.as_mut_slice());
                out.push(&mut l.bias);
            }
        }
        for w in &mut self.head_blocks {
            out.push(w.as_mut_slice());
        }
        out.push(&mut self.head_bias);
        out
    }

    pub fn add_assign(&mut self, other: &FusionGradients) -> Result<()> {
        let theirs = other.blocks();
        let mine = self.blocks_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("fusion gradient layout mismatch".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            if a.len() != b.len() {
                return Err(Error::Shape("fusion gradient block mismatch".into()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

impl ParamVec for FusionGradients {
    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        assign_blocks(self.blocks_mut(), values)
    }
}

fn assign_blocks(blocks: Vec<&mut [f64]>, values: &[f64]) -> Result<()> {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    if total != values.len() {
        return Err(Error::Shape(format!(
            "flat assign of {} values into {total} parameters",
            values.len()
        )));
    }
    let mut at = 0;
    for b in blocks {
        let n = b.len();
        b.copy_from_slice(&values[at..at + n]);
        at += n;
    }
    Ok(())
}

impl ParamVec for FusionModel {
    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        assign_blocks(self.blocks_mut(), values)
    }
}

/// Builds a model with Glorot-uniform weights and zero biases.
///
/// `arch[i]` lists modality `i`'s encoder widths from input to feature output.
pub fn init_model(
    arch: &[Vec<usize>],
    num_classes: usize,
    seed: u64,
    head: HeadKind,
) -> Result<FusionModel> {
    if arch.is_empty() {
        return Err(Error::Shape("need at least one modality".into()));
    }
    if num_classes < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    if let HeadKind::Cosine { scale } = head {
        if !(scale.is_finite() && scale != 0.0) {
            return Err(Error::InvalidParam(format!(
                "cosine scale must be nonzero, got {scale}"
            )));
        }
    }
    let mut rng = seed::rng(seed, &[stream::INIT]);
    let encoders = arch
        .iter()
        .map(|sizes| MlpParams::glorot(sizes, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let feature_dims: Vec<usize> = encoders.iter().map(MlpParams::output_dim).collect();
    let fan_in: usize = feature_dims.iter().sum();
    let a = (6.0 / (fan_in + num_classes) as f64).sqrt();
    let head_blocks = feature_dims
        .iter()
        .map(|&d| {
            let data = (0..num_classes * d)
                .map(|_| rand::Rng::random_range(&mut rng, -a..a))
                .collect();
            Matrix::new(num_classes, d, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FusionModel::new(encoders, head_blocks, vec![0.0; num_classes], head, seed)
}

impl FusionModel {
    pub fn new(
        encoders: Vec<MlpParams>,
        head_blocks: Vec<Matrix>,
        head_bias: Vec<f64>,
        head: HeadKind,
        seed: u64,
    ) -> Result<Self> {
        if encoders.len() != head_blocks.len() || encoders.is_empty() {
            return Err(Error::Shape(format!(
                "{} encoders for {} head blocks",
                encoders.len(),
                head_blocks.len()
            )));
        }
        let h = head_bias.len();
        if h < 2 {
            return Err(Error::Shape("need at least two classes".into()));
        }
        for (i, (e, w)) in encoders.iter().zip(&head_blocks).enumerate() {
            if w.rows() != h || w.cols() != e.output_dim() {
                return Err(Error::Shape(format!(
                    "head block {} is {}x{}, expected {h}x{}",
                    i + 1,
                    w.rows(),
                    w.cols(),
                    e.output_dim()
                )));
            }
        }
        Ok(Self {
            encoders,
            head_blocks,
            head_bias,
            head,
            seed,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoder(&self, i: usize) -> &MlpParams {
        &self.encoders[i]
    }

    pub fn encoder_mut(&mut self, i: usize) -> &mut MlpParams {
        &mut self.encoders[i]
    }

    pub fn head_block(&self, i: usize) -> &Matrix {
        &self.head_blocks[i]
    }

    pub fn head_block_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.head_blocks[i]
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_bias
    }

    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        &mut self.head_bias
    }

    /// Encoder widths per modality.
    pub fn arch(&self) -> Vec<Vec<usize>> {
        self.encoders.iter().map(MlpParams::sizes).collect()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for e in &self.encoders {
            for l in e.layers() {
                out.push(l.weight.as_slice());
                out.push(&l.bias);
            }
        }
        for w in &self.head_blocks {
            out.push(w.as_slice());
        }
        out.push(&self.head_bias);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for e in &mut self.encoders {
            for l in e.layers_mut() {
                out.push(l.weight.as_mut_slice());
                out.push(&mut l.bias);
            }
        }
        for w in &mut self.head_blocks {
            out.push(w.as_mut_slice());
        }
        out.push(&mut self.head_bias);
        out
    }

    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &FusionModel) -> bool {
        let (a, b) = (self.flatten(), other.flatten());
        self.head == other.head
            && self.arch() == other.arch()
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// `scale · cos∠(W_h, Φ_b)` for every sample `b` and class `h`.
pub fn cosine_term(w: &Matrix, phi: &Matrix, scale: f64) -> Result<Matrix> {
    let dots = matmul_nt(phi, w)?;
    let w_norms: Vec<f64> = (0..w.rows())
        .map(|h| norm(w.row(h)).max(COSINE_EPS))
        .collect();
    let mut out = dots;
    for b in 0..phi.rows() {
        let nv = norm(phi.row(b)).max(COSINE_EPS);
        for (h, v) in out.row_mut(b).iter_mut().enumerate() {
            *v = scale * *v / (w_norms[h] * nv);
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn head_term(model: &FusionModel, i: usize, phi: &Matrix) -> Result<Matrix> {
    match model.head {
        HeadKind::Linear => matmul_nt(phi, &model.head_blocks[i]),
        HeadKind::Cosine { scale } => cosine_term(&model.head_blocks[i], phi, scale),
    }
}

/// Forward pass with an optional gate on encoder features.
pub fn forward_gated(
    model: &FusionModel,
    batch: &Batch,
    mask: &ModalityMask,
    gates: &FeatureGate,
) -> Result<ForwardCache> {
    let m = model.num_modalities();
    if mask.len() != m || batch.features.len() != m {
        return Err(Error::Shape(format!(
            "model has {m} modalities; mask has {}, batch has {}",
            mask.len(),
            batch.features.len()
        )));
    }
    let rows = batch.len();
    let h = model.num_classes();
    let mut encoder_caches = Vec::with_capacity(m);
    let mut features = Vec::with_capacity(m);
    let mut terms = Vec::with_capacity(m);
    let mut logits = Matrix::zeros(rows, h);
    for i in 0..m {
        if !mask.is_present(i) {
            encoder_caches.push(None);
            features.push(None);
            terms.push(None);
            continue;
        }
        let x = &batch.features[i];
        if x.rows() != rows {
            return Err(Error::Shape(format!(
                "modality {} has {} rows, batch has {rows}",
                i + 1,
                x.rows()
            )));
        }
        let (phi, cache) = mlp_forward(&model.encoders[i], x)?;
        let phi = gates.apply(i, &phi)?;
        let term = head_term(model, i, &phi)?;
        logits.add_assign(&term)?;
        encoder_caches.push(Some(cache));
        features.push(Some(phi));
        terms.push(Some(term));
    }
    if model.head == HeadKind::Linear {
        logits.add_row_vector(&model.head_bias)?;
    }
    Ok(ForwardCache {
        mask: mask.clone(),
        encoder_caches,
        features,
        gates: gates.clone(),
        terms,
        logits,
    })
}

pub fn forward(model: &FusionModel, batch: &Batch, mask: &ModalityMask) -> Result<ForwardCache> {
    forward_gated(
        model,
        batch,
        mask,
        &FeatureGate::identity(model.num_modalities()),
    )
}

/// Modality `i`'s additive share of the logits: its head term plus `b/m`.
pub fn partial_logits(model: &FusionModel, cache: &ForwardCache, i: usize) -> Result<Matrix> {
    let term = cache.term(i).ok_or_else(|| {
        Error::Contract(format!(
            "modality {} is masked out of this forward pass",
            i + 1
        ))
    })?;
    let mut out = term.clone();
    if model.head == HeadKind::Linear {
        let share: Vec<f64> = model
            .head_bias
            .iter()
            .map(|b| b / model.num_modalities() as f64)
            .collect();
        out.add_row_vector(&share)?;
    }
    Ok(out)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &Matrix) -> Result<Vec<usize>> {
    if logits.cols() < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Gradients of one head term with respect to its block and its (gated) features.
pub fn term_backward(
    model: &FusionModel,
    cache: &ForwardCache,
    i: usize,
    term_grad: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let phi = cache
        .features(i)
        .ok_or_else(|| Error::Contract(format!("modality {} is masked out", i + 1)))?;
    let w = &model.head_blocks[i];
    if term_grad.shape() != (phi.rows(), w.rows()) {
        return Err(Error::Contract(format!(
            "term gradient {:?} for a {}x{} term",
            term_grad.shape(),
            phi.rows(),
            w.rows()
        )));
    }
    match model.head {
        HeadKind::Linear => Ok((matmul_tn(term_grad, phi)?, matmul(term_grad, w)?)),
        HeadKind::Cosine { scale } => cosine_backward(w, phi, term_grad, scale),
    }
}

fn cosine_backward(w: &Matrix, phi: &Matrix, g: &Matrix, scale: f64) -> Result<(Matrix, Matrix)> {
    let dots = matmul_nt(phi, w)?;
    let w_raw: Vec<f64> = (0..w.rows()).map(|h| norm(w.row(h))).collect();
    let v_raw: Vec<f64> = (0..phi.rows()).map(|b| norm(phi.row(b))).collect();
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    let mut dphi = Matrix::zeros(phi.rows(), phi.cols());
    for b in 0..phi.rows() {
        let nv = v_raw[b].max(COSINE_EPS);
        let v_active = v_raw[b] > COSINE_EPS;
        for h in 0..w.rows() {
            let gbh = g.get(b, h);
            if gbh == 0.0 {
                continue;
            }
            let nu = w_raw[h].max(COSINE_EPS);
            let u_active = w_raw[h] > COSINE_EPS;
            let dot = dots.get(b, h);
            let c = scale * gbh / (nu * nv);
            let cu = if u_active { c * dot / (nu * nu) } else { 0.0 };
            let cv = if v_active { c * dot / (nv * nv) } else { 0.0 };
            let (u, v) = (w.row(h), phi.row(b));
            for (d, (&uj, &vj)) in dw.row_mut(h).iter_mut().zip(u.iter().zip(v)) {
                *d += c * vj - cu * uj;
            }
            for (d, (&uj, &vj)) in dphi.row_mut(b).iter_mut().zip(u.iter().zip(v)) {
                *d += c * uj - cv * vj;
            }
        }
    }
    Ok((dw, dphi))
}

/// Backpropagates `∂L/∂(gated features of modality i)` through the gate and encoder.
pub fn encoder_backward(
    model: &FusionModel,
    cache: &ForwardCache,
    i: usize,
    feature_grad: &Matrix,
) -> Result<MlpGradients> {
    let enc_cache = cache
        .encoder_caches
        .get(i)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::Contract(format!("modality {} is masked out", i + 1)))?;
    let raw_grad = cache.gates.apply(i, feature_grad)?;
    Ok(mlp_backward(&model.encoders[i], enc_cache, &raw_grad)?.0)
}

/// Full backward pass for a loss on the fused logits.
pub fn backward(
    model: &FusionModel,
    cache: &ForwardCache,
    logit_grad: &Matrix,
) -> Result<FusionGradients> {
    if logit_grad.shape() != cache.logits.shape() {
        return Err(Error::Contract(format!(
            "logit gradient {:?} vs logits {:?}",
            logit_grad.shape(),
            cache.logits.shape()
        )));
    }
    let mut grads = FusionGradients::zeros_like(model);
    for i in 0..model.num_modalities() {
        if !cache.mask.is_present(i) {
            continue;
        }
        let (dw, dphi) = term_backward(model, cache, i, logit_grad)?;
        grads.head_blocks[i] = dw;
        grads.encoders[i] = encoder_backward(model, cache, i, &dphi)?;
    }
    if model.head == HeadKind::Linear {
        grads.head_bias = logit_grad.col_sums();
    }
    Ok(grads)
}

const CHECKPOINT_MAGIC: &str = "MMCK v1";

fn push_values(out: &mut String, name: &str, shape: &str, values: &[f64]) {
    let _ = write!(out, "{name} {shape}");
    for v in values {
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

pub fn checkpoint_to_text(model: &FusionModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let head = match model.head {
        HeadKind::Linear => "linear".to_string(),
        HeadKind::Cosine { scale } => format!("cosine:{scale:.16e}"),
    };
    let _ = writeln!(
        out,
        "m={} H={} seed={} head={head}",
        model.num_modalities(),
        model.num_classes(),
        model.seed
    );
    let arch: Vec<String> = model
        .arch()
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect();
    let _ = writeln!(out, "arch={}", arch.join(";"));
    for (i, e) in model.encoders.iter().enumerate() {
        for (t, l) in e.layers().iter().enumerate() {
            let shape = format!("{}x{}", l.out_dim(), l.in_dim());
            push_values(
                &mut out,
                &format!("enc{}.l{}.weight", i + 1, t + 1),
                &shape,
                l.weight.as_slice(),
            );
            push_values(
                &mut out,
                &format!("enc{}.l{}.bias", i + 1, t + 1),
                &l.out_dim().to_string(),
                &l.bias,
            );
        }
    }
    for (i, w) in model.head_blocks.iter().enumerate() {
        push_values(
            &mut out,
            &format!("head{}.weight", i + 1),
            &format!("{}x{}", w.rows(), w.cols()),
            w.as_slice(),
        );
    }
    push_values(
        &mut out,
        "head.bias",
        &model.num_classes().to_string(),
        &model.head_bias,
    );
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let at = self.inner.next();
        match at {
            Some((i, l)) => Ok((i + 1, l)),
            None => Err(Error::format(
                0,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }

    fn values(&mut self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let (line, text) = self.next(name)?;
        let mut tok = text.split_whitespace();
        let got = tok.next().unwrap_or_default();
        if got != name {
            return Err(Error::format(
                line,
                format!("expected `{name}`, found `{got}`"),
            ));
        }
        tok.next()
            .ok_or_else(|| Error::format(line, "missing shape"))?;
        let values = tok
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(line, format!("bad value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(Error::format(
                line,
                format!("`{name}` has {} values, expected {expected}", values.len()),
            ));
        }
        Ok(values)
    }
}

pub fn checkpoint_from_text(text: &str) -> Result<FusionModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, magic) = lines
        .next("magic")
        .map_err(|_| Error::format(1, "empty file"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(1, format!("expected `{CHECKPOINT_MAGIC}`")));
    }
    let (line, header) = lines.next("header")?;
    let mut m = None;
    let mut h = None;
    let mut seed = None;
    let mut head = None;
    for tok in header.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::format(line, format!("bad header token `{tok}`")))?;
        let bad = || Error::format(line, format!("bad value for `{k}`: `{v}`"));
        match k {
            "m" => m = Some(v.parse::<usize>().map_err(|_| bad())?),
            "H" => h = Some(v.parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            "head" => {
                head = Some(if v == "linear" {
                    HeadKind::Linear
                } else if let Some(s) = v.strip_prefix("cosine:") {
                    HeadKind::Cosine {
                        scale: s.parse().map_err(|_| bad())?,
                    }
                } else {
                    return Err(bad());
                })
            }
            _ => return Err(Error::format(line, format!("unknown header key `{k}`"))),
        }
    }
    let missing = |k: &str| Error::format(line, format!("header lacks `{k}`"));
    let (m, h, seed, head) = (
        m.ok_or_else(|| missing("m"))?,
        h.ok_or_else(|| missing("H"))?,
        seed.ok_or_else(|| missing("seed"))?,
        head.ok_or_else(|| missing("head"))?,
    );

    let (line, arch_line) = lines.next("arch")?;
    let arch: Vec<Vec<usize>> = arch_line
        .strip_prefix("arch=")
        .ok_or_else(|| Error::format(line, "expected `arch=`"))?
        .split(';')
        .map(|enc| {
            enc.split(',')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::format(line, format!("bad width `{d}`")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    if arch.len() != m || arch.iter().any(|a| a.len() < 2 || a.contains(&0)) {
        return Err(Error::format(
            line,
            format!("arch does not describe {m} encoders"),
        ));
    }

    let mut encoders = Vec::with_capacity(m);
    for (i, sizes) in arch.iter().enumerate() {
        let mut layers = Vec::new();
        for (t, w) in sizes.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let weight = lines.values(&format!("enc{}.l{}.weight", i + 1, t + 1), d_in * d_out)?;
            let bias = lines.values(&format!("enc{}.l{}.bias", i + 1, t + 1), d_out)?;
            layers.push(DenseLayer {
                weight: Matrix::new(d_out, d_in, weight)?,
                bias,
            });
        }
        encoders.push(MlpParams::new(layers)?);
    }
    let mut head_blocks = Vec::with_capacity(m);
    for (i, sizes) in arch.iter().enumerate() {
        let d = sizes[sizes.len() - 1];
        let w = lines.values(&format!("head{}.weight", i + 1), h * d)?;
        head_blocks.push(Matrix::new(h, d, w)?);
    }
    let bias = lines.values("head.bias", h)?;
    if let Some((i, extra)) = lines.inner.next() {
        if !extra.trim().is_empty() {
            return Err(Error::format(i + 1, "trailing content"));
        }
    }
    FusionModel::new(encoders, head_blocks, bias, head, seed)
}

pub fn save_checkpoint(model: &FusionModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_text(&text)
}
