//! Performance, Shapley-based modality imbalance, and FLOPs accounting.

use std::collections::BTreeMap;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{forward, predict, FusionModel, ModalityMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / preds.len() as f64)
}

pub fn confusion(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(
            "predictions and labels differ in length".into(),
        ));
    }
    let mut c = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Contract(format!(
                "class index outside 0..{num_classes}"
            )));
        }
        c[y][p] += 1;
    }
    Ok(c)
}

/// Unweighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::Contract(
            "macro F1 needs at least two classes".into(),
        ));
    }
    let c = confusion(preds, labels, num_classes)?;
    Ok(macro_f1_from_confusion(&c))
}

fn macro_f1_from_confusion(c: &[Vec<u64>]) -> f64 {
    let h = c.len();
    let total: f64 = (0..h)
        .map(|k| {
            let tp = c[k][k] as f64;
            let predicted: u64 = (0..h).map(|y| c[y][k]).sum();
            let actual: u64 = c[k].iter().sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    total / h as f64
}

pub fn perf_report(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<PerfReport> {
    let acc = accuracy(preds, labels)?;
    if num_classes < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    let confusion = confusion(preds, labels, num_classes)?;
    Ok(PerfReport {
        accuracy: acc,
        macro_f1: macro_f1_from_confusion(&confusion),
        confusion,
    })
}

/// Predictions of `model` on `data` with only the modalities in `subset`.
pub fn masked_predictions(
    model: &FusionModel,
    data: &Dataset,
    subset: &ModalityMask,
) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation data is empty".into()));
    }
    if subset.len() != model.num_modalities() {
        return Err(Error::Contract(format!(
            "subset over {} modalities for a {}-modality model",
            subset.len(),
            model.num_modalities()
        )));
    }
    let cache = forward(model, &data.as_batch(), subset)?;
    predict(cache.logits())
}

/// `v(A)`: masked-evaluation accuracy.
pub fn value_function(model: &FusionModel, data: &Dataset, subset: &ModalityMask) -> Result<f64> {
    let preds = masked_predictions(model, data, subset)?;
    accuracy(&preds, data.labels())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi: Vec<f64>,
    /// `v(A)` keyed by subset bitmask (bit `i` = modality `i + 1`).
    pub subset_values: BTreeMap<u32, f64>,
    pub imbalance: f64,
}

impl ShapleyReport {
    pub fn value(&self, subset: &ModalityMask) -> Option<f64> {
        self.subset_values.get(&subset.bits()).copied()
    }
}

/// Shapley values by averaging marginal contributions over all orderings.
///
/// `values[bits]` is `v` of the subset encoded by `bits`. Each modality's
/// marginal contributions are summed in sorted order, so relabeling modalities
/// permutes the result bit for bit.
pub fn shapley_from_values(m: usize, values: &[f64]) -> Result<ShapleyReport> {
    if !(1..=8).contains(&m) || values.len() != 1 << m {
        return Err(Error::Contract(format!(
            "need 2^{m} subset values, got {}",
            values.len()
        )));
    }
    let mut marginals: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut orderings = 0usize;
    for perm in (0..m).permutations(m) {
        orderings += 1;
        let mut before = 0u32;
        for &i in &perm {
            let with = before | (1 << i);
            marginals[i].push(values[with as usize] - values[before as usize]);
            before = with;
        }
    }
    let phi: Vec<f64> = marginals
        .into_iter()
        .map(|mut c| {
            c.sort_by(f64::total_cmp);
            c.iter().sum::<f64>() / orderings as f64
        })
        .collect();
    let imbalance = if (2..=3).contains(&m) {
        imbalance(&phi)?
    } else {
        f64::NAN
    };
    Ok(ShapleyReport {
        phi,
        subset_values: values
            .iter()
            .enumerate()
            .map(|(b, &v)| (b as u32, v))
            .collect(),
        imbalance,
    })
}

/// Evaluates `v` once per subset on `data` and returns Shapley contributions.
pub fn shapley(model: &FusionModel, data: &Dataset) -> Result<ShapleyReport> {
    let m = model.num_modalities();
    if !(2..=3).contains(&m) {
        return Err(Error::Contract(format!(
            "Shapley imbalance needs 2 or 3 modalities, got {m}"
        )));
    }
    let values = (0..1u32 << m)
        .into_par_iter()
        .map(|bits| value_function(model, data, &ModalityMask::from_bits(m, bits)))
        .collect::<Result<Vec<_>>>()?;
    shapley_from_values(m, &values)
}

/// Mean absolute pairwise difference of contributions (2 or 3 modalities).
pub fn imbalance(phi: &[f64]) -> Result<f64> {
    let mut sorted = phi.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    match sorted.as_slice() {
        [a, b] => Ok((a - b).abs()),
        [a, b, c] => Ok(((a - b).abs() + (a - c).abs() + (b - c).abs()) / 3.0),
        _ => Err(Error::Contract(format!(
            "imbalance is defined for 2 or 3 modalities, got {}",
            phi.len()
        ))),
    }
}

/// Counted operations.
///
/// Conventions: a multiply-add is 2 FLOPs; a `(p×q)·(q×r)` product costs
/// `2pqr`, plus `pr` when a bias is added; its backward (input and weight
/// gradients) costs `4pqr`; elementwise ops cost 1 per element; softmax with
/// cross-entropy costs 5 per logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopOp {
    MatmulForward {
        p: usize,
        q: usize,
        r: usize,
        bias: bool,
    },
    MatmulBackward {
        p: usize,
        q: usize,
        r: usize,
    },
    Elementwise {
        n: usize,
    },
    SoftmaxLoss {
        rows: usize,
        classes: usize,
    },
}

impl FlopOp {
    /// Builds an op from its name, as used in logs and configs.
    pub fn parse(kind: &str, dims: &[usize]) -> Result<Self> {
        let op = match (kind, dims) {
            ("linear", &[p, q, r]) => FlopOp::MatmulForward {
                p,
                q,
                r,
                bias: true,
            },
            ("matmul", &[p, q, r]) => FlopOp::MatmulForward {
                p,
                q,
                r,
                bias: false,
            },
            ("linear_backward" | "matmul_backward", &[p, q, r]) => {
                FlopOp::MatmulBackward { p, q, r }
            }
            ("elementwise", &[n]) => FlopOp::Elementwise { n },
            ("softmax_ce", &[rows, classes]) => FlopOp::SoftmaxLoss { rows, classes },
            _ => {
                return Err(Error::Contract(format!(
                    "unknown FLOP op `{kind}` with dims {dims:?}"
                )))
            }
        };
        Ok(op)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub forward_matmul: u64,
    pub backward_matmul: u64,
    pub elementwise: u64,
    pub softmax_loss: u64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.forward_matmul + self.backward_matmul + self.elementwise + self.softmax_loss
    }

    pub fn record(&mut self, op: FlopOp) -> &mut Self {
        let n = |x: usize| x as u64;
        match op {
            FlopOp::MatmulForward { p, q, r, bias } => {
                self.forward_matmul += 2 * n(p) * n(q) * n(r) + if bias { n(p) * n(r) } else { 0 };
            }
            FlopOp::MatmulBackward { p, q, r } => self.backward_matmul += 4 * n(p) * n(q) * n(r),
            FlopOp::Elementwise { n: k } => self.elementwise += n(k),
            FlopOp::SoftmaxLoss { rows, classes } => self.softmax_loss += 5 * n(rows) * n(classes),
        }
        self
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        self.forward_matmul += other.forward_matmul;
        self.backward_matmul += other.backward_matmul;
        self.elementwise += other.elementwise;
        self.softmax_loss += other.softmax_loss;
    }
}
