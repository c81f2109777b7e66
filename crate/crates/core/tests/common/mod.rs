//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use balancelab::balance::MethodSpec;
use balancelab::datagen::{Batch, Dataset, Origin};
use balancelab::fusion::{init_model, FusionModel, HeadKind};
use balancelab::numkit::{finite_diff_check, Matrix, ParamVec};
use balancelab::seed;
use balancelab::trainer::{batch_gradients, batch_objective};
use rand::Rng;
use rand_distr::StandardNormal;

/// Triple-loop product, no blocking or transposes.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values by the subset-weighted sum
/// `Σ_{A∌i} |A|!(m−|A|−1)!/m! · [v(A∪{i}) − v(A)]`, `values` indexed by bitmask.
pub fn shapley_subset_oracle(m: usize, values: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), 1 << m);
    (0..m)
        .map(|i| {
            let mut phi = 0.0;
            for a in 0..(1u32 << m) {
                if a & (1 << i) != 0 {
                    continue;
                }
                let size = a.count_ones() as usize;
                let w = factorial(size) * factorial(m - size - 1) / factorial(m);
                phi += w * (values[(a | (1 << i)) as usize] - values[a as usize]);
            }
            phi
        })
        .collect()
}

/// Mean absolute pairwise difference, written out longhand.
pub fn imbalance_oracle(phi: &[f64]) -> f64 {
    match phi {
        [a, b] => (a - b).abs(),
        [a, b, c] => ((a - b).abs() + (a - c).abs() + (b - c).abs()) / 3.0,
        _ => panic!("unsupported length"),
    }
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_batch(dims: &[usize], rows: usize, classes: usize, seed_value: u64) -> Batch {
    let mut rng = seed::rng(seed_value, &[77]);
    let features = dims
        .iter()
        .map(|&d| random_matrix(rows, d, &mut rng))
        .collect();
    let labels = (0..rows).map(|r| r % classes).collect();
    Batch { features, labels }
}

pub fn random_dataset(dims: &[usize], rows: usize, classes: usize, seed_value: u64) -> Dataset {
    let b = random_batch(dims, rows, classes, seed_value);
    Dataset::new(
        b.features,
        b.labels,
        classes,
        Origin::External("fixture".into()),
    )
    .unwrap()
}

/// A seeded small fusion model: `m` modalities, up to two hidden layers of ≤16 units.
pub fn small_model(seed_value: u64, m: usize, head: HeadKind) -> (FusionModel, Vec<usize>) {
    let mut rng = seed::rng(seed_value, &[99]);
    let depth = rng.random_range(0..=2);
    let feat = rng.random_range(2..=8);
    let dims: Vec<usize> = (0..m).map(|_| rng.random_range(2..=6)).collect();
    let arch: Vec<Vec<usize>> = dims
        .iter()
        .map(|&d| {
            let mut sizes = vec![d];
            for _ in 0..depth {
                sizes.push(rng.random_range(2..=16));
            }
            sizes.push(feat);
            sizes
        })
        .collect();
    let mut model = init_model(&arch, 3, seed_value, head).unwrap();
    // Perturb every parameter, biases included: zero biases put hidden units
    // exactly on the ReLU kink whenever a whole layer below is inactive.
    let flat: Vec<f64> = model
        .flatten()
        .into_iter()
        .map(|p| p + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.assign_flat(&flat).unwrap();
    (model, dims)
}

/// Largest relative deviation between analytic and central-difference gradients.
pub fn gradient_error(model: &FusionModel, batch: &Batch, method: &MethodSpec) -> f64 {
    let (_, grads) = batch_gradients(model, batch, method).unwrap();
    finite_diff_check(
        |p: &FusionModel| batch_objective(p, batch, method).unwrap(),
        model,
        &grads,
        1e-6,
    )
    .unwrap()
}
