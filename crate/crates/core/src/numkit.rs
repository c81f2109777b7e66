//! Dense `f64` matrices and a small rectifier MLP with hand-written backprop.
//!
//! Matrices are row-major. A batch of `B` samples with `d` features is a `B×d`
//! matrix; a dense layer stores its weight as `d_out×d_in` so the forward map
//! is `x · Wᵀ + b`.
//!
//! The rectifier derivative at exactly zero is taken to be zero.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major values, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Row vector broadcast over `rows` rows.
    pub fn broadcast_row(row: &[f64], rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(row);
        }
        Self {
            rows,
            cols: row.len(),
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_row_vector(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "row vector of length {} onto {} columns",
                row.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += ari * bv;
            }
        }
    }
    Ok(out)
}

/// Flat view of a parameter (or gradient) container, in a fixed traversal order.
pub trait ParamVec {
    fn num_params(&self) -> usize;
    fn flatten(&self) -> Vec<f64>;
    fn assign_flat(&mut self, values: &[f64]) -> Result<()>;
}

impl ParamVec for Vec<f64> {
    fn num_params(&self) -> usize {
        self.len()
    }

    fn flatten(&self) -> Vec<f64> {
        self.clone()
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "flat assign of {} into {}",
                values.len(),
                self.len()
            )));
        }
        self.copy_from_slice(values);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `d_out × d_in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Rectifier MLP: ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("mlp needs at least one layer".into()));
        }
        for (t, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {t}: bias length {} for {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
        }
        for (t, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {t} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    t + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn glorot<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let a = (6.0 / (d_in + d_out) as f64).sqrt();
                let data = (0..d_in * d_out).map(|_| rng.random_range(-a..a)).collect();
                DenseLayer {
                    weight: Matrix {
                        rows: d_out,
                        cols: d_in,
                        data,
                    },
                    bias: vec![0.0; d_out],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths from input to output.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn zeros_like(&self) -> MlpGradients {
        MlpGradients {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }
}

fn flatten_layers(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

fn assign_layers(layers: &mut [DenseLayer], values: &[f64]) -> Result<()> {
    let total: usize = layers
        .iter()
        .map(|l| l.weight.as_slice().len() + l.bias.len())
        .sum();
    if total != values.len() {
        return Err(Error::Shape(format!(
            "flat assign of {} values into {total} parameters",
            values.len()
        )));
    }
    let mut at = 0;
    for l in layers {
        let n = l.weight.as_slice().len();
        l.weight.as_mut_slice().copy_from_slice(&values[at..at + n]);
        at += n;
        let n = l.bias.len();
        l.bias.copy_from_slice(&values[at..at + n]);
        at += n;
    }
    Ok(())
}

impl ParamVec for MlpParams {
    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        assign_layers(&mut self.layers, values)
    }
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<DenseLayer>,
}

impl MlpGradients {
    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weight.scale(alpha);
            l.bias.iter_mut().for_each(|b| *b *= alpha);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient depth mismatch".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }
}

impl ParamVec for MlpGradients {
    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        assign_layers(&mut self.layers, values)
    }
}

/// Activations kept by [`mlp_forward`] for the matching [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (layer 0 gets the raw batch).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    /// Pre-activations of the last layer, which equal the MLP output.
    pub fn output(&self) -> &Matrix {
        &self.pre[self.pre.len() - 1]
    }
}

fn relu(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    }
}

pub fn mlp_forward(params: &MlpParams, input: &Matrix) -> Result<(Matrix, MlpCache)> {
    if input.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "mlp expects {} input features, got {}",
            params.input_dim(),
            input.cols()
        )));
    }
    let depth = params.layers.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut current = input.clone();
    for (t, layer) in params.layers.iter().enumerate() {
        let mut z = matmul_nt(&current, &layer.weight)?;
        z.add_row_vector(&layer.bias)?;
        let next = if t + 1 < depth { relu(&z) } else { z.clone() };
        inputs.push(current);
        pre.push(z);
        current = next;
    }
    Ok((current, MlpCache { inputs, pre }))
}

/// Exact gradients of the forward map given `∂L/∂output`.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    output_grad: &Matrix,
) -> Result<(MlpGradients, Matrix)> {
    let depth = params.layers.len();
    if cache.pre.len() != depth || cache.inputs.len() != depth {
        return Err(Error::Contract(format!(
            "cache holds {} layers, params have {depth}",
            cache.pre.len()
        )));
    }
    for (t, layer) in params.layers.iter().enumerate() {
        if cache.inputs[t].cols() != layer.in_dim() || cache.pre[t].cols() != layer.out_dim() {
            return Err(Error::Contract(format!(
                "cache layer {t} does not match parameter shapes"
            )));
        }
    }
    if output_grad.shape() != cache.output().shape() {
        return Err(Error::Contract(format!(
            "output gradient {:?} vs cached output {:?}",
            output_grad.shape(),
            cache.output().shape()
        )));
    }

    let mut grads = Vec::with_capacity(depth);
    let mut delta = output_grad.clone();
    for t in (0..depth).rev() {
        let layer = &params.layers[t];
        let weight = matmul_tn(&delta, &cache.inputs[t])?;
        let bias = delta.col_sums();
        let mut below = matmul(&delta, &layer.weight)?;
        if t > 0 {
            let pre = &cache.pre[t - 1];
            for (g, &z) in below.data.iter_mut().zip(&pre.data) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grads.push(DenseLayer { weight, bias });
        delta = below;
    }
    grads.reverse();
    Ok((MlpGradients { layers: grads }, delta))
}

/// Central-difference check of `analytic` against `f` around `params`.
///
/// Returns the max over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<P, G, F>(mut f: F, params: &P, analytic: &G, eps: f64) -> Result<f64>
where
    P: ParamVec + Clone,
    G: ParamVec,
    F: FnMut(&P) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let base = params.flatten();
    let grad = analytic.flatten();
    if base.len() != grad.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            base.len(),
            grad.len()
        )));
    }
    let mut probe = params.clone();
    let mut values = base.clone();
    let mut worst = 0.0_f64;
    for i in 0..base.len() {
        values[i] = base[i] + eps;
        probe.assign_flat(&values)?;
        let up = f(&probe);
        values[i] = base[i] - eps;
        probe.assign_flat(&values)?;
        let down = f(&probe);
        values[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite around coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (grad[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert_eq!(
            matmul(&a, &m(&[&[1.0], &[1.0]])).unwrap(),
            m(&[&[3.0], &[7.0]])
        );
        assert_eq!(matmul(&m(&[&[2.0]]), &m(&[&[3.0]])).unwrap(), m(&[&[6.0]]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(Matrix::new(1, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[0.5, 1.0, 2.0], &[-1.0, 0.0, 3.0]]);
        assert_eq!(
            matmul_nt(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
        assert_eq!(
            matmul_tn(&a, &b).unwrap(),
            matmul(&a.transpose(), &b).unwrap()
        );
    }

    #[test]
    fn zero_weights_collapse_to_bias() {
        let layer = DenseLayer {
            weight: Matrix::zeros(2, 3),
            bias: vec![0.5, -1.5],
        };
        let mlp = MlpParams::new(vec![layer]).unwrap();
        let x = m(&[&[1.0, 2.0, 3.0], &[-4.0, 0.0, 9.0]]);
        let (out, _) = mlp_forward(&mlp, &x).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = MlpParams::new(vec![DenseLayer {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = m(&[&[1.0, -2.0, 3.0]]);
        assert_eq!(mlp_forward(&mlp, &x).unwrap().0, x);
    }

    #[test]
    fn negative_input_is_rectified_away() {
        // 1 -> 3 hidden (all ones) -> 1 output with bias 0.25.
        let mlp = MlpParams::new(vec![
            DenseLayer {
                weight: Matrix::filled(3, 1, 1.0),
                bias: vec![0.0; 3],
            },
            DenseLayer {
                weight: Matrix::filled(1, 3, 1.0),
                bias: vec![0.25],
            },
        ])
        .unwrap();
        let (out, cache) = mlp_forward(&mlp, &m(&[&[-1.0]])).unwrap();
        assert_eq!(cache.pre[0].row(0), &[-1.0, -1.0, -1.0]);
        assert_eq!(out.as_slice(), &[0.25]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::glorot(&[4, 3], &mut rng).unwrap();
        assert!(matches!(
            mlp_forward(&mlp, &Matrix::zeros(2, 5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MlpParams::glorot(&[3, 5, 2], &mut rng).unwrap();
        let x = m(&[&[0.3, -0.2, 1.0], &[1.0, 2.0, -3.0]]);
        let (_, cache) = mlp_forward(&mlp, &x).unwrap();
        let (g, dx) = mlp_backward(&mlp, &cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_summed_input() {
        // loss = sum of the single output => dW = column sums of the batch.
        let mlp = MlpParams::new(vec![DenseLayer {
            weight: m(&[&[0.7, -0.3]]),
            bias: vec![0.1],
        }])
        .unwrap();
        let x = m(&[&[1.0, 2.0], &[3.0, -5.0], &[0.5, 0.5]]);
        let (_, cache) = mlp_forward(&mlp, &x).unwrap();
        let (g, _) = mlp_backward(&mlp, &cache, &Matrix::filled(3, 1, 1.0)).unwrap();
        assert_eq!(g.layers[0].weight.as_slice(), &[4.5, -2.5]);
        assert_eq!(g.layers[0].bias, vec![3.0]);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = MlpParams::glorot(&[3, 4, 2], &mut rng).unwrap();
        let b = MlpParams::glorot(&[3, 2], &mut rng).unwrap();
        let (_, cache) = mlp_forward(&a, &Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(
            mlp_backward(&b, &cache, &Matrix::zeros(1, 2)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            mlp_backward(&a, &cache, &Matrix::zeros(2, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn finite_diff_on_square() {
        let w = vec![3.0];
        let err = finite_diff_check(|p: &Vec<f64>| p[0] * p[0], &w, &vec![6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn finite_diff_detects_zeroed_gradient() {
        let w = vec![3.0];
        let err = finite_diff_check(|p: &Vec<f64>| p[0] * p[0], &w, &vec![0.0], 1e-5).unwrap();
        // |0 - 6| / max(1, 6)
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn finite_diff_constant_objective() {
        let w = vec![1.0, -2.0];
        let err = finite_diff_check(|_: &Vec<f64>| 4.0, &w, &vec![0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_rejects_non_finite_objective() {
        let w = vec![1.0];
        let r = finite_diff_check(|_: &Vec<f64>| f64::NAN, &w, &vec![0.0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(matches!(
            finite_diff_check(|p: &Vec<f64>| p[0], &w, &vec![1.0], 0.0),
            Err(Error::InvalidParam(_))
        ));
    }
}
