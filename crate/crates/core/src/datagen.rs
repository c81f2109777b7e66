//! Seeded synthetic multimodal datasets, splits, batching and the `MMDS v1` text format.
//!
//! Each class `h` owns one unit-norm mean direction per modality. A sample of
//! class `y` draws modality `i` as `signal[i] * mean[i][y] + noise * ε` with `ε`
//! standard normal, so `signal` is the per-modality informativeness knob.
//!
//! Labels are 0-based class indices everywhere, including the file format.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::seed::{self, stream, LabRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: Vec<usize>,
    /// Class-mean scale per modality.
    pub signal: Vec<f64>,
    pub noise: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dims.len();
        if !(2..=3).contains(&m) {
            return Err(Error::InvalidSpec(format!(
                "need 2 or 3 modalities, got {m}"
            )));
        }
        if self.signal.len() != m {
            return Err(Error::InvalidSpec(format!(
                "{} signal scales for {m} modalities",
                self.signal.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidSpec(
                "modality dimensions must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        if self.signal.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidSpec(
                "signal scales must be finite and non-negative".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::InvalidSpec("noise must be positive".into()));
        }
        if self.samples < self.num_classes {
            return Err(Error::InvalidSpec(format!(
                "N = {} is smaller than H = {}",
                self.samples, self.num_classes
            )));
        }
        Ok(())
    }

    /// Unit-norm class mean directions, indexed `[modality][class]`.
    pub fn class_means(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        self.validate()?;
        let mut rng = seed::rng(self.seed, &[stream::DATA]);
        Ok(draw_means(self, &mut rng))
    }
}

fn draw_means(spec: &SyntheticSpec, rng: &mut LabRng) -> Vec<Vec<Vec<f64>>> {
    spec.dims
        .iter()
        .map(|&d| {
            (0..spec.num_classes)
                .map(|_| loop {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        break v.into_iter().map(|x| x / norm).collect();
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Origin {
    Synthetic(SyntheticSpec),
    External(String),
    Subset,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<Matrix>,
    labels: Vec<usize>,
    num_classes: usize,
    origin: Origin,
}

/// Records compare equal; provenance is ignored.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.shape() == b.shape() && bitwise_eq(a.as_slice(), b.as_slice()))
    }
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Features and labels for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(
        features: Vec<Matrix>,
        labels: Vec<usize>,
        num_classes: usize,
        origin: Origin,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Shape("dataset needs at least one modality".into()));
        }
        if num_classes < 2 {
            return Err(Error::Contract("dataset needs at least two classes".into()));
        }
        if let Some(f) = features.iter().find(|f| f.rows() != labels.len()) {
            return Err(Error::Shape(format!(
                "modality has {} rows for {} labels",
                f.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!(
                "label {y} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(Matrix::cols).collect()
    }

    pub fn features(&self, modality: usize) -> &Matrix {
        &self.features[modality]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self
                .features
                .iter()
                .map(|f| f.gather_rows(indices))
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            features: b.features,
            labels: b.labels,
            num_classes: self.num_classes,
            origin: Origin::Subset,
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[stream::DATA]);
    let means = draw_means(spec, &mut rng);

    let h = spec.num_classes;
    let mut labels: Vec<usize> = (0..spec.samples).map(|_| rng.random_range(0..h)).collect();
    let mut counts = vec![0usize; h];
    for &y in &labels {
        counts[y] += 1;
    }
    for missing in 0..h {
        if counts[missing] > 0 {
            continue;
        }
        // N >= H guarantees some class is duplicated.
        let k = labels
            .iter()
            .position(|&y| counts[y] > 1)
            .expect("a duplicated class exists when N >= H");
        counts[labels[k]] -= 1;
        labels[k] = missing;
        counts[missing] = 1;
    }

    let mut features: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .map(|&d| Vec::with_capacity(d * spec.samples))
        .collect();
    for &y in &labels {
        for (i, &d) in spec.dims.iter().enumerate() {
            let mean = &means[i][y];
            for mu in mean.iter().take(d) {
                let eps: f64 = rng.sample(StandardNormal);
                features[i].push(spec.signal[i] * mu + spec.noise * eps);
            }
        }
    }
    let features = features
        .into_iter()
        .zip(&spec.dims)
        .map(|(v, &d)| Matrix::new(spec.samples, d, v))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(features, labels, h, Origin::Synthetic(spec.clone()))
}

/// Train/val/test index sets; each sorted ascending.
pub fn split_indices(data: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidSplit(format!(
            "fractions must all be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!(
            "fractions sum to {total}, not 1"
        )));
    }
    let n = data.len();
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val + n_test != n {
        return Err(Error::InvalidSplit(format!(
            "sizes {n_train}/{n_val}/{n_test} from N = {n}"
        )));
    }

    // Order samples by their fractional rank within a shuffled class list, so any
    // prefix holds each class in proportion to its frequency.
    let mut rng = seed::rng(seed, &[stream::SPLIT]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (k, &y) in data.labels().iter().enumerate() {
        by_class[y].push(k);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let nc = members.len() as f64;
        for (r, &k) in members.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / nc, c, k));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, k)| k).collect();

    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    parts.iter_mut().for_each(|p| p.sort_unstable());
    Ok(parts)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn split(data: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let [tr, va, te] = split_indices(data, fractions, seed)?;
    Ok(Splits {
        train: data.subset(&tr),
        val: data.subset(&va),
        test: data.subset(&te),
    })
}

/// Per-sample non-negative resampling weights with at least one positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights(Vec<f64>);

impl SamplingWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidWeights("all weights are zero".into()));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index batches for one epoch.
///
/// Unweighted: a seeded permutation cut into chunks. Weighted: `n` draws with
/// replacement in proportion to the weights.
pub fn batches(
    n: usize,
    batch_size: usize,
    shuffle_seed: u64,
    weights: Option<&SamplingWeights>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidParam("batch size must be at least 1".into()));
    }
    let mut rng = LabRng::seed_from_u64(shuffle_seed);
    let order: Vec<usize> = match weights {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        }
        Some(w) => {
            if w.len() != n {
                return Err(Error::InvalidWeights(format!(
                    "{} weights for {n} samples",
                    w.len()
                )));
            }
            let dist = WeightedIndex::new(w.as_slice())
                .map_err(|e| Error::InvalidWeights(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

const MAGIC: &str = "MMDS v1";

fn fmt_f64(out: &mut String, v: f64) {
    // 17 significant digits round-trip every f64.
    let _ = write!(out, "{v:.16e}");
}

pub fn to_text(data: &Dataset) -> String {
    let mut out = String::new();
    let dims: Vec<String> = data.dims().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(
        out,
        "m={} H={} N={} dims={}",
        data.num_modalities(),
        data.num_classes(),
        data.len(),
        dims.join(",")
    );
    for k in 0..data.len() {
        let _ = write!(out, "{}", data.labels[k]);
        for f in &data.features {
            out.push('|');
            for (j, &v) in f.row(k).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                fmt_f64(&mut out, v);
            }
        }
        out.push('\n');
    }
    out
}

fn header_field<'a>(line: usize, token: Option<&'a str>, key: &str) -> Result<&'a str> {
    let token = token.ok_or_else(|| Error::format(line, format!("missing `{key}=`")))?;
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| Error::format(line, format!("expected `{key}=`, found `{token}`")))
}

fn parse_usize(line: usize, s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format(line, format!("{what}: `{s}` is not a count")))
}

pub fn from_text(text: &str, origin: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    match lines.next() {
        Some(MAGIC) => {}
        Some(other) => {
            return Err(Error::format(
                1,
                format!("expected `{MAGIC}`, found `{other}`"),
            ))
        }
        None => return Err(Error::format(1, "empty file")),
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::format(2, "missing header line"))?;
    let mut tokens = header.split_whitespace();
    let m = parse_usize(2, header_field(2, tokens.next(), "m")?, "m")?;
    let h = parse_usize(2, header_field(2, tokens.next(), "H")?, "H")?;
    let n = parse_usize(2, header_field(2, tokens.next(), "N")?, "N")?;
    let dims = header_field(2, tokens.next(), "dims")?
        .split(',')
        .map(|d| parse_usize(2, d, "dims"))
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = tokens.next() {
        return Err(Error::format(
            2,
            format!("unexpected header token `{extra}`"),
        ));
    }
    if dims.len() != m || m == 0 || dims.contains(&0) {
        return Err(Error::format(
            2,
            format!("dims {dims:?} inconsistent with m={m}"),
        ));
    }
    if h < 2 {
        return Err(Error::format(2, "H must be at least 2"));
    }

    let mut labels = Vec::with_capacity(n);
    let mut values: Vec<Vec<f64>> = dims.iter().map(|&d| Vec::with_capacity(d * n)).collect();
    let mut rows = 0;
    for (offset, row) in lines.enumerate() {
        let line = offset + 3;
        if row.is_empty() {
            return Err(Error::format(line, "blank line"));
        }
        if rows == n {
            return Err(Error::format(line, format!("more than N = {n} rows")));
        }
        let mut parts = row.split('|');
        let label = parse_usize(line, parts.next().unwrap_or_default(), "label")?;
        if label >= h {
            return Err(Error::format(line, format!("label {label} outside 0..{h}")));
        }
        for (i, &d) in dims.iter().enumerate() {
            let part = parts
                .next()
                .ok_or_else(|| Error::format(line, format!("missing modality {}", i + 1)))?;
            let before = values[i].len();
            for tok in part.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::format(line, format!("bad value `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::format(line, format!("non-finite value `{tok}`")));
                }
                values[i].push(v);
            }
            let got = values[i].len() - before;
            if got != d {
                return Err(Error::format(
                    line,
                    format!("modality {} has {got} values, header declares {d}", i + 1),
                ));
            }
        }
        if parts.next().is_some() {
            return Err(Error::format(line, format!("more than m = {m} modalities")));
        }
        labels.push(label);
        rows += 1;
    }
    if rows != n {
        return Err(Error::format(
            rows + 3,
            format!("expected N = {n} rows, found {rows}"),
        ));
    }
    let features = values
        .into_iter()
        .zip(&dims)
        .map(|(v, &d)| Matrix::new(n, d, v))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(features, labels, h, Origin::External(origin.to_string()))
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(data)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, &path.display().to_string())
}
