//! Config-driven experiment runner: seeded runs, sweeps, reports and tables.
//!
//! Every (method, seed, sweep value) cell is independent. A finished cell is
//! written to its own JSON file under `<out>/cells/`, tagged with a fingerprint
//! of everything that determines its result, so an interrupted run resumes by
//! skipping cells whose file already carries the right fingerprint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{Category, MethodSpec};
use crate::datagen::{self, Dataset, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::{self, init_model, FusionModel};
use crate::metrics::{masked_predictions, perf_report, shapley, PerfReport, ShapleyReport};
use crate::seed::{self, stream};
use crate::trainer::{fit, TrainConfig, TrainLog};
use crate::ModalityMask;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable overriding the configured master seed.
pub const SEED_ENV: &str = "BALANCELAB_SEED";

pub const ABSOLUTE_BALANCE: &str = "absolute_balance";
pub const RELATIVE_BALANCE: &str = "relative_balance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// Either a dataset file (`path`) or a synthetic spec; omitted synthetic
/// fields take their defaults. Without `seed` each run draws its own dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            classes: None,
            dims: None,
            signal: None,
            noise: None,
            samples: None,
            seed: None,
            split: default_split(),
        }
    }
}

impl DatasetConfig {
    fn is_synthetic(&self) -> bool {
        self.path.is_none()
    }

    /// The synthetic spec for a run whose derived seed is `run_seed`.
    pub fn synthetic_spec(&self, run_seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes.unwrap_or(4),
            dims: self.dims.clone().unwrap_or_else(|| vec![12, 12]),
            signal: self.signal.clone().unwrap_or_else(|| vec![3.0, 1.0]),
            noise: self.noise.unwrap_or(1.0),
            samples: self.samples.unwrap_or(4000),
            seed: self
                .seed
                .unwrap_or_else(|| seed::derive(run_seed, &[stream::DATA])),
        }
    }

    fn validate(&self) -> Result<()> {
        let synthetic_keys = self.classes.is_some()
            || self.dims.is_some()
            || self.signal.is_some()
            || self.noise.is_some()
            || self.samples.is_some()
            || self.seed.is_some();
        if self.path.is_some() && synthetic_keys {
            return Err(config_error(
                "dataset",
                "give either `path` or synthetic fields, not both",
            ));
        }
        if self.is_synthetic() {
            self.synthetic_spec(0).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths of every encoder.
    pub hidden: Vec<usize>,
    /// Encoder output width.
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            feature_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, input_dims: &[usize]) -> Vec<Vec<usize>> {
        input_dims
            .iter()
            .map(|&d| {
                let mut sizes = vec![d];
                sizes.extend(&self.hidden);
                sizes.push(self.feature_dim);
                sizes
            })
            .collect()
    }
}

/// `kind` plus at most the one strength key that kind accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_uni: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_mask: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl MethodConfig {
    pub fn of(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            w_uni: None,
            scale: None,
            lambda: None,
            alpha: None,
            rho_mask: None,
            p_max: None,
            tau: None,
        }
    }

    pub fn spec(&self) -> Result<MethodSpec> {
        let mut spec = MethodSpec::from_kind(&self.kind)?;
        let given = [
            ("w_uni", self.w_uni),
            ("scale", self.scale),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("rho_mask", self.rho_mask),
            ("p_max", self.p_max),
            ("tau", self.tau),
        ];
        for (name, value) in given {
            if let Some(v) = value {
                spec = spec
                    .with_param(name, v)
                    .map_err(|e| config_error(&format!("method.{name}"), &e.to_string()))?;
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub shapley: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { shapley: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// `method.<param>`, or just `<param>`.
    pub param: String,
    pub values: Vec<f64>,
}

fn config_error(path: &str, msg: &str) -> Error {
    Error::Config {
        path: path.to_string(),
        msg: msg.to_string(),
    }
}

impl ExperimentConfig {
    /// A config with every default filled in.
    pub fn minimal(kind: &str) -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            method: MethodConfig::of(kind),
            eval: EvalConfig::default(),
            sweep: None,
            seeds: default_seeds(),
            master_seed: 0,
            out_dir: default_out_dir(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        self.dataset.validate()?;
        self.train
            .validate()
            .map_err(|e| config_error("train", &e.to_string()))?;
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(config_error("model", "layer widths must be positive"));
        }
        self.method.spec()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(config_error(
                    "sweep.values",
                    "at least one value is required",
                ));
            }
            for &v in &sweep.values {
                sweep_spec(&self.method.spec()?, &sweep.param, v)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error("", &e.to_string()))
    }
}

/// Strict TOML parse; errors name the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| config_error("", e.message()))?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let msg = e.into_inner().message().to_string();
        // a missing key is reported at its parent; name the key itself
        if let Some(field) = msg
            .strip_prefix("missing field `")
            .and_then(|r| r.strip_suffix('`'))
        {
            path = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        config_error(&path, &msg)
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// `base` with the swept parameter set to `value`.
pub fn sweep_spec(base: &MethodSpec, param: &str, value: f64) -> Result<MethodSpec> {
    let name = param.strip_prefix("method.").unwrap_or(param);
    if base.param().is_none_or(|(p, _)| p != name) {
        return Err(config_error(
            "sweep.param",
            &format!("`{param}` is not a numeric parameter of method `{base}`"),
        ));
    }
    base.with_param(name, value)
}

/// Master seed precedence: explicit flag, then the environment, then the config.
pub fn resolve_master_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| config_error(SEED_ENV, &format!("`{v}` is not an unsigned integer"))),
        None => Ok(config),
    }
}

/// Generator seed of one run, isolated from every other seed value.
pub fn run_seed(master: u64, seed: u64) -> u64 {
    seed::derive(master, &[seed])
}

/// Dataset and splits for one run.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Splits)> {
    let rs = run_seed(config.master_seed, seed);
    let data = match &config.dataset.path {
        Some(path) => datagen::load(path)?,
        None => datagen::generate(&config.dataset.synthetic_spec(rs))?,
    };
    let splits = datagen::split(
        &data,
        config.dataset.split,
        seed::derive(rs, &[stream::SPLIT]),
    )?;
    Ok((data, splits))
}

/// One (method, seed) row. Aggregate rows reuse the shape with `seed` holding
/// `mean` or `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: String,
    pub seed: String,
    pub sweep_param: Option<String>,
    pub sweep_value: Option<f64>,
    pub acc: f64,
    pub macro_f1: f64,
    pub phi: Vec<f64>,
    pub imbalance: f64,
    pub flops_total: f64,
    pub best_epoch: f64,
    #[serde(default)]
    pub marker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub seed: u64,
    pub sweep_value: Option<f64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub num_modalities: usize,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<RunRow>,
    pub failures: Vec<CellFailure>,
}

/// Everything a finished cell produces.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub row: RunRow,
    pub model: FusionModel,
    pub log: TrainLog,
    pub perf: PerfReport,
    pub shapley: Option<ShapleyReport>,
}

/// Trains and evaluates one (method, seed) cell on the test split.
pub fn run_cell(
    config: &ExperimentConfig,
    method: &MethodSpec,
    seed: u64,
    sweep: Option<(&str, f64)>,
) -> Result<CellOutcome> {
    let rs = run_seed(config.master_seed, seed);
    let (data, splits) = prepare_data(config, seed)?;
    let arch = config.model.arch(&data.dims());
    let model = init_model(
        &arch,
        data.num_classes(),
        seed::derive(rs, &[stream::INIT]),
        method.head_kind(),
    )?;
    let train = TrainConfig {
        seed: rs,
        ..config.train.clone()
    };
    let out = fit(&splits, model, &train, method)?;
    let m = data.num_modalities();
    let preds = masked_predictions(&out.model, &splits.test, &ModalityMask::full(m))?;
    let perf = perf_report(&preds, splits.test.labels(), data.num_classes())?;
    let sh = if config.eval.shapley {
        Some(shapley(&out.model, &splits.test)?)
    } else {
        None
    };
    let row = RunRow {
        method: method.kind_name().to_string(),
        seed: seed.to_string(),
        sweep_param: sweep.map(|(p, _)| p.to_string()),
        sweep_value: sweep.map(|(_, v)| v),
        acc: perf.accuracy,
        macro_f1: perf.macro_f1,
        phi: sh
            .as_ref()
            .map(|s| s.phi.clone())
            .unwrap_or_else(|| vec![f64::NAN; m]),
        imbalance: sh.as_ref().map_or(f64::NAN, |s| s.imbalance),
        flops_total: out.log.flops.total() as f64,
        best_epoch: out.log.best_epoch.map_or(f64::NAN, |e| e as f64),
        marker: String::new(),
    };
    Ok(CellOutcome {
        row,
        model: out.model,
        log: out.log,
        perf,
        shapley: sh,
    })
}

/// Runtime options that never affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where cells, checkpoints and reports go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 or 1 runs serially.
    pub jobs: usize,
    /// Also write a checkpoint and training log per cell.
    pub save_models: bool,
}

#[derive(Debug, Clone)]
struct Cell {
    method: MethodSpec,
    seed: u64,
    sweep: Option<(String, f64)>,
}

impl Cell {
    fn name(&self) -> String {
        match &self.sweep {
            Some((p, v)) => format!("{}_seed{}_{}={}", self.method.kind_name(), self.seed, p, v),
            None => format!("{}_seed{}", self.method.kind_name(), self.seed),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    fingerprint: String,
    row: RunRow,
}

fn fingerprint(config: &ExperimentConfig, cell: &Cell) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        version: &'a str,
        dataset: &'a DatasetConfig,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        eval: &'a EvalConfig,
        master_seed: u64,
        method: &'a MethodSpec,
        seed: u64,
        sweep: &'a Option<(String, f64)>,
    }
    let key = Key {
        version: VERSION,
        dataset: &config.dataset,
        model: &config.model,
        train: &config.train,
        eval: &config.eval,
        master_seed: config.master_seed,
        method: &cell.method,
        seed: cell.seed,
        sweep: &cell.sweep,
    };
    let json = serde_json::to_string(&key).map_err(|e| Error::Contract(e.to_string()))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn execute_cell(config: &ExperimentConfig, cell: &Cell, opts: &RunOptions) -> Result<RunRow> {
    let fp = fingerprint(config, cell)?;
    let cell_path = opts
        .out_dir
        .as_ref()
        .map(|d| d.join("cells").join(format!("{}.json", cell.name())));
    if let Some(path) = &cell_path {
        if let Ok(text) = fs::read_to_string(path) {
            match serde_json::from_str::<CellFile>(&text) {
                Ok(file) if file.fingerprint == fp => {
                    log::info!("{}: reusing finished cell", cell.name());
                    return Ok(file.row);
                }
                _ => log::info!("{}: stale cell file, recomputing", cell.name()),
            }
        }
    }
    let sweep = cell.sweep.as_ref().map(|(p, v)| (p.as_str(), *v));
    let out = run_cell(config, &cell.method, cell.seed, sweep)?;
    if let Some(path) = &cell_path {
        // Model artefacts first: a cell file implies they exist.
        if opts.save_models {
            let dir = path
                .parent()
                .and_then(Path::parent)
                .expect("cell path has an out dir");
            let ckpt_dir = dir.join("checkpoints");
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            fusion::save_checkpoint(&out.model, &ckpt_dir.join(format!("{}.ckpt", cell.name())))?;
            write_atomic(
                &dir.join("logs").join(format!("{}.csv", cell.name())),
                &out.log.to_csv(out.model.num_modalities()),
            )?;
        }
        let file = CellFile {
            fingerprint: fp,
            row: out.row.clone(),
        };
        let json =
            serde_json::to_string_pretty(&file).map_err(|e| Error::Contract(e.to_string()))?;
        write_atomic(path, &json)?;
    }
    Ok(out.row)
}

fn run_cells(config: &ExperimentConfig, cells: Vec<Cell>, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    let num_modalities = match &config.dataset.path {
        Some(path) => datagen::load(path)?.num_modalities(),
        None => config.dataset.synthetic_spec(0).num_modalities(),
    };
    let work = |cell: &Cell| execute_cell(config, cell, opts);
    let results: Vec<Result<RunRow>> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Contract(e.to_string()))?;
        pool.install(|| cells.par_iter().map(work).collect())
    } else {
        cells.iter().map(work).collect()
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::error!("{}: {e}", cell.name());
                failures.push(CellFailure {
                    method: cell.method.kind_name().to_string(),
                    seed: cell.seed,
                    sweep_value: cell.sweep.as_ref().map(|s| s.1),
                    error: e.to_string(),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract(format!(
            "every cell failed; first error: {}",
            failures.first().map_or("none", |f| f.error.as_str())
        )));
    }
    let mut report = RunReport {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: VERSION.to_string(),
        config: config.clone(),
        num_modalities,
        aggregates: aggregate(&rows),
        rows,
        failures,
    };
    if config.sweep.is_some() {
        mark_balance_points(&mut report);
    }
    if let Some(dir) = &opts.out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Runs the configured method once per seed.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let method = config.method.spec()?;
    let cells = config
        .seeds
        .iter()
        .map(|&seed| Cell {
            method,
            seed,
            sweep: None,
        })
        .collect();
    let mut plain = config.clone();
    plain.sweep = None;
    run_cells(&plain, cells, opts)
}

/// Runs one experiment per swept value, all seeds each, and marks the balance points.
pub fn run_sweep(
    config: &ExperimentConfig,
    param: &str,
    values: &[f64],
    opts: &RunOptions,
) -> Result<RunReport> {
    let base = config.method.spec()?;
    if values.is_empty() {
        return Err(config_error(
            "sweep.values",
            "at least one value is required",
        ));
    }
    let mut config = config.clone();
    config.sweep = Some(SweepConfig {
        param: param.to_string(),
        values: values.to_vec(),
    });
    let mut cells = Vec::new();
    for &v in values {
        let method = sweep_spec(&base, param, v)?;
        for &seed in &config.seeds {
            cells.push(Cell {
                method,
                seed,
                sweep: Some((param.to_string(), v)),
            });
        }
    }
    run_cells(&config, cells, opts)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per (method, sweep value), in first-seen order.
pub fn aggregate(rows: &[RunRow]) -> Vec<RunRow> {
    let mut groups: Vec<(&RunRow, Vec<&RunRow>)> = Vec::new();
    for row in rows {
        let same = |r: &RunRow| {
            r.method == row.method
                && r.sweep_param == row.sweep_param
                && r.sweep_value.map(f64::to_bits) == row.sweep_value.map(f64::to_bits)
        };
        match groups.iter_mut().find(|(head, _)| same(head)) {
            Some((_, members)) => members.push(row),
            None => groups.push((row, vec![row])),
        }
    }
    let mut out = Vec::new();
    for (head, members) in groups {
        let stat = |f: &dyn Fn(&RunRow) -> f64| {
            mean_std(&members.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        let m = head.phi.len();
        let acc = stat(&|r| r.acc);
        let f1 = stat(&|r| r.macro_f1);
        let phi: Vec<(f64, f64)> = (0..m).map(|i| stat(&|r| r.phi[i])).collect();
        let imb = stat(&|r| r.imbalance);
        let flops = stat(&|r| r.flops_total);
        let epoch = stat(&|r| r.best_epoch);
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let g = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
            out.push(RunRow {
                method: head.method.clone(),
                seed: label.to_string(),
                sweep_param: head.sweep_param.clone(),
                sweep_value: head.sweep_value,
                acc: g(acc),
                macro_f1: g(f1),
                phi: phi.iter().map(|&p| g(p)).collect(),
                imbalance: g(imb),
                flops_total: g(flops),
                best_epoch: g(epoch),
                marker: String::new(),
            });
        }
    }
    out
}

fn add_marker(row: &mut RunRow, marker: &str) {
    if row.marker.is_empty() {
        row.marker = marker.to_string();
    } else {
        row.marker = format!("{};{marker}", row.marker);
    }
}

/// Within each seed, and among the mean rows, marks the lowest-imbalance row as
/// the absolute balance point and the most accurate row as the relative one.
/// Ties go to the earlier swept value.
pub fn mark_balance_points(report: &mut RunReport) {
    fn mark(rows: &mut [RunRow], idx: &[usize]) {
        let pick = |better: &dyn Fn(&RunRow, &RunRow) -> bool| {
            let mut best: Option<usize> = None;
            for &i in idx {
                if best.is_none_or(|b| better(&rows[i], &rows[b])) {
                    best = Some(i);
                }
            }
            best
        };
        let abs = pick(&|a, b| a.imbalance < b.imbalance);
        let rel = pick(&|a, b| a.acc > b.acc);
        if let Some(i) = abs {
            add_marker(&mut rows[i], ABSOLUTE_BALANCE);
        }
        if let Some(i) = rel {
            add_marker(&mut rows[i], RELATIVE_BALANCE);
        }
    }
    let mut by_seed: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, row) in report.rows.iter().enumerate() {
        by_seed.entry(row.seed.clone()).or_default().push(i);
    }
    for idx in by_seed.values() {
        mark(&mut report.rows, idx);
    }
    let means: Vec<usize> = (0..report.aggregates.len())
        .filter(|&i| report.aggregates[i].seed == "mean")
        .collect();
    mark(&mut report.aggregates, &means);
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Column names of the run CSV, in order.
pub fn csv_header(num_modalities: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "method",
        "seed",
        "sweep_param",
        "sweep_value",
        "acc",
        "macro_f1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..=num_modalities).map(|i| format!("phi_{i}")));
    cols.extend(
        ["imbalance", "flops_total", "best_epoch", "marker"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols
}

impl RunReport {
    /// Per-seed rows followed by aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut out = csv_header(self.num_modalities).join(",");
        out.push('\n');
        for row in self.rows.iter().chain(&self.aggregates) {
            let mut fields = vec![
                row.method.clone(),
                row.seed.clone(),
                row.sweep_param.clone().unwrap_or_default(),
                fmt_opt(row.sweep_value),
                row.acc.to_string(),
                row.macro_f1.to_string(),
            ];
            fields.extend(row.phi.iter().map(f64::to_string));
            fields.push(row.imbalance.to_string());
            fields.push(row.flops_total.to_string());
            fields.push(row.best_epoch.to_string());
            fields.push(row.marker.clone());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(e.line(), e.to_string()))
    }

    /// Mean rows, one per method (and swept value).
    pub fn means(&self) -> impl Iterator<Item = &RunRow> {
        self.aggregates.iter().filter(|r| r.seed == "mean")
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Writes `report.csv` and `summary.json`, and appends a timestamped line to `run.log`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("report.csv"), &report.to_csv())?;
    write_atomic(&dir.join("summary.json"), &report.to_json()?)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let line = format!(
        "{stamp} {} v{} rows={} failures={}\n",
        report.tool,
        report.version,
        report.rows.len(),
        report.failures.len()
    );
    let log_path = dir.join("run.log");
    let mut previous = fs::read_to_string(&log_path).unwrap_or_default();
    previous.push_str(&line);
    fs::write(&log_path, previous).map_err(|e| Error::io(&log_path, e))
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunReport::from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Best,
    Second,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub category: Category,
    /// acc, macro_f1, imbalance, flops_total
    pub values: [f64; 4],
    pub ranks: [Rank; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<TableRow>,
}

pub const TABLE_COLUMNS: [&str; 4] = ["ACC", "F1", "I", "FLOPs"];

fn category_of(method: &str) -> Result<Category> {
    Ok(MethodSpec::from_kind(method)?.category())
}

/// One row per method (and swept value), Baseline first and then by category;
/// the best and second-best values of each column are ranked, counting ties
/// as equal.
pub fn compare_table(reports: &[RunReport]) -> Result<CompareTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("compare_table needs at least one report".into()))?;
    for r in &reports[1..] {
        if r.config.dataset != first.config.dataset
            || r.config.master_seed != first.config.master_seed
        {
            return Err(Error::Contract(
                "reports were produced on different datasets".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    for report in reports {
        for mean in report.means() {
            let method = match (&mean.sweep_param, mean.sweep_value) {
                (Some(p), Some(v)) => format!(
                    "{}({}={})",
                    mean.method,
                    p.strip_prefix("method.").unwrap_or(p),
                    v
                ),
                _ => mean.method.clone(),
            };
            rows.push(TableRow {
                method,
                category: category_of(&mean.method)?,
                values: [mean.acc, mean.macro_f1, mean.imbalance, mean.flops_total],
                ranks: [Rank::Other; 4],
            });
        }
    }
    rows.sort_by_key(|r| r.category);
    for col in 0..4 {
        let higher_better = col < 2;
        let mut distinct: Vec<f64> = rows
            .iter()
            .map(|r| r.values[col])
            .filter(|v| !v.is_nan())
            .collect();
        distinct.sort_by(|a, b| {
            if higher_better {
                b.total_cmp(a)
            } else {
                a.total_cmp(b)
            }
        });
        distinct.dedup();
        for row in &mut rows {
            let v = row.values[col];
            row.ranks[col] = if distinct.first() == Some(&v) {
                Rank::Best
            } else if distinct.get(1) == Some(&v) {
                Rank::Second
            } else {
                Rank::Other
            };
        }
    }
    Ok(CompareTable { rows })
}

impl CompareTable {
    fn cell(value: f64, col: usize, rank: Rank) -> String {
        let v = if col == 3 {
            format!("{value:.4e}")
        } else {
            format!("{value:.4}")
        };
        match rank {
            Rank::Best => format!("{v}**"),
            Rank::Second => format!("{v}*"),
            Rank::Other => v,
        }
    }

    /// Aligned text; `**` marks the best and `*` the second-best value per column.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<Vec<String>> = vec![std::iter::once("Method".to_string())
            .chain(std::iter::once("Category".to_string()))
            .chain(TABLE_COLUMNS.iter().map(|s| s.to_string()))
            .collect()];
        for row in &self.rows {
            let mut line = vec![row.method.clone(), row.category.to_string()];
            line.extend((0..4).map(|c| Self::cell(row.values[c], c, row.ranks[c])));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| {
                lines
                    .iter()
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in &lines {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    if c < 2 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let rank = |r: Rank| match r {
            Rank::Best => "best",
            Rank::Second => "second",
            Rank::Other => "",
        };
        let mut out = String::from(
            "method,category,acc,acc_rank,macro_f1,macro_f1_rank,imbalance,imbalance_rank,flops_total,flops_total_rank\n",
        );
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.method, row.category);
            for c in 0..4 {
                let _ = write!(out, ",{},{}", row.values[c], rank(row.ranks[c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Writes the dataset a config describes (for `seed`) to `path`.
pub fn generate_dataset(config: &ExperimentConfig, seed: u64, path: &Path) -> Result<Dataset> {
    let (data, _) = prepare_data(config, seed)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    datagen::save(&data, path)?;
    Ok(data)
}

/// Test-split performance and Shapley contributions of a saved model.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    seed: u64,
    checkpoint: &Path,
) -> Result<(PerfReport, ShapleyReport)> {
    let model = fusion::load_checkpoint(checkpoint)?;
    let (data, splits) = prepare_data(config, seed)?;
    if model.arch().iter().map(|a| a[0]).collect::<Vec<_>>() != data.dims() {
        return Err(Error::Shape(
            "checkpoint input widths do not match the dataset".into(),
        ));
    }
    let m = model.num_modalities();
    let preds = masked_predictions(&model, &splits.test, &ModalityMask::full(m))?;
    let perf = perf_report(&preds, splits.test.labels(), data.num_classes())?;
    Ok((perf, shapley(&model, &splits.test)?))
}
