//! Spiral experiment suite: seeded cells, scans over depth, width,
//! rotation and train-set size, depth-truncation timing, and result
//! emission.
//!
//! Every cell is fully described by its [`CellConfig`] and one seed. The
//! train set, test set and weight initialization each draw from their own
//! stream derived from that seed, so re-running a record's
//! `(config, seed)` regenerates it exactly.
//!
//! # Record CSV schema
//!
//! One row per [`ExperimentRecord`], columns in [`RECORD_COLUMNS`] order:
//!
//! | column | meaning |
//! |---|---|
//! | `id` | cell identifier, `<scan>/<kind>/<parameter>=<value>/seed=<seed>` |
//! | `scan` | `single`, `depth`, `width`, `rotation` or `ntrain` |
//! | `kind` | `ldn` or `ddn` |
//! | `seed` | cell seed |
//! | `rotation_deg`, `sigma`, `radius`, `n_train`, `n_test` | data settings |
//! | `max_depth`, `width`, `gamma` | network and prior settings (`max_depth` is the block count for DDNs) |
//! | `diverged` | training diverged; metrics columns are empty |
//! | `d_opt_argmax`, `d_opt_p95`, `d_opt_expected` | pruning depth per heuristic |
//! | `iterations`, `best_iteration`, `best_objective` | training run summary |
//! | `pruned_ll`, `pruned_error`, `pruned_ece` | test metrics marginalizing over depths `0..=d_opt_argmax` |
//! | `full_ll`, `full_error`, `full_ece` | test metrics marginalizing over every depth |
//! | `train_seconds`, `pruned_forward_seconds`, `full_forward_seconds` | wall-clock timings |
//! | `alpha` | posterior probabilities `α_0..α_D`, `;`-separated, empty for DDNs |
//! | `failure` | divergence message, empty otherwise |
//!
//! The JSON form holds the same records plus per-depth test reports and
//! reliability bins.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_spirals_with_radius, standardize, Dataset, DEFAULT_SPIRAL_RADIUS};
use crate::error::{Error, Result};
use crate::inference::{prune, DepthPrior, Heuristic, DEFAULT_GAMMA};
use crate::metrics::{evaluate, EvalReport, DEFAULT_ECE_BINS};
use crate::model::NetworkConfig;
use crate::tensor::Tensor;
use crate::trainer::{train_ddn, train_ldn, ModelKind, TrainConfig, TrainedModel};

/// Baseline fixed-depth grid of the depth scan.
pub const DDN_GRID: [usize; 11] = [0, 1, 3, 5, 7, 9, 12, 15, 20, 30, 50];
pub const MIN_SPEEDUP_PASSES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub rotation_deg: f64,
    pub sigma: f64,
    pub radius: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 720.0,
            sigma: 0.15,
            radius: DEFAULT_SPIRAL_RADIUS,
            n_train: 200,
            n_test: 1800,
        }
    }
}

/// Everything needed to train and evaluate one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    pub data: DataConfig,
    pub max_depth: usize,
    pub width: usize,
    pub gamma: f64,
    pub train: TrainConfig,
    pub ece_bins: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            max_depth: 50,
            width: 20,
            gamma: DEFAULT_GAMMA,
            train: TrainConfig::default(),
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

impl CellConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            max_depth: self.max_depth,
            width: self.width,
            input_dim: 2,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.train.validate()?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Parameter(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        let d = &self.data;
        if d.n_train < 2 || !d.n_train.is_multiple_of(2) || d.n_test == 0 || !d.n_test.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "train size {} and test size {} must be even and positive",
                d.n_train, d.n_test
            )));
        }
        if self.ece_bins == 0 {
            return Err(Error::Parameter("ECE needs at least one bin".into()));
        }
        Ok(())
    }
}

/// A cell template plus the lists each scan sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub base: CellConfig,
    /// Repeat `r` uses cell seed `seed + r`.
    pub seed: u64,
    pub repeats: usize,
    pub workers: usize,
    pub depths: Vec<usize>,
    pub ddn_depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub rotations: Vec<f64>,
    pub n_trains: Vec<usize>,
    pub speedup_passes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base: CellConfig::default(),
            seed: 0,
            repeats: 4,
            workers: 1,
            depths: vec![20, 35, 50],
            ddn_depths: DDN_GRID.to_vec(),
            widths: vec![2, 20, 100],
            rotations: vec![0.0, 360.0, 540.0, 720.0, 900.0],
            n_trains: vec![50, 200, 1000],
            speedup_passes: MIN_SPEEDUP_PASSES,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.repeats == 0 || self.workers == 0 {
            return Err(Error::Parameter("repeats and workers must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scan {
    Single,
    Depth,
    Width,
    Rotation,
    Ntrain,
}

impl Scan {
    pub fn name(self) -> &'static str {
        match self {
            Scan::Single => "single",
            Scan::Depth => "depth",
            Scan::Width => "width",
            Scan::Rotation => "rotation",
            Scan::Ntrain => "ntrain",
        }
    }

    /// Name of the swept setting.
    pub fn parameter(self) -> &'static str {
        match self {
            Scan::Single | Scan::Depth => "max_depth",
            Scan::Width => "width",
            Scan::Rotation => "rotation_deg",
            Scan::Ntrain => "n_train",
        }
    }

    fn value(self, config: &CellConfig) -> f64 {
        match self {
            Scan::Single | Scan::Depth => config.max_depth as f64,
            Scan::Width => config.width as f64,
            Scan::Rotation => config.data.rotation_deg,
            Scan::Ntrain => config.data.n_train as f64,
        }
    }
}

fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Ldn => "ldn",
        ModelKind::Ddn => "ddn",
    }
}

/// Seeds of the three independent random streams of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub train_data: u64,
    pub test_data: u64,
    pub init: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives distinct stream seeds from one cell seed.
pub fn derive_seeds(seed: u64) -> CellSeeds {
    let base = splitmix64(seed);
    CellSeeds {
        train_data: splitmix64(base ^ 1),
        test_data: splitmix64(base ^ 2),
        init: splitmix64(base ^ 3),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub scan: Scan,
    pub kind: ModelKind,
    pub config: CellConfig,
    pub seed: u64,
}

impl Cell {
    pub fn new(scan: Scan, kind: ModelKind, config: CellConfig, seed: u64) -> Self {
        let value = scan.value(&config);
        let id = format!(
            "{}/{}/{}={}/seed={}",
            scan.name(),
            kind_name(kind),
            scan.parameter(),
            value,
            seed
        );
        Self {
            id,
            scan,
            kind,
            config,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthChoice {
    pub argmax: usize,
    pub p95: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub pruned_forward_seconds: f64,
    pub full_forward_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub scan: Scan,
    #[serde(flatten)]
    pub kind: ModelKind,
    pub config: CellConfig,
    pub seed: u64,
    pub seeds: CellSeeds,
    pub diverged: bool,
    /// Divergence message when `diverged`.
    pub failure: Option<String>,
    /// Empty for DDNs.
    pub alpha: Vec<f64>,
    pub d_opt: Option<DepthChoice>,
    pub pruned: Option<EvalReport>,
    pub full: Option<EvalReport>,
    /// Test report of every single depth `0..=D`; empty for DDNs.
    pub per_depth: Vec<EvalReport>,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_objective: Option<f64>,
    pub timings: Timings,
}

/// A finished cell with the model and the standardized test set it was
/// scored on. Diverged cells carry neither.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub record: ExperimentRecord,
    pub model: Option<TrainedModel>,
    pub test: Option<Dataset>,
}

fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::Divergence { .. } | Error::ActivationDivergence(_) | Error::Numeric(_) | Error::DegenerateBatch(_)
    )
}

/// Generates and standardizes the train and test sets of a cell.
pub fn cell_datasets(config: &CellConfig, seeds: &CellSeeds) -> Result<(Dataset, Dataset)> {
    let d = &config.data;
    let train = gen_spirals_with_radius(d.n_train, d.rotation_deg, d.sigma, d.radius, seeds.train_data)?;
    let test = gen_spirals_with_radius(d.n_test, d.rotation_deg, d.sigma, d.radius, seeds.test_data)?;
    let (train, mut others, _) = standardize(&train, &[test])?;
    Ok((train, others.remove(0)))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let out = f()?;
    Ok((out, t.elapsed().as_secs_f64()))
}

/// Trains and scores one cell. Divergence yields a flagged record; invalid
/// configurations are errors.
pub fn run_cell(cell: &Cell) -> Result<CellOutcome> {
    cell.config.validate()?;
    let seeds = derive_seeds(cell.seed);
    let (train, test) = cell_datasets(&cell.config, &seeds)?;
    let train_config = TrainConfig {
        seed: seeds.init,
        ..cell.config.train.clone()
    };
    let net = cell.config.network();
    let start = Instant::now();
    let trained = match cell.kind {
        ModelKind::Ldn => {
            let prior = DepthPrior::new(cell.config.max_depth, cell.config.gamma)?;
            train_ldn(&train, net, &prior, &train_config)
        }
        ModelKind::Ddn => train_ddn(&train, cell.config.max_depth, net, &train_config),
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let mut record = ExperimentRecord {
        id: cell.id.clone(),
        scan: cell.scan,
        kind: cell.kind,
        config: cell.config.clone(),
        seed: cell.seed,
        seeds,
        diverged: false,
        failure: None,
        alpha: Vec::new(),
        d_opt: None,
        pruned: None,
        full: None,
        per_depth: Vec::new(),
        iterations: 0,
        best_iteration: 0,
        best_objective: None,
        timings: Timings {
            train_seconds,
            ..Timings::default()
        },
    };
    let model = match trained {
        Ok(m) => m,
        Err(e) if is_divergence(&e) => {
            record.diverged = true;
            record.failure = Some(e.to_string());
            if let Error::Divergence { iteration, .. } = e {
                record.iterations = iteration;
            }
            return Ok(CellOutcome {
                record,
                model: None,
                test: None,
            });
        }
        Err(e) => return Err(e),
    };

    match score(&model, &test, &mut record) {
        Ok(()) => Ok(CellOutcome {
            record,
            model: Some(model),
            test: Some(test),
        }),
        Err(e) if is_divergence(&e) => {
            record.diverged = true;
            record.failure = Some(e.to_string());
            Ok(CellOutcome {
                record,
                model: None,
                test: None,
            })
        }
        Err(e) => Err(e),
    }
}

fn score(model: &TrainedModel, test: &Dataset, record: &mut ExperimentRecord) -> Result<()> {
    let bins = record.config.ece_bins;
    record.iterations = model.history.iterations;
    record.best_iteration = model.history.best_iteration;
    record.best_objective = Some(model.history.best_objective);
    let choice = match &model.posterior {
        Some(post) => {
            record.alpha = post.probs().to_vec();
            let d = |h| prune(post.probs(), h).d_opt;
            DepthChoice {
                argmax: d(Heuristic::Argmax),
                p95: d(Heuristic::P95),
                expected: d(Heuristic::Expected),
            }
        }
        None => {
            let d = model.network.max_depth();
            DepthChoice {
                argmax: d,
                p95: d,
                expected: d,
            }
        }
    };
    record.d_opt = Some(choice);
    let (pruned, pruned_s) = timed(|| model.predict(&test.inputs, Some(choice.argmax)))?;
    let (full, full_s) = timed(|| model.predict(&test.inputs, None))?;
    record.timings.pruned_forward_seconds = pruned_s;
    record.timings.full_forward_seconds = full_s;
    record.pruned = Some(evaluate(&pruned, &test.labels, bins)?);
    record.full = Some(evaluate(&full, &test.labels, bins)?);
    if model.posterior.is_some() {
        record.per_depth = model
            .predict_per_depth(&test.inputs)?
            .iter()
            .map(|p| evaluate(p, &test.labels, bins))
            .collect::<Result<_>>()?;
    }
    Ok(())
}

/// Runs cells on a pool of `workers` threads; outcomes keep cell order.
pub fn run_cells(cells: &[Cell], workers: usize) -> Result<Vec<CellOutcome>> {
    if workers == 0 {
        return Err(Error::Parameter("workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run_cell).collect())
}

fn records(outcomes: Vec<CellOutcome>) -> Vec<ExperimentRecord> {
    outcomes.into_iter().map(|o| o.record).collect()
}

pub fn depth_scan_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for seed in config.seeds() {
        for &d in &config.depths {
            let c = CellConfig {
                max_depth: d,
                ..config.base.clone()
            };
            cells.push(Cell::new(Scan::Depth, ModelKind::Ldn, c, seed));
        }
        for &d in &config.ddn_depths {
            let c = CellConfig {
                max_depth: d,
                ..config.base.clone()
            };
            cells.push(Cell::new(Scan::Depth, ModelKind::Ddn, c, seed));
        }
    }
    cells
}

pub fn width_scan_cells(config: &ExperimentConfig) -> Vec<Cell> {
    config
        .seeds()
        .flat_map(|seed| {
            config.widths.iter().map(move |&w| {
                let c = CellConfig {
                    width: w,
                    ..config.base.clone()
                };
                Cell::new(Scan::Width, ModelKind::Ldn, c, seed)
            })
        })
        .collect()
}

pub fn rotation_scan_cells(config: &ExperimentConfig) -> Vec<Cell> {
    config
        .seeds()
        .flat_map(|seed| {
            config.rotations.iter().map(move |&r| {
                let mut c = config.base.clone();
                c.data.rotation_deg = r;
                Cell::new(Scan::Rotation, ModelKind::Ldn, c, seed)
            })
        })
        .collect()
}

pub fn ntrain_scan_cells(config: &ExperimentConfig) -> Vec<Cell> {
    config
        .seeds()
        .flat_map(|seed| {
            config.n_trains.iter().map(move |&n| {
                let mut c = config.base.clone();
                c.data.n_train = n;
                Cell::new(Scan::Ntrain, ModelKind::Ldn, c, seed)
            })
        })
        .collect()
}

/// LDNs at each of `config.depths` and DDNs over `config.ddn_depths`.
pub fn run_depth_scan(config: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    Ok(records(run_cells(&depth_scan_cells(config), config.workers)?))
}

pub fn run_width_scan(config: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    Ok(records(run_cells(&width_scan_cells(config), config.workers)?))
}

pub fn run_rotation_scan(config: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    Ok(records(run_cells(&rotation_scan_cells(config), config.workers)?))
}

pub fn run_ntrain_scan(config: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    Ok(records(run_cells(&ntrain_scan_cells(config), config.workers)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRecord {
    pub max_depth: usize,
    pub d_opt: usize,
    pub batch_rows: usize,
    pub passes: usize,
    pub truncated_median_seconds: f64,
    pub full_median_seconds: f64,
    /// `1 − truncated / full`.
    pub speedup: f64,
    pub timer_resolution_seconds: f64,
    pub warning: Option<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Smallest positive step of the monotonic clock seen over a short probe.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median eval-mode prediction time of the network cut at `d_opt` against
/// the full network, alternating the two over `passes` rounds after a
/// short warm-up.
pub fn measure_speedup(model: &TrainedModel, d_opt: usize, x: &Tensor, passes: usize) -> Result<SpeedupRecord> {
    if passes < MIN_SPEEDUP_PASSES {
        return Err(Error::Parameter(format!(
            "{passes} timing passes, need at least {MIN_SPEEDUP_PASSES}"
        )));
    }
    let max_depth = model.network.max_depth();
    if d_opt > max_depth {
        return Err(Error::Range {
            what: "cutoff depth",
            value: d_opt,
            max: max_depth,
        });
    }
    for _ in 0..5 {
        model.predict(x, Some(d_opt))?;
        model.predict(x, None)?;
    }
    let mut truncated = Vec::with_capacity(passes);
    let mut full = Vec::with_capacity(passes);
    for _ in 0..passes {
        let (_, t) = timed(|| model.predict(x, Some(d_opt)))?;
        truncated.push(t);
        let (_, t) = timed(|| model.predict(x, None))?;
        full.push(t);
    }
    let truncated = median(truncated);
    let full = median(full);
    let resolution = timer_resolution().as_secs_f64();
    let warning = (resolution > 0.01 * truncated.min(full)).then(|| {
        format!(
            "timer resolution {resolution:.3e}s exceeds 1% of the measured {:.3e}s",
            truncated.min(full)
        )
    });
    Ok(SpeedupRecord {
        max_depth,
        d_opt,
        batch_rows: x.rows(),
        passes,
        truncated_median_seconds: truncated,
        full_median_seconds: full,
        speedup: 1.0 - truncated / full,
        timer_resolution_seconds: resolution,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Input(format!("unknown format {other:?}, expected csv or json"))),
        }
    }
}

pub const RECORD_COLUMNS: [&str; 30] = [
    "id",
    "scan",
    "kind",
    "seed",
    "rotation_deg",
    "sigma",
    "radius",
    "n_train",
    "n_test",
    "max_depth",
    "width",
    "gamma",
    "diverged",
    "d_opt_argmax",
    "d_opt_p95",
    "d_opt_expected",
    "iterations",
    "best_iteration",
    "best_objective",
    "pruned_ll",
    "pruned_error",
    "pruned_ece",
    "full_ll",
    "full_error",
    "full_ece",
    "train_seconds",
    "pruned_forward_seconds",
    "full_forward_seconds",
    "alpha",
    "failure",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn record_row(r: &ExperimentRecord) -> Vec<String> {
    let c = &r.config;
    let report = |e: &Option<EvalReport>| {
        (
            opt(e.as_ref().map(|e| e.log_likelihood)),
            opt(e.as_ref().map(|e| e.error)),
            opt(e.as_ref().map(|e| e.ece)),
        )
    };
    let (pl, pe, pc) = report(&r.pruned);
    let (fl, fe, fc) = report(&r.full);
    vec![
        r.id.clone(),
        r.scan.name().to_string(),
        kind_name(r.kind).to_string(),
        r.seed.to_string(),
        c.data.rotation_deg.to_string(),
        c.data.sigma.to_string(),
        c.data.radius.to_string(),
        c.data.n_train.to_string(),
        c.data.n_test.to_string(),
        c.max_depth.to_string(),
        c.width.to_string(),
        c.gamma.to_string(),
        r.diverged.to_string(),
        opt(r.d_opt.map(|d| d.argmax)),
        opt(r.d_opt.map(|d| d.p95)),
        opt(r.d_opt.map(|d| d.expected)),
        r.iterations.to_string(),
        r.best_iteration.to_string(),
        opt(r.best_objective),
        pl,
        pe,
        pc,
        fl,
        fe,
        fc,
        r.timings.train_seconds.to_string(),
        r.timings.pruned_forward_seconds.to_string(),
        r.timings.full_forward_seconds.to_string(),
        r.alpha.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
        r.failure.clone().unwrap_or_default(),
    ]
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}

fn write_csv<W: Write>(out: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Writes one CSV row or JSON object per record.
pub fn emit_results(records: &[ExperimentRecord], path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => write_json(&records, path),
        Format::Csv => write_csv(
            BufWriter::new(File::create(path)?),
            &RECORD_COLUMNS,
            records.iter().map(record_row),
        ),
    }
}

pub fn load_records_json(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

/// Seed aggregate of one `(scan, kind, swept value)` group. Diverged runs
/// are left out and counted in `excluded`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scan: Scan,
    #[serde(flatten)]
    pub kind: ModelKind,
    pub parameter: String,
    pub value: f64,
    pub runs: usize,
    pub excluded: usize,
    pub d_opt_argmax: Option<MeanStd>,
    pub pruned_ll: Option<MeanStd>,
    pub pruned_error: Option<MeanStd>,
    pub full_ll: Option<MeanStd>,
    pub full_error: Option<MeanStd>,
}

pub fn summarize(records: &[ExperimentRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(Scan, ModelKind, u64)> = Vec::new();
    let mut groups: HashMap<(Scan, ModelKind, u64), Vec<&ExperimentRecord>> = HashMap::new();
    for r in records {
        let key = (r.scan, r.kind, r.scan.value(&r.config).to_bits());
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let ok: Vec<&ExperimentRecord> = group.iter().copied().filter(|r| !r.diverged).collect();
            let stat = |f: &dyn Fn(&ExperimentRecord) -> Option<f64>| {
                MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                scan: key.0,
                kind: key.1,
                parameter: key.0.parameter().to_string(),
                value: f64::from_bits(key.2),
                runs: ok.len(),
                excluded: group.len() - ok.len(),
                d_opt_argmax: stat(&|r| r.d_opt.map(|d| d.argmax as f64)),
                pruned_ll: stat(&|r| r.pruned.as_ref().map(|e| e.log_likelihood)),
                pruned_error: stat(&|r| r.pruned.as_ref().map(|e| e.error)),
                full_ll: stat(&|r| r.full.as_ref().map(|e| e.log_likelihood)),
                full_error: stat(&|r| r.full.as_ref().map(|e| e.error)),
            }
        })
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 17] = [
    "scan",
    "kind",
    "parameter",
    "value",
    "runs",
    "excluded",
    "d_opt_argmax_mean",
    "d_opt_argmax_std",
    "pruned_ll_mean",
    "pruned_ll_std",
    "pruned_error_mean",
    "pruned_error_std",
    "full_ll_mean",
    "full_ll_std",
    "full_error_mean",
    "full_error_std",
    "label",
];

fn summary_row(s: &SummaryRow) -> Vec<String> {
    let mut row = vec![
        s.scan.name().to_string(),
        kind_name(s.kind).to_string(),
        s.parameter.clone(),
        s.value.to_string(),
        s.runs.to_string(),
        s.excluded.to_string(),
    ];
    for m in [s.d_opt_argmax, s.pruned_ll, s.pruned_error, s.full_ll, s.full_error] {
        row.push(opt(m.map(|m| m.mean)));
        row.push(opt(m.map(|m| m.std)));
    }
    row.push(format!("{} {} {}={}", s.scan.name(), kind_name(s.kind), s.parameter, s.value));
    row
}

pub fn emit_summary(rows: &[SummaryRow], path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => write_json(&rows, path),
        Format::Csv => write_csv(
            BufWriter::new(File::create(path)?),
            &SUMMARY_COLUMNS,
            rows.iter().map(summary_row),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CellConfig {
        CellConfig {
            data: DataConfig {
                n_train: 40,
                n_test: 40,
                ..DataConfig::default()
            },
            max_depth: 3,
            width: 4,
            train: TrainConfig {
                max_iterations: 15,
                patience: 5,
                ..TrainConfig::default()
            },
            ..CellConfig::default()
        }
    }

    #[test]
    fn seeds_are_distinct_streams() {
        for seed in 0..50 {
            let s = derive_seeds(seed);
            assert_ne!(s.train_data, s.test_data);
            assert_ne!(s.train_data, s.init);
            assert_ne!(s.test_data, s.init);
            assert_eq!(s, derive_seeds(seed));
        }
        assert_ne!(derive_seeds(0), derive_seeds(1));
    }

    #[test]
    fn cell_ids_name_the_swept_value() {
        let c = Cell::new(Scan::Width, ModelKind::Ldn, tiny(), 7);
        assert_eq!(c.id, "width/ldn/width=4/seed=7");
    }

    #[test]
    fn run_cell_is_deterministic() {
        let cell = Cell::new(Scan::Single, ModelKind::Ldn, tiny(), 3);
        let a = run_cell(&cell).unwrap().record;
        let b = run_cell(&cell).unwrap().record;
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.pruned, b.pruned);
        assert_eq!(a.per_depth.len(), 4);
        assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a.config, tiny());
    }

    #[test]
    fn ddn_record_uses_its_depth() {
        let cell = Cell::new(Scan::Depth, ModelKind::Ddn, tiny(), 0);
        let r = run_cell(&cell).unwrap().record;
        assert_eq!(r.d_opt.unwrap().argmax, 3);
        assert!(r.alpha.is_empty());
        assert_eq!(r.pruned, r.full);
    }

    #[test]
    fn invalid_config_is_fatal() {
        let mut c = tiny();
        c.data.n_train = 3;
        assert!(run_cell(&Cell::new(Scan::Single, ModelKind::Ldn, c, 0)).is_err());
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let mut c = tiny();
        c.train.learning_rate = 1e300;
        let r = run_cell(&Cell::new(Scan::Single, ModelKind::Ldn, c, 0)).unwrap().record;
        assert!(r.diverged);
        assert!(r.failure.is_some());
        assert!(r.pruned.is_none());
    }

    #[test]
    fn scan_cell_counts() {
        let cfg = ExperimentConfig {
            repeats: 2,
            ..ExperimentConfig::default()
        };
        assert_eq!(depth_scan_cells(&cfg).len(), 2 * (3 + DDN_GRID.len()));
        assert_eq!(width_scan_cells(&cfg).len(), 6);
        assert_eq!(rotation_scan_cells(&cfg).len(), 10);
        assert_eq!(ntrain_scan_cells(&cfg).len(), 6);
    }

    #[test]
    fn mean_std_sample_convention() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[5.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert_eq!("json".parse::<Format>().unwrap(), Format::Json);
        assert!("xml".parse::<Format>().is_err());
    }

    #[test]
    fn config_json_defaults_fill_gaps() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"repeats": 2, "base": {"width": 8}}"#).unwrap();
        assert_eq!(cfg.repeats, 2);
        assert_eq!(cfg.base.width, 8);
        assert_eq!(cfg.base.max_depth, 50);
        assert_eq!(cfg.ddn_depths, DDN_GRID.to_vec());
    }
}
