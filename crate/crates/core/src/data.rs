//! Two-arm spiral datasets, standardization, and on-disk formats.
//!
//! Datasets are stored as CSV (`x1,x2,label`, 17 significant digits) with a
//! JSON sidecar holding the generator metadata. Checkpoints are a single
//! JSON document whose arrays are base64-encoded little-endian `f64`s, each
//! carrying its shape and a SHA-256 digest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{DepthPosterior, DepthPrior};
use crate::model::{LdnNetwork, Linear, NetworkConfig, ResidualBlock};
use crate::ops::BatchNormState;
use crate::tensor::Tensor;
use crate::trainer::{ModelKind, TrainConfig, TrainHistory, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, inputs: &Tensor) -> Tensor {
        let c = inputs.cols();
        let mut out = inputs.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rotation_deg: f64,
    pub sigma: f64,
    /// Noiseless radius at `t = 1`.
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub n: usize,
    pub seed: u64,
    pub standardization: Option<Standardization>,
}

impl DatasetMeta {
    /// True when both describe the same generator draw.
    pub fn same_source(&self, other: &DatasetMeta) -> bool {
        self.rotation_deg == other.rotation_deg
            && self.sigma == other.sigma
            && self.radius == other.radius
            && self.n == other.n
            && self.seed == other.seed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × 2` points.
    pub inputs: Tensor,
    /// Spiral arm of each point, 0 or 1.
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                detail: format!("{:?} inputs for {} labels", inputs.shape(), labels.len()),
            });
        }
        Ok(Self {
            inputs,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Outer radius of the generated spirals.
///
/// With a unit radius and `sigma = 0.15` the arms of a 720° spiral sit
/// closer together than the noise scale and even a Bayes-optimal classifier
/// is barely above chance, so the default spreads them out.
pub const DEFAULT_SPIRAL_RADIUS: f64 = 4.0;

fn default_radius() -> f64 {
    DEFAULT_SPIRAL_RADIUS
}

/// Samples `n` points, alternating arms, from two interleaved spirals with
/// the default outer radius.
pub fn gen_spirals(n: usize, rotation_deg: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    gen_spirals_with_radius(n, rotation_deg, sigma, DEFAULT_SPIRAL_RADIUS, seed)
}

/// For arm `c` each point draws `t ~ U(0, 1)`, sets
/// `φ = t · rotation + c·π` and emits `radius · t (sin φ, cos φ)` plus
/// isotropic Gaussian noise of standard deviation `sigma`.
pub fn gen_spirals_with_radius(
    n: usize,
    rotation_deg: f64,
    sigma: f64,
    radius: f64,
    seed: u64,
) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::Input(format!("spiral sample count {n} must be even")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() || !rotation_deg.is_finite() {
        return Err(Error::Input(format!(
            "noise {sigma} and rotation {rotation_deg} must be finite, noise non-negative"
        )));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Input(format!("spiral radius {radius} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let rotation = rotation_deg.to_radians();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let arm = k % 2;
        let t: f64 = unit.sample(&mut rng);
        let phi = t * rotation + arm as f64 * PI;
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        data.push(radius * t * phi.sin() + sigma * nx);
        data.push(radius * t * phi.cos() + sigma * ny);
        labels.push(arm);
    }
    Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        labels,
        DatasetMeta {
            rotation_deg,
            sigma,
            radius,
            n,
            seed,
            standardization: None,
        },
    )
}

/// Standardizes every coordinate with the train set's mean and population
/// standard deviation, applying the same map to `others`.
pub fn standardize(train: &Dataset, others: &[Dataset]) -> Result<(Dataset, Vec<Dataset>, Standardization)> {
    if train.is_empty() {
        return Err(Error::Input("cannot standardize an empty train set".into()));
    }
    let (n, c) = (train.inputs.rows(), train.inputs.cols());
    let mut mean = vec![0.0; c];
    for row in train.inputs.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in train.inputs.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
    if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateData(format!("coordinate {j} has zero variance")));
    }
    let constants = Standardization { mean, std };
    let map = |d: &Dataset| -> Dataset {
        let mut meta = d.meta.clone();
        meta.standardization = Some(constants.clone());
        Dataset {
            inputs: constants.apply(&d.inputs),
            labels: d.labels.clone(),
            meta,
        }
    };
    Ok((map(train), others.iter().map(map).collect(), constants))
}

/// Sidecar path for a dataset CSV: `foo.csv` → `foo.meta.json`.
pub fn metadata_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["x1", "x2", "label"]).map_err(csv_io)?;
    for (i, &label) in dataset.labels.iter().enumerate() {
        let row = dataset.inputs.row(i);
        w.write_record([
            format!("{:.16e}", row[0]),
            format!("{:.16e}", row[1]),
            label.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    fs::write(metadata_path(path), serde_json::to_string_pretty(&dataset.meta)?)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io)?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["x1", "x2", "label"] {
        return Err(parse_err(1, format!("expected header x1,x2,label, got {headers:?}")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != 3 {
            return Err(parse_err(line, format!("{} fields, expected 3", record.len())));
        }
        for field in [&record[0], &record[1]] {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad coordinate {field:?}")))?;
            data.push(v);
        }
        let label: usize = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[2])))?;
        labels.push(label);
    }
    let meta_path = metadata_path(path);
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.n != labels.len() {
        return Err(Error::Parse {
            path: meta_path,
            line: 1,
            detail: format!("metadata says {} rows, CSV has {}", meta.n, labels.len()),
        });
    }
    Dataset::new(Tensor::new(vec![labels.len(), 2], data)?, labels, meta)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    /// Base64 of little-endian `f64` values.
    pub data: String,
    /// Hex SHA-256 of the raw bytes.
    pub sha256: String,
}

impl EncodedArray {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(&bytes),
            sha256: hex_digest(&bytes),
        }
    }

    pub fn decode(&self, name: &str) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        let expected: usize = self.shape.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!(
                "{name}: {} bytes for shape {:?}",
                bytes.len(),
                self.shape
            )));
        }
        if hex_digest(&bytes) != self.sha256 {
            return Err(Error::Corrupt(format!("{name}: checksum mismatch")));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(self.shape.clone(), values)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockArrays {
    pub weight: EncodedArray,
    pub bias: EncodedArray,
    pub bn_scale: EncodedArray,
    pub bn_shift: EncodedArray,
    pub running_mean: EncodedArray,
    pub running_var: EncodedArray,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub gamma: f64,
    pub max_depth: usize,
}

/// On-disk form of a trained network and its depth posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub network: NetworkConfig,
    pub input_weight: EncodedArray,
    pub input_bias: EncodedArray,
    pub blocks: Vec<BlockArrays>,
    pub output_weight: EncodedArray,
    pub output_bias: EncodedArray,
    pub posterior_logits: Option<EncodedArray>,
    pub prior: Option<PriorSpec>,
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    /// Training summary without the per-evaluation records.
    #[serde(default)]
    pub history: Option<TrainHistory>,
}

impl Checkpoint {
    pub fn from_parts(
        kind: ModelKind,
        net: &LdnNetwork,
        posterior: Option<&DepthPosterior>,
        prior: Option<&DepthPrior>,
        standardization: Option<&Standardization>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind,
            network: *net.config(),
            input_weight: EncodedArray::encode(&net.input.weight),
            input_bias: EncodedArray::encode(&net.input.bias),
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockArrays {
                    weight: EncodedArray::encode(&b.linear.weight),
                    bias: EncodedArray::encode(&b.linear.bias),
                    bn_scale: EncodedArray::encode(&b.bn_scale),
                    bn_shift: EncodedArray::encode(&b.bn_shift),
                    running_mean: EncodedArray::encode(&b.bn_state.running_mean),
                    running_var: EncodedArray::encode(&b.bn_state.running_var),
                    bn_momentum: b.bn_state.momentum,
                    bn_eps: b.bn_state.eps,
                })
                .collect(),
            output_weight: EncodedArray::encode(&net.output.weight),
            output_bias: EncodedArray::encode(&net.output.bias),
            posterior_logits: posterior.map(|p| EncodedArray::encode(&Tensor::vector(p.logits().to_vec()))),
            prior: prior.map(|p| PriorSpec {
                gamma: p.gamma(),
                max_depth: p.max_depth(),
            }),
            standardization: standardization.cloned(),
            train_config: None,
            history: None,
        }
    }

    pub fn from_model(model: &TrainedModel, standardization: Option<&Standardization>) -> Self {
        let mut ckpt = Self::from_parts(
            model.kind,
            &model.network,
            model.posterior.as_ref(),
            model.prior.as_ref(),
            standardization,
        );
        ckpt.train_config = Some(model.config.clone());
        ckpt.history = Some(TrainHistory {
            records: Vec::new(),
            ..model.history.clone()
        });
        ckpt
    }

    pub fn model(&self) -> Result<TrainedModel> {
        let posterior = self.posterior()?;
        if (self.kind == ModelKind::Ldn) != posterior.is_some() {
            return Err(Error::Corrupt(format!(
                "{:?} checkpoint {} posterior logits",
                self.kind,
                if posterior.is_some() { "with" } else { "without" }
            )));
        }
        Ok(TrainedModel {
            kind: self.kind,
            network: self.network()?,
            posterior,
            prior: self.prior()?,
            history: self.history.clone().unwrap_or_default(),
            config: self.train_config.clone().unwrap_or_default(),
        })
    }

    pub fn network(&self) -> Result<LdnNetwork> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let name = |f: &str| format!("block {i} {f}");
                Ok(ResidualBlock {
                    linear: Linear {
                        weight: b.weight.decode(&name("weight"))?,
                        bias: b.bias.decode(&name("bias"))?,
                    },
                    bn_scale: b.bn_scale.decode(&name("bn scale"))?,
                    bn_shift: b.bn_shift.decode(&name("bn shift"))?,
                    bn_state: BatchNormState {
                        running_mean: b.running_mean.decode(&name("running mean"))?,
                        running_var: b.running_var.decode(&name("running var"))?,
                        momentum: b.bn_momentum,
                        eps: b.bn_eps,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LdnNetwork::from_parts(
            self.network,
            Linear {
                weight: self.input_weight.decode("input weight")?,
                bias: self.input_bias.decode("input bias")?,
            },
            blocks,
            Linear {
                weight: self.output_weight.decode("output weight")?,
                bias: self.output_bias.decode("output bias")?,
            },
        )
    }

    pub fn posterior(&self) -> Result<Option<DepthPosterior>> {
        self.posterior_logits
            .as_ref()
            .map(|a| DepthPosterior::from_logits(a.decode("posterior logits")?.into_data()))
            .transpose()
    }

    pub fn prior(&self) -> Result<Option<DepthPrior>> {
        self.prior
            .as_ref()
            .map(|p| DepthPrior::new(p.max_depth, p.gamma))
            .transpose()
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(checkpoint)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        detail: e.to_string(),
    })?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt("missing version field".into()))? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    // decode everything once so corruption surfaces at load time
    ckpt.network()?;
    ckpt.posterior()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_count_rejected() {
        assert!(matches!(gen_spirals(5, 720.0, 0.1, 0), Err(Error::Input(_))));
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let a = gen_spirals(200, 720.0, 0.15, 3).unwrap();
        assert_eq!(a, gen_spirals(200, 720.0, 0.15, 3).unwrap());
        assert_ne!(a.inputs, gen_spirals(200, 720.0, 0.15, 4).unwrap().inputs);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 100);
    }

    #[test]
    fn zero_rotation_lies_on_two_rays() {
        let d = gen_spirals(100, 0.0, 0.0, 1).unwrap();
        for (i, &label) in d.labels.iter().enumerate() {
            let p = d.inputs.row(i);
            assert!(p[0].abs() < 1e-12, "{p:?}");
            if label == 0 {
                assert!(p[1] >= 0.0);
            } else {
                assert!(p[1] <= 0.0);
            }
        }
    }

    #[test]
    fn noiseless_radius_is_parameter() {
        let d = gen_spirals_with_radius(400, 720.0, 0.0, 1.0, 2).unwrap();
        for i in 0..d.len() {
            let p = d.inputs.row(i);
            let r = p[0].hypot(p[1]);
            assert!(r <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn standardize_hand_column() {
        let meta = DatasetMeta {
            rotation_deg: 0.0,
            sigma: 0.0,
            radius: 1.0,
            n: 2,
            seed: 0,
            standardization: None,
        };
        let train = Dataset::new(
            Tensor::from_rows(&[[0.0, 5.0], [2.0, 7.0]]).unwrap(),
            vec![0, 1],
            meta.clone(),
        )
        .unwrap();
        let other = Dataset::new(Tensor::from_rows(&[[4.0, 6.0]]).unwrap(), vec![0], meta).unwrap();
        let (t, o, c) = standardize(&train, &[other]).unwrap();
        assert_eq!(t.inputs.data(), &[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(o[0].inputs.data(), &[3.0, 0.0]);
        assert_eq!(c.mean, vec![1.0, 6.0]);
        assert_eq!(t.meta.standardization, Some(c));
    }

    #[test]
    fn standardize_rejects_constant_coordinate() {
        let meta = DatasetMeta {
            rotation_deg: 0.0,
            sigma: 0.0,
            radius: 1.0,
            n: 2,
            seed: 0,
            standardization: None,
        };
        let train =
            Dataset::new(Tensor::from_rows(&[[1.0, 0.0], [1.0, 2.0]]).unwrap(), vec![0, 1], meta).unwrap();
        assert!(matches!(standardize(&train, &[]), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn metadata_path_replaces_extension() {
        assert_eq!(metadata_path(Path::new("/a/train.csv")), PathBuf::from("/a/train.meta.json"));
    }
}
