//! Synthetic multi-modal datasets and their on-disk format.
//!
//! A dataset file is one JSON header line followed by the raw payload of
//! each modality in header order: `rows × dim` little-endian `f64`, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{Likelihood, Modality, ModalitySet};
use crate::net::Batch;
use crate::oracles::{LinearEmission, LinearGaussianModel, OracleError};
use crate::rng::{default_seed, RngStream};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "m2vae-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// Per-modality noise: emission variance (linear) or flip probability (bits).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// `z ~ N(0, I)`, `x_m = W_m z + b_m + noise`, random `W_m`, `b_m`.
    SharedLatentLinear {
        latent_dim: usize,
        #[serde(default = "one")]
        weight_scale: f64,
        #[serde(default = "default_noise_var")]
        noise_var: f64,
    },
    /// A uniformly drawn cluster picks one random binary prototype per
    /// modality; each bit is then flipped with probability `flip_prob`.
    ClusterBits {
        clusters: usize,
        #[serde(default = "default_flip")]
        flip_prob: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn default_noise_var() -> f64 {
    0.1
}
fn default_flip() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub modalities: Vec<ModalitySpec>,
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn shared_latent_linear(dims: &[(&str, usize)], latent_dim: usize, noise_var: f64, samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            generator: Generator::SharedLatentLinear { latent_dim, weight_scale: 1.0, noise_var },
            modalities: dims.iter().map(|&(n, d)| ModalitySpec { name: n.into(), dim: d, noise: None }).collect(),
            samples,
            seed,
        }
    }

    pub fn cluster_bits(dims: &[(&str, usize)], clusters: usize, flip_prob: f64, samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            generator: Generator::ClusterBits { clusters, flip_prob },
            modalities: dims.iter().map(|&(n, d)| ModalitySpec { name: n.into(), dim: d, noise: None }).collect(),
            samples,
            seed,
        }
    }
}

/// Sample matrices per modality, in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    modalities: Vec<Modality>,
    data: Batch<f64>,
    rows: usize,
    seed: u64,
    model: Option<LinearGaussianModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderModality {
    name: String,
    dim: usize,
    likelihood: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    rows: usize,
    modalities: Vec<HeaderModality>,
    #[serde(default)]
    model: Option<LinearGaussianModel>,
}

impl Dataset {
    pub fn new(mut modalities: Vec<Modality>, data: Batch<f64>, seed: u64, model: Option<LinearGaussianModel>) -> Result<Self, DataError> {
        modalities.sort_by(|a, b| a.name.cmp(&b.name));
        if modalities.is_empty() {
            return Err(DataError::Invalid("no modalities".into()));
        }
        if data.len() != modalities.len() {
            return Err(DataError::Invalid(format!("{} matrices for {} modalities", data.len(), modalities.len())));
        }
        let mut rows = None;
        for m in &modalities {
            let t = data.get(&m.name).ok_or_else(|| DataError::Invalid(format!("no data for {:?}", m.name)))?;
            if t.cols() != m.data_dim {
                return Err(DataError::Invalid(format!("{:?}: {} columns, dim {}", m.name, t.cols(), m.data_dim)));
            }
            if *rows.get_or_insert(t.rows()) != t.rows() {
                return Err(DataError::Invalid("modalities have different row counts".into()));
            }
            if !t.all_finite() {
                return Err(DataError::Invalid(format!("{:?}: non-finite values", m.name)));
            }
        }
        // Validates names.
        ModalitySet::new(modalities.clone(), 1).map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Dataset { modalities, data, rows: rows.unwrap_or(0), seed, model })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn modality_set(&self, latent_dim: usize) -> Result<ModalitySet, DataError> {
        ModalitySet::new(self.modalities.clone(), latent_dim).map_err(|e| DataError::Invalid(e.to_string()))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &Batch<f64> {
        &self.data
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.data.get(name)
    }

    /// Ground truth of a `SharedLatentLinear` dataset.
    pub fn model(&self) -> Option<&LinearGaussianModel> {
        self.model.as_ref()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch<f64> {
        self.data.iter().map(|(k, v)| (k.clone(), v.gather_rows(indices))).collect()
    }

    pub fn subset_rows(&self, indices: &[usize]) -> Dataset {
        Dataset { modalities: self.modalities.clone(), data: self.batch(indices), rows: indices.len(), seed: self.seed, model: self.model.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.seed,
            rows: self.rows,
            modalities: self
                .modalities
                .iter()
                .map(|m| HeaderModality { name: m.name.clone(), dim: m.data_dim, likelihood: m.likelihood.tag().into() })
                .collect(),
            model: self.model.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for m in &self.modalities {
            for v in self.data[&m.name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, DataError> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(DataError::Invalid(format!("format {:?} version {}", header.format, header.version)));
        }
        let mut modalities = Vec::new();
        let mut data = BTreeMap::new();
        for hm in header.modalities {
            let likelihood = Likelihood::from_tag(&hm.likelihood)
                .ok_or_else(|| DataError::Invalid(format!("unknown likelihood {:?}", hm.likelihood)))?;
            let len = header.rows * hm.dim;
            let mut bytes = vec![0u8; len * 8];
            reader.read_exact(&mut bytes).map_err(|e| DataError::Invalid(format!("payload of {:?}: {e}", hm.name)))?;
            let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::matrix(header.rows, hm.dim, values).map_err(|e| DataError::Invalid(e.to_string()))?;
            data.insert(hm.name.clone(), t);
            modalities.push(Modality::new(hm.name, hm.dim, likelihood));
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(DataError::Invalid(format!("{} trailing bytes", rest.len())));
        }
        Dataset::new(modalities, data, header.seed, header.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_reader(fs::File::open(path)?)
    }
}

/// Deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    if spec.samples == 0 || spec.modalities.is_empty() {
        return Err(DataError::Invalid("need at least one sample and one modality".into()));
    }
    let root = RngStream::new(spec.seed);
    let mut params = root.split(1);
    let mut draws = root.split(2);
    match &spec.generator {
        Generator::SharedLatentLinear { latent_dim, weight_scale, noise_var } => {
            let emissions = spec
                .modalities
                .iter()
                .map(|m| LinearEmission {
                    name: m.name.clone(),
                    weight: (0..m.dim).map(|_| (0..*latent_dim).map(|_| weight_scale * params.normal::<f64>()).collect()).collect(),
                    bias: params.normals(m.dim),
                    noise_var: m.noise.unwrap_or(*noise_var),
                })
                .collect();
            let model = LinearGaussianModel::new(*latent_dim, emissions)?;
            let (_, data) = model.sample(spec.samples, &mut draws);
            let modalities = model.modality_set()?.modalities().to_vec();
            Dataset::new(modalities, data, spec.seed, Some(model))
        }
        Generator::ClusterBits { clusters, flip_prob } => {
            if *clusters == 0 {
                return Err(DataError::Invalid("ClusterBits needs at least one cluster".into()));
            }
            let prototypes: Vec<Vec<Vec<bool>>> = spec
                .modalities
                .iter()
                .map(|m| (0..*clusters).map(|_| (0..m.dim).map(|_| params.bernoulli(0.5)).collect()).collect())
                .collect();
            let mut buffers: Vec<Vec<f64>> = spec.modalities.iter().map(|m| Vec::with_capacity(spec.samples * m.dim)).collect();
            for _ in 0..spec.samples {
                let c = draws.below(*clusters);
                for ((m, protos), buf) in spec.modalities.iter().zip(&prototypes).zip(&mut buffers) {
                    let flip = m.noise.unwrap_or(*flip_prob);
                    for &bit in &protos[c] {
                        let v = bit ^ draws.bernoulli(flip);
                        buf.push(if v { 1.0 } else { 0.0 });
                    }
                }
            }
            let mut data = BTreeMap::new();
            let mut modalities = Vec::new();
            for (m, buf) in spec.modalities.iter().zip(buffers) {
                data.insert(m.name.clone(), Tensor::matrix(spec.samples, m.dim, buf).map_err(|e| DataError::Invalid(e.to_string()))?);
                modalities.push(Modality::new(m.name.clone(), m.dim, Likelihood::BernoulliLogits));
            }
            Dataset::new(modalities, data, spec.seed, None)
        }
    }
}
