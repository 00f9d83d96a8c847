//! Config-driven training: Adam on the negated compiled objective, one
//! metrics row per step, checkpoint at the end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::compiler::{expand, CompileError, LossExpression, Subset, Variant};
use crate::data::{generate, DataError, Dataset, SyntheticSpec};
use crate::eval::{evaluate_cross_modal, pair_label};
use crate::net::{forward_objective, Architecture, ModelBundle, ModelError, ObjectiveOptions};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{default_seed, RngStream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics: {0}")]
    Metrics(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("step {step}: term {term} is not finite ({value})")]
    NonFinite { step: usize, term: String, value: f64 },
}

/// Every field has a default; a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `vanilla`, `joint`, `jmvae`, `m2vae`, or `jmvae3_style`.
    pub variant: String,
    pub latent_dim: usize,
    pub architecture: Architecture,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub mc_samples: usize,
    pub stop_grad_reference: bool,
    pub seed: u64,
    /// Fraction of rows held out for cross-modal evaluation.
    pub eval_fraction: f64,
    /// Evaluate every this many steps (and always after the last); 0 means only at the end.
    pub eval_every: usize,
    /// Dataset file; `synthetic` is generated when absent.
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: "m2vae".into(),
            latent_dim: 2,
            architecture: Architecture::default(),
            optimizer: AdamConfig::default(),
            batch_size: 64,
            epochs: 10,
            steps: None,
            mc_samples: 1,
            stop_grad_reference: false,
            seed: default_seed(),
            eval_fraction: 0.1,
            eval_every: 100,
            data: None,
            synthetic: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl TrainConfig {
    /// Parses a config file; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let mut config: TrainConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data, &mut config.checkpoint, &mut config.metrics].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn variant(&self) -> Result<Variant, TrainError> {
        Variant::from_tag(&self.variant).ok_or_else(|| TrainError::Config(format!("unknown variant {:?}", self.variant)))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.variant()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.latent_dim == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return bad("latent_dim, batch_size, and mc_samples must be positive");
        }
        if self.steps.is_none() && self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.steps == Some(0) {
            return bad("steps must be positive");
        }
        let o = self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer needs lr ≥ 0, betas in [0, 1), eps > 0");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)");
        }
        if self.architecture.encoder_hidden.contains(&0) || self.architecture.decoder_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset, TrainError> {
        match (&self.data, &self.synthetic) {
            (Some(path), _) => Ok(Dataset::load(path)?),
            (None, Some(spec)) => Ok(generate(spec)?),
            (None, None) => Err(TrainError::Config("either `data` or `synthetic` is required".into())),
        }
    }
}

/// One step of the training log. Term values are unsigned and unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub objective: f64,
    pub terms: Vec<f64>,
    /// Cross-modal errors on the held-out rows; `None` between evaluations.
    pub eval: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle<f64>,
    pub columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
    /// `(source, target)` pairs of the evaluation columns.
    pub eval_pairs: Vec<(Subset, usize)>,
    /// Cross-modal errors of the freshly initialized model.
    pub initial_eval: Vec<f64>,
    pub final_eval: Vec<f64>,
    pub train_rows: usize,
    pub eval_rows: usize,
}

impl TrainOutcome {
    pub fn eval_of(&self, evals: &[f64], source: Subset, target: usize) -> Option<f64> {
        self.eval_pairs.iter().position(|&p| p == (source, target)).map(|i| evals[i])
    }
}

/// Header: `step`, `objective`, one label per term, one `xmod:` label per pair.
pub fn metrics_columns(expr: &LossExpression, bundle: &ModelBundle<f64>, pairs: &[(Subset, usize)]) -> Vec<String> {
    let ms = expr.modality_set();
    let mut cols = vec!["step".to_string(), "objective".to_string()];
    cols.extend(expr.terms().iter().map(|t| t.kind.label(ms)));
    cols.extend(pairs.iter().map(|&(s, t)| pair_label(bundle, s, t)));
    cols
}

/// RFC 4180 CSV; floats in shortest round-trip form, empty cells where no evaluation ran.
pub fn write_metrics(path: impl AsRef<Path>, columns: &[String], rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns)?;
    let n_eval = columns.len() - 2 - rows.first().map_or(0, |r| r.terms.len());
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.objective.to_string()];
        rec.extend(r.terms.iter().map(f64::to_string));
        match &r.eval {
            Some(e) => rec.extend(e.iter().map(f64::to_string)),
            None => rec.extend(std::iter::repeat_n(String::new(), n_eval)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate_all(bundle: &ModelBundle<f64>, data: &Dataset, pairs: &[(Subset, usize)]) -> Result<Vec<f64>, TrainError> {
    pairs.iter().map(|&(s, t)| Ok(evaluate_cross_modal(bundle, data.data(), s, t)?)).collect()
}

/// Runs the configured optimization on `dataset` and writes metrics and
/// checkpoint files when their paths are set.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let ms = dataset.modality_set(config.latent_dim)?;
    let expr = expand(&ms, config.variant()?)?;
    let mut bundle = ModelBundle::<f64>::new(expr.clone(), config.architecture.clone());
    let root = RngStream::new(config.seed);
    bundle.init_params(root.split(1).seed());

    let mut order: Vec<usize> = (0..dataset.rows()).collect();
    root.split(4).shuffle(&mut order);
    let n_eval = if config.eval_fraction > 0.0 { ((dataset.rows() as f64 * config.eval_fraction).round() as usize).max(1) } else { 0 };
    if n_eval >= dataset.rows() {
        return Err(TrainError::Config(format!("{} rows leave nothing to train on", dataset.rows())));
    }
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let train_set = dataset.subset_rows(train_idx);
    let eval_set = if n_eval > 0 { Some(dataset.subset_rows(eval_idx)) } else { None };

    let pairs: Vec<(Subset, usize)> = if eval_set.is_some() {
        bundle.encoders().keys().flat_map(|&s| bundle.decoders().keys().map(move |&t| (s, t))).collect()
    } else {
        Vec::new()
    };
    let columns = metrics_columns(&expr, &bundle, &pairs);
    let initial_eval = match &eval_set {
        Some(e) => evaluate_all(&bundle, e, &pairs)?,
        None => Vec::new(),
    };

    let batch_size = config.batch_size.min(train_set.rows());
    let per_epoch = train_set.rows().div_ceil(batch_size);
    let total_steps = config.steps.unwrap_or(config.epochs * per_epoch);
    let options = ObjectiveOptions { mc_samples: config.mc_samples, stop_grad_reference: config.stop_grad_reference };
    let mut shuffle_rng = root.split(2);
    let mut noise_rng = root.split(3);
    let mut adam = Adam::new(config.optimizer, bundle.store());
    let mut epoch_order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut rows = Vec::with_capacity(total_steps);
    let labels: Vec<String> = expr.terms().iter().map(|t| t.kind.label(&ms)).collect();

    for step in 1..=total_steps {
        if cursor >= epoch_order.len() {
            epoch_order = (0..train_set.rows()).collect();
            shuffle_rng.shuffle(&mut epoch_order);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(epoch_order.len());
        let batch = train_set.batch(&epoch_order[cursor..end]);
        cursor = end;

        let pass = forward_objective(&bundle, &batch, &mut noise_rng, options)?;
        for (label, &v) in labels.iter().zip(&pass.term_values) {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step, term: label.clone(), value: v });
            }
        }
        let objective = pass.value();
        if !objective.is_finite() {
            return Err(TrainError::NonFinite { step, term: "objective".into(), value: objective });
        }
        let mut tape = pass.tape;
        let loss = tape.scale(pass.objective, -1.0);
        let grads = tape.backward(loss, bundle.store());
        adam.step(bundle.store_mut(), &grads, None);

        let eval_now = step == total_steps || (config.eval_every > 0 && step % config.eval_every == 0);
        let eval = match (&eval_set, eval_now) {
            (Some(e), true) => Some(evaluate_all(&bundle, e, &pairs)?),
            _ => None,
        };
        rows.push(MetricsRow { step, objective, terms: pass.term_values, eval });
    }

    let final_eval = rows.last().and_then(|r| r.eval.clone()).unwrap_or_default();
    if let Some(path) = &config.metrics {
        write_metrics(path, &columns, &rows)?;
    }
    if let Some(path) = &config.checkpoint {
        Checkpoint::new(config.seed, bundle.clone()).save(path)?;
    }
    Ok(TrainOutcome {
        bundle,
        columns,
        rows,
        eval_pairs: pairs,
        initial_eval,
        final_eval,
        train_rows: train_set.rows(),
        eval_rows: n_eval,
    })
}

/// Moving averages over non-overlapping windows of `window` rows.
pub fn smoothed_objective(rows: &[MetricsRow], window: usize) -> Vec<f64> {
    rows.chunks_exact(window).map(|c| c.iter().map(|r| r.objective).sum::<f64>() / window as f64).collect()
}

/// Parses a metrics CSV back into its header and string records.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<BTreeMap<String, String>>), TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(header.iter().cloned().zip(rec.iter().map(String::from)).collect());
    }
    Ok((header, out))
}
