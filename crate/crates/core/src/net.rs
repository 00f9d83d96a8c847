//! Encoder/decoder MLPs, the model bundle, and assembly of the compiled
//! objective on a differentiation tape.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::compiler::{Likelihood, LossExpression, Subset, TermKind};
use crate::distributions::{LOG_VAR_MAX, LOG_VAR_MIN};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::Scalar;

/// Initial bias of every posterior log-variance head: σ² ≈ e⁻¹.
pub const LOG_VAR_HEAD_BIAS: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("batch is missing modality {0:?}")]
    MissingModality(String),
    #[error("modality {name:?}: expected {expected} columns, got {got}")]
    WidthMismatch { name: String, expected: usize, got: usize },
    #[error("batch sizes differ: {0} vs {1}")]
    BatchSizeMismatch(usize, usize),
    #[error("encoder for subset {0} not in inventory")]
    EncoderNotInInventory(String),
    #[error("decoder for modality {0:?} not in inventory")]
    DecoderNotInInventory(String),
    #[error("mc_samples must be at least 1")]
    ZeroSamples,
    #[error("noise blocks do not match the batch, latent width, or sample count")]
    NoiseMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Hidden layer widths of encoders and decoders. Empty means a linear map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { encoder_hidden: vec![64, 64], decoder_hidden: vec![64, 64], activation: Activation::Tanh }
    }
}

impl Architecture {
    pub fn linear() -> Self {
        Architecture { encoder_hidden: vec![], decoder_hidden: vec![], activation: Activation::Tanh }
    }

    pub fn mlp(width: usize, layers: usize, activation: Activation) -> Self {
        Architecture { encoder_hidden: vec![width; layers], decoder_hidden: vec![width; layers], activation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    }
}

fn build_trunk<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, input: usize, hidden: &[usize]) -> (Vec<Dense>, usize) {
    let mut width = input;
    let layers = hidden
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let d = Dense::new(store, &format!("{prefix}.l{i}"), width, h);
            width = h;
            d
        })
        .collect();
    (layers, width)
}

fn apply_trunk<T: Scalar>(layers: &[Dense], act: Activation, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Var {
    for layer in layers {
        let h = layer.apply(tape, store, x);
        x = match act {
            Activation::Tanh => tape.tanh(h),
            Activation::Relu => tape.relu(h),
        };
    }
    x
}

/// `q(z | x_S)`: concatenated subset inputs → trunk → (mean, log-variance) heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderNet {
    pub subset: Subset,
    pub trunk: Vec<Dense>,
    pub mean_head: Dense,
    pub log_var_head: Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecoderHead {
    Bernoulli { logits: Dense },
    Gaussian { mean: Dense, log_var: Dense },
}

/// `p(x_m | z)` for one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderNet {
    pub modality: usize,
    pub trunk: Vec<Dense>,
    pub head: DecoderHead,
}

/// Output of a decoder on the tape.
#[derive(Debug, Clone, Copy)]
pub enum DecoderOutput {
    Logits(Var),
    Gaussian { mean: Var, log_var: Var },
}

/// Encoders for exactly the expression's encoder inventory, decoders for its
/// decoder inventory, and the parameters they share a store with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    expression: LossExpression,
    architecture: Architecture,
    store: ParamStore<T>,
    encoders: BTreeMap<Subset, EncoderNet>,
    decoders: BTreeMap<usize, DecoderNet>,
}

pub type Batch<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ModelBundle<T> {
    /// Builds zero-valued networks for the expression's inventories; call
    /// [`ModelBundle::init_params`] before training.
    pub fn new(expression: LossExpression, architecture: Architecture) -> Self {
        let ms = expression.modality_set().clone();
        let dz = ms.latent_dim();
        let mut store = ParamStore::new();
        let mut encoders = BTreeMap::new();
        for subset in expression.encoder_inventory() {
            let prefix = format!("enc[{}]", ms.subset_label(subset, "+"));
            let (trunk, width) = build_trunk(&mut store, &prefix, ms.input_dim(subset), &architecture.encoder_hidden);
            let mean_head = Dense::new(&mut store, &format!("{prefix}.mean"), width, dz);
            let log_var_head = Dense::new(&mut store, &format!("{prefix}.log_var"), width, dz);
            encoders.insert(subset, EncoderNet { subset, trunk, mean_head, log_var_head });
        }
        let mut decoders = BTreeMap::new();
        for modality in expression.decoder_inventory() {
            let m = ms.get(modality);
            let prefix = format!("dec[{}]", m.name);
            let (trunk, width) = build_trunk(&mut store, &prefix, dz, &architecture.decoder_hidden);
            let head = match m.likelihood {
                Likelihood::BernoulliLogits => {
                    DecoderHead::Bernoulli { logits: Dense::new(&mut store, &format!("{prefix}.logits"), width, m.data_dim) }
                }
                Likelihood::DiagGaussian => DecoderHead::Gaussian {
                    mean: Dense::new(&mut store, &format!("{prefix}.mean"), width, m.data_dim),
                    log_var: Dense::new(&mut store, &format!("{prefix}.log_var"), width, m.data_dim),
                },
            };
            decoders.insert(modality, DecoderNet { modality, trunk, head });
        }
        ModelBundle { expression, architecture, store, encoders, decoders }
    }

    /// Glorot-uniform weights, zero biases, posterior log-variance bias −1.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = RngStream::new(seed);
        let log_var_biases: BTreeSet<ParamId> = self.encoders.values().map(|e| e.log_var_head.bias).collect();
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let is_weight = self.store.get(id).name.ends_with(".w");
            let value = self.store.value_mut(id);
            if is_weight {
                let (fan_in, fan_out) = (value.rows(), value.cols());
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in value.data_mut() {
                    *v = rng.uniform(-limit, limit);
                }
            } else {
                let b = if log_var_biases.contains(&id) { LOG_VAR_HEAD_BIAS } else { 0.0 };
                value.data_mut().iter_mut().for_each(|v| *v = T::of(b));
            }
        }
    }

    pub fn expression(&self) -> &LossExpression {
        &self.expression
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoders(&self) -> &BTreeMap<Subset, EncoderNet> {
        &self.encoders
    }

    pub fn decoders(&self) -> &BTreeMap<usize, DecoderNet> {
        &self.decoders
    }

    pub fn encoder(&self, subset: Subset) -> Option<&EncoderNet> {
        self.encoders.get(&subset)
    }

    /// Removes an encoder; later objective evaluations needing it fail.
    pub fn remove_encoder(&mut self, subset: Subset) -> Option<EncoderNet> {
        self.encoders.remove(&subset)
    }

    /// Parameters belonging to encoders (true) versus decoders (false).
    pub fn encoder_param_mask(&self) -> Vec<bool> {
        self.store.iter().map(|(_, p)| p.name.starts_with("enc[")).collect()
    }

    /// Checks every subset and decoder the expression references is present.
    pub fn check_inventory(&self) -> Result<(), ModelError> {
        let ms = self.expression.modality_set();
        for s in self.expression.encoder_inventory() {
            if !self.encoders.contains_key(&s) {
                return Err(ModelError::EncoderNotInInventory(format!("{{{}}}", ms.subset_label(s, ","))));
            }
        }
        for m in self.expression.decoder_inventory() {
            if !self.decoders.contains_key(&m) {
                return Err(ModelError::DecoderNotInInventory(ms.get(m).name.clone()));
            }
        }
        Ok(())
    }

    /// Validates a batch and returns its row count.
    pub fn check_batch(&self, batch: &Batch<T>) -> Result<usize, ModelError> {
        let mut rows = None;
        for m in self.expression.modality_set().modalities() {
            let t = batch.get(&m.name).ok_or_else(|| ModelError::MissingModality(m.name.clone()))?;
            if t.cols() != m.data_dim {
                return Err(ModelError::WidthMismatch { name: m.name.clone(), expected: m.data_dim, got: t.cols() });
            }
            match rows {
                None => rows = Some(t.rows()),
                Some(r) if r != t.rows() => return Err(ModelError::BatchSizeMismatch(r, t.rows())),
                _ => {}
            }
        }
        Ok(rows.expect("modality set is nonempty"))
    }

    /// Posterior `(mean, log_var)` of subset encoder `subset` on the tape.
    pub fn encode(&self, tape: &mut Tape<T>, subset: Subset, batch: &Batch<T>) -> Result<(Var, Var), ModelError> {
        let ms = self.expression.modality_set();
        let enc = self
            .encoders
            .get(&subset)
            .ok_or_else(|| ModelError::EncoderNotInInventory(format!("{{{}}}", ms.subset_label(subset, ","))))?;
        let parts: Vec<&Tensor<T>> = subset
            .members()
            .map(|i| batch.get(&ms.get(i).name).ok_or_else(|| ModelError::MissingModality(ms.get(i).name.clone())))
            .collect::<Result<_, _>>()?;
        let x = tape.constant(Tensor::concat_cols(&parts));
        let h = apply_trunk(&enc.trunk, self.architecture.activation, tape, &self.store, x);
        let mean = enc.mean_head.apply(tape, &self.store, h);
        let raw_lv = enc.log_var_head.apply(tape, &self.store, h);
        let log_var = tape.clamp(raw_lv, T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX));
        Ok((mean, log_var))
    }

    pub fn decode(&self, tape: &mut Tape<T>, modality: usize, z: Var) -> Result<DecoderOutput, ModelError> {
        let dec = self
            .decoders
            .get(&modality)
            .ok_or_else(|| ModelError::DecoderNotInInventory(self.expression.modality_set().get(modality).name.clone()))?;
        let h = apply_trunk(&dec.trunk, self.architecture.activation, tape, &self.store, z);
        Ok(match dec.head {
            DecoderHead::Bernoulli { logits } => DecoderOutput::Logits(logits.apply(tape, &self.store, h)),
            DecoderHead::Gaussian { mean, log_var } => {
                let m = mean.apply(tape, &self.store, h);
                let raw = log_var.apply(tape, &self.store, h);
                let lv = tape.clamp(raw, T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX));
                DecoderOutput::Gaussian { mean: m, log_var: lv }
            }
        })
    }

    /// Row-wise `log p(x_m | z)` as an `[n,1]` node.
    pub fn log_likelihood(&self, tape: &mut Tape<T>, modality: usize, z: Var, x: &Tensor<T>) -> Result<Var, ModelError> {
        let out = self.decode(tape, modality, z)?;
        let xv = tape.constant(x.clone());
        Ok(match out {
            DecoderOutput::Logits(l) => tape.bernoulli_log_prob(xv, l),
            DecoderOutput::Gaussian { mean, log_var } => tape.gaussian_log_prob(xv, mean, log_var),
        })
    }
}

/// Estimator settings for [`forward_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveOptions {
    /// Reparameterized samples per reconstruction term.
    pub mc_samples: usize,
    /// Treat the reference posterior `q(z|S∖m)` of a cross KL as a constant.
    pub stop_grad_reference: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions { mc_samples: 1, stop_grad_reference: false }
    }
}

/// A recorded objective evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// Maximization-oriented ELBO estimate, `[1,1]`.
    pub objective: Var,
    /// Unsigned, unweighted batch-mean value of each term, in expression order.
    pub term_values: Vec<T>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn value(&self) -> T {
        self.tape.value(self.objective).item()
    }
}

/// Reparameterization noise: per subset with reconstruction terms, one
/// `[n, D_z]` block per Monte Carlo sample.
pub type Noise<T> = BTreeMap<Subset, Vec<Tensor<T>>>;

/// Draws noise for `forward_objective_with_noise` in the order
/// `forward_objective` uses: sample by sample, subsets in canonical order.
pub fn draw_noise<T: Scalar>(expression: &LossExpression, rows: usize, mc_samples: usize, rng: &mut RngStream) -> Noise<T> {
    let dz = expression.modality_set().latent_dim();
    let recon_subsets: BTreeSet<Subset> = expression
        .terms()
        .iter()
        .filter_map(|t| matches!(t.kind, TermKind::Recon { .. }).then(|| t.kind.subset()))
        .collect();
    let mut noise: Noise<T> = BTreeMap::new();
    for _ in 0..mc_samples {
        for &subset in &recon_subsets {
            let block = Tensor::matrix(rows, dz, rng.normals(rows * dz)).expect("noise shape");
            noise.entry(subset).or_default().push(block);
        }
    }
    noise
}

/// Σ_terms sign·coeff·value over the batch mean, with fresh noise from `rng`.
pub fn forward_objective<T: Scalar>(
    bundle: &ModelBundle<T>,
    batch: &Batch<T>,
    rng: &mut RngStream,
    options: ObjectiveOptions,
) -> Result<ForwardPass<T>, ModelError> {
    if options.mc_samples == 0 {
        return Err(ModelError::ZeroSamples);
    }
    bundle.check_inventory()?;
    let n = bundle.check_batch(batch)?;
    let noise = draw_noise(bundle.expression(), n, options.mc_samples, rng);
    forward_objective_with_noise(bundle, batch, &noise, options)
}

/// As [`forward_objective`] with caller-supplied noise; `options.mc_samples`
/// must match the number of blocks per subset.
pub fn forward_objective_with_noise<T: Scalar>(
    bundle: &ModelBundle<T>,
    batch: &Batch<T>,
    noise: &Noise<T>,
    options: ObjectiveOptions,
) -> Result<ForwardPass<T>, ModelError> {
    if options.mc_samples == 0 {
        return Err(ModelError::ZeroSamples);
    }
    bundle.check_inventory()?;
    let n = bundle.check_batch(batch)?;
    let expr = bundle.expression();
    let ms = expr.modality_set();
    let dz = ms.latent_dim();
    let mut tape = Tape::new();

    let mut posteriors = BTreeMap::new();
    for subset in expr.encoder_inventory() {
        posteriors.insert(subset, bundle.encode(&mut tape, subset, batch)?);
    }

    let half = T::of(0.5);
    let mut latents: BTreeMap<Subset, Vec<Var>> = BTreeMap::new();
    for term in expr.terms() {
        let TermKind::Recon { subset, .. } = term.kind else { continue };
        if latents.contains_key(&subset) {
            continue;
        }
        let blocks = noise.get(&subset).ok_or(ModelError::NoiseMismatch)?;
        if blocks.len() != options.mc_samples || blocks.iter().any(|b| b.shape() != [n, dz]) {
            return Err(ModelError::NoiseMismatch);
        }
        let (mean, log_var) = posteriors[&subset];
        let half_lv = tape.scale(log_var, half);
        let std = tape.exp(half_lv);
        let zs = blocks
            .iter()
            .map(|b| {
                let eps = tape.constant(b.clone());
                let scaled = tape.mul(std, eps);
                tape.add(mean, scaled)
            })
            .collect();
        latents.insert(subset, zs);
    }

    let inv_samples = T::one() / T::of(options.mc_samples as f64);
    let mut term_vars = Vec::with_capacity(expr.terms().len());
    for term in expr.terms() {
        let v = match term.kind {
            TermKind::PriorKl { subset } => {
                let (m, lv) = posteriors[&subset];
                let kl = tape.kl_standard(m, lv);
                tape.mean(kl)
            }
            TermKind::CrossKl { subset, dropped } => {
                let (mq, lvq) = posteriors[&subset];
                let (mut mp, mut lvp) = posteriors[&subset.without(dropped)];
                if options.stop_grad_reference {
                    mp = tape.detach(mp);
                    lvp = tape.detach(lvp);
                }
                let kl = tape.kl_diag(mq, lvq, mp, lvp);
                tape.mean(kl)
            }
            TermKind::Recon { subset, target } => {
                let x = &batch[&ms.get(target).name];
                let mut acc: Option<Var> = None;
                for &z in &latents[&subset] {
                    let lp = bundle.log_likelihood(&mut tape, target, z, x)?;
                    let m = tape.mean(lp);
                    acc = Some(match acc {
                        None => m,
                        Some(a) => tape.add(a, m),
                    });
                }
                let total = acc.expect("at least one sample");
                tape.scale(total, inv_samples)
            }
        };
        term_vars.push(v);
    }

    let mut objective: Option<Var> = None;
    for (term, &v) in expr.terms().iter().zip(&term_vars) {
        let c = term.signed_coeff();
        let w = T::of(*c.numer() as f64) / T::of(*c.denom() as f64);
        let weighted = tape.scale(v, w);
        objective = Some(match objective {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    let objective = objective.expect("expressions are nonempty");
    let term_values = term_vars.iter().map(|&v| tape.value(v).item()).collect();
    Ok(ForwardPass { tape, objective, term_values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{expand_m2vae, expand_vanilla, Modality, ModalitySet};
    use crate::distributions::{kl_gaussian, kl_to_standard, DiagGaussian};

    fn batch_for(ms: &ModalitySet, n: usize, rng: &mut RngStream) -> Batch<f64> {
        ms.modalities()
            .iter()
            .map(|m| {
                let data = match m.likelihood {
                    Likelihood::DiagGaussian => rng.normals(n * m.data_dim),
                    Likelihood::BernoulliLogits => (0..n * m.data_dim).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
                };
                (m.name.clone(), Tensor::matrix(n, m.data_dim, data).unwrap())
            })
            .collect()
    }

    fn zero_all(bundle: &mut ModelBundle<f64>) {
        let ids: Vec<_> = bundle.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            bundle.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn inventory_matches_expression() {
        let ms = ModalitySet::gaussian(&["a", "b", "c"], 2, 2).unwrap();
        let b = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), Architecture::default());
        assert_eq!(b.encoders().len(), 7);
        assert_eq!(b.decoders().len(), 3);
        assert!(b.check_inventory().is_ok());
    }

    #[test]
    fn init_is_deterministic_with_expected_biases() {
        let ms = ModalitySet::gaussian(&["a", "b"], 3, 2).unwrap();
        let mut a = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), Architecture::default());
        let mut b = a.clone();
        a.init_params(42);
        b.init_params(42);
        assert_eq!(a, b);
        let lv = a.store().find("enc[a+b].log_var.b").unwrap();
        assert!(a.store().value(lv).data().iter().all(|&v| v == -1.0));
        let mean_b = a.store().find("enc[a+b].mean.b").unwrap();
        assert!(a.store().value(mean_b).data().iter().all(|&v| v == 0.0));
        let w = a.store().value(a.store().find("enc[a+b].l1.w").unwrap());
        let limit = (6.0f64 / 128.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        // Uniform(±L) has sd L/√3; CLT bound on the sample mean.
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 4.0 * limit / 3f64.sqrt() / (w.len() as f64).sqrt());
    }

    #[test]
    fn vanilla_with_constant_decoder() {
        // Decoder ignores z (zero weights), logits 0: recon = −D ln 2 exactly.
        let d = 5;
        let ms = ModalitySet::new(vec![Modality::new("a", d, Likelihood::BernoulliLogits)], 3).unwrap();
        let mut bundle = ModelBundle::<f64>::new(expand_vanilla(&ms).unwrap(), Architecture::mlp(8, 1, Activation::Tanh));
        bundle.init_params(1);
        let dec_ids: Vec<_> = bundle.store().iter().filter(|(_, p)| p.name.starts_with("dec[")).map(|(id, _)| id).collect();
        for id in dec_ids {
            bundle.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = RngStream::new(2);
        let batch = batch_for(&ms, 1, &mut rng);
        let pass = forward_objective(&bundle, &batch, &mut rng, ObjectiveOptions::default()).unwrap();
        let (m, lv) = {
            let mut t = Tape::new();
            let (m, lv) = bundle.encode(&mut t, Subset::singleton(0), &batch).unwrap();
            (t.value(m).data().to_vec(), t.value(lv).data().to_vec())
        };
        let kl = kl_to_standard(&DiagGaussian::new(m, lv).unwrap());
        let expected = -kl - d as f64 * std::f64::consts::LN_2;
        assert!((pass.value() - expected).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_encoders_zero_kl() {
        let ms = ModalitySet::gaussian(&["a", "b"], 3, 2).unwrap();
        let mut bundle = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), Architecture::mlp(4, 1, Activation::Tanh));
        bundle.init_params(3);
        // Pin every encoder head to N(0, I): zero head weights and biases.
        let ids: Vec<_> = bundle
            .store()
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc[") && (p.name.contains(".mean.") || p.name.contains(".log_var.")))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            bundle.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = RngStream::new(4);
        let batch = batch_for(&ms, 6, &mut rng);
        let pass = forward_objective(&bundle, &batch, &mut rng, ObjectiveOptions::default()).unwrap();
        let expr = bundle.expression();
        let mut recon = 0.0;
        for (t, v) in expr.terms().iter().zip(&pass.term_values) {
            match t.kind {
                TermKind::Recon { .. } => recon += 0.5 * v,
                _ => assert_eq!(*v, 0.0),
            }
        }
        assert!((pass.value() - recon).abs() < 1e-12);
        let grads = pass.tape.backward(pass.objective, bundle.store());
        // Encoder trunks only feed the KL terms through the pinned heads; with
        // zero head weights no gradient reaches them.
        for (id, p) in bundle.store().iter() {
            if p.name.starts_with("enc[") && p.name.contains(".l0.") {
                assert!(grads.get(id).data().iter().all(|&g| g == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn objective_equals_hand_assembled_terms() {
        let ms = ModalitySet::new(
            vec![Modality::new("a", 3, Likelihood::DiagGaussian), Modality::new("b", 4, Likelihood::BernoulliLogits)],
            2,
        )
        .unwrap();
        let mut bundle = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), Architecture::mlp(6, 2, Activation::Tanh));
        bundle.init_params(5);
        let mut rng = RngStream::new(6);
        let batch = batch_for(&ms, 4, &mut rng);
        let noise = rng.clone();
        let pass = forward_objective(&bundle, &batch, &mut rng, ObjectiveOptions::default()).unwrap();

        // Independent recomputation row by row using the scalar distribution API.
        let mut tape = Tape::new();
        let post: BTreeMap<Subset, (Vec<f64>, Vec<f64>)> = bundle
            .expression()
            .encoder_inventory()
            .into_iter()
            .map(|s| {
                let (m, lv) = bundle.encode(&mut tape, s, &batch).unwrap();
                (s, (tape.value(m).data().to_vec(), tape.value(lv).data().to_vec()))
            })
            .collect();
        let row_gauss = |s: Subset, i: usize| {
            let (m, lv) = &post[&s];
            DiagGaussian::new(m[i * 2..i * 2 + 2].to_vec(), lv[i * 2..i * 2 + 2].to_vec()).unwrap()
        };
        let mut noise = noise;
        let mut eps = BTreeMap::new();
        for s in [Subset::from_mask(1), Subset::from_mask(2), Subset::from_mask(3)] {
            eps.insert(s, noise.normals::<f64>(8));
        }
        let mut total = 0.0;
        for term in bundle.expression().terms() {
            let mut v = 0.0;
            for i in 0..4 {
                v += match term.kind {
                    TermKind::PriorKl { subset } => kl_to_standard(&row_gauss(subset, i)),
                    TermKind::CrossKl { subset, dropped } => {
                        kl_gaussian(&row_gauss(subset, i), &row_gauss(subset.without(dropped), i)).unwrap()
                    }
                    TermKind::Recon { subset, target } => {
                        let q = row_gauss(subset, i);
                        let e = &eps[&subset][i * 2..i * 2 + 2];
                        let z: Vec<f64> = (0..2).map(|d| q.mean()[d] + (0.5 * q.log_var()[d]).exp() * e[d]).collect();
                        let zt = tape.constant(Tensor::matrix(1, 2, z).unwrap());
                        let name = &ms.get(target).name;
                        let x = batch[name].gather_rows(&[i]);
                        let out = bundle.decode(&mut tape, target, zt).unwrap();
                        match out {
                            DecoderOutput::Logits(l) => {
                                crate::distributions::log_prob_bernoulli(x.data(), tape.value(l).data()).unwrap()
                            }
                            DecoderOutput::Gaussian { mean, log_var } => {
                                let p = DiagGaussian::new(tape.value(mean).data().to_vec(), tape.value(log_var).data().to_vec()).unwrap();
                                crate::distributions::log_prob_gaussian(x.data(), &p).unwrap()
                            }
                        }
                    }
                };
            }
            let c = term.signed_coeff();
            total += (*c.numer() as f64 / *c.denom() as f64) * v / 4.0;
        }
        assert!((pass.value() - total).abs() < 1e-12, "{} vs {total}", pass.value());
    }

    #[test]
    fn mc_samples_average_consecutive_single_sample_evaluations() {
        let ms = ModalitySet::gaussian(&["a", "b"], 2, 2).unwrap();
        let mut bundle = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), Architecture::mlp(5, 1, Activation::Tanh));
        bundle.init_params(7);
        let mut rng = RngStream::new(8);
        let batch = batch_for(&ms, 3, &mut rng);
        let k = 4;
        let multi = forward_objective(&bundle, &batch, &mut rng.clone(), ObjectiveOptions { mc_samples: k, ..Default::default() }).unwrap();
        let mut single_rng = rng.clone();
        let singles: f64 = (0..k)
            .map(|_| forward_objective(&bundle, &batch, &mut single_rng, ObjectiveOptions::default()).unwrap().value())
            .sum::<f64>()
            / k as f64;
        assert!((multi.value() - singles).abs() < 1e-12);
    }

    #[test]
    fn renaming_and_row_permutation_preserve_objective() {
        let ms = ModalitySet::new(
            vec![Modality::new("a", 2, Likelihood::DiagGaussian), Modality::new("b", 3, Likelihood::BernoulliLogits)],
            2,
        )
        .unwrap();
        // a→y, b→x reverses the canonical order.
        let renamed = ms.renamed(|n| if n == "a" { "y".into() } else { "x".into() }).unwrap();
        let arch = Architecture::mlp(4, 2, Activation::Tanh);
        let mut b1 = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), arch.clone());
        let mut b2 = ModelBundle::<f64>::new(expand_m2vae(&renamed).unwrap(), arch);
        b1.init_params(9);
        zero_all(&mut b2);
        let map = |n: &str| n.replace("[a+b]", "[x+y]").replace("[a]", "[y]").replace("[b]", "[x]");
        for (_, p) in b1.store().iter() {
            let id = b2.store().find(&map(&p.name)).unwrap();
            *b2.store_mut().value_mut(id) = p.value.clone();
        }
        // Joint input is (a,b) versus (x,y) = (b,a): permute first-layer rows.
        let w1 = b1.store().value(b1.store().find("enc[a+b].l0.w").unwrap()).clone();
        let id = b2.store().find("enc[x+y].l0.w").unwrap();
        *b2.store_mut().value_mut(id) = w1.gather_rows(&[2, 3, 4, 0, 1]);

        let n = 5;
        let mut rng = RngStream::new(10);
        let batch = batch_for(&ms, n, &mut rng);
        let noise: Noise<f64> = draw_noise(b1.expression(), n, 2, &mut rng);
        let perm = rng.sample_indices(n, n);
        let swap = |s: Subset| Subset::from_mask(((s.mask() & 1) << 1) | ((s.mask() >> 1) & 1));
        let batch2: Batch<f64> = batch
            .iter()
            .map(|(k, v)| (if k == "a" { "y".to_string() } else { "x".to_string() }, v.gather_rows(&perm)))
            .collect();
        let noise2: Noise<f64> =
            noise.iter().map(|(s, blocks)| (swap(*s), blocks.iter().map(|b| b.gather_rows(&perm)).collect())).collect();
        let opts = ObjectiveOptions { mc_samples: 2, ..Default::default() };
        let v1 = forward_objective_with_noise(&b1, &batch, &noise, opts).unwrap().value();
        let v2 = forward_objective_with_noise(&b2, &batch2, &noise2, opts).unwrap().value();
        assert!((v1 - v2).abs() < 1e-12, "{v1} vs {v2}");
    }

    #[test]
    fn errors_on_missing_modality_and_inventory() {
        let ms = ModalitySet::gaussian(&["a", "b"], 2, 2).unwrap();
        let mut bundle = ModelBundle::<f64>::new(expand_m2vae(&ms).unwrap(), Architecture::linear());
        let mut rng = RngStream::new(0);
        let mut batch = batch_for(&ms, 2, &mut rng);
        batch.remove("b");
        assert_eq!(
            forward_objective(&bundle, &batch, &mut rng, ObjectiveOptions::default()).unwrap_err(),
            ModelError::MissingModality("b".into())
        );
        let batch = batch_for(&ms, 2, &mut rng);
        bundle.remove_encoder(Subset::singleton(0));
        assert!(matches!(
            forward_objective(&bundle, &batch, &mut rng, ObjectiveOptions::default()),
            Err(ModelError::EncoderNotInInventory(_))
        ));
    }

    #[test]
    fn stop_grad_reference_blocks_reference_encoder() {
        let ms = ModalitySet::gaussian(&["a", "b"], 2, 2).unwrap();
        let expr = crate::compiler::expand_jmvae(&ms).unwrap();
        let mut bundle = ModelBundle::<f64>::new(expr, Architecture::mlp(4, 1, Activation::Tanh));
        bundle.init_params(11);
        let mut rng = RngStream::new(12);
        let batch = batch_for(&ms, 3, &mut rng);
        let opts = ObjectiveOptions { mc_samples: 1, stop_grad_reference: true };
        let pass = forward_objective(&bundle, &batch, &mut rng.clone(), opts).unwrap();
        let g = pass.tape.backward(pass.objective, bundle.store());
        let a_ids: Vec<_> = bundle.store().iter().filter(|(_, p)| p.name.starts_with("enc[a].")).map(|(id, _)| id).collect();
        assert!(a_ids.iter().all(|&id| g.get(id).data().iter().all(|&v| v == 0.0)));
        let pass = forward_objective(&bundle, &batch, &mut rng.clone(), ObjectiveOptions::default()).unwrap();
        let g = pass.tape.backward(pass.objective, bundle.store());
        assert!(a_ids.iter().any(|&id| g.get(id).data().iter().any(|&v| v != 0.0)));
    }
}
