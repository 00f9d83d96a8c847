//! Linear-Gaussian generative model `z ~ N(0, I)`, `x_m | z ~ N(W_m z + b_m, σ_m² I)`.
//! Everything about it is available in closed form: the marginal
//! likelihood of any modality subset and the exact posterior.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compiler::{Likelihood, Modality, ModalitySet, Subset};
use crate::distributions::{kl_standard_scalar, McEstimate, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::autodiff::Tape;
use crate::net::{Batch, DecoderHead, ModelBundle};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::linalg::{mvn_log_density, Cholesky};
use super::OracleError;

/// One observation: a real vector per modality name.
pub type Observation = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearEmission {
    pub name: String,
    /// `data_dim` rows of `latent_dim` entries.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub noise_var: f64,
}

impl LinearEmission {
    pub fn data_dim(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelWire", into = "ModelWire")]
pub struct LinearGaussianModel {
    latent_dim: usize,
    emissions: Vec<LinearEmission>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelWire {
    latent_dim: usize,
    emissions: Vec<LinearEmission>,
}

impl TryFrom<ModelWire> for LinearGaussianModel {
    type Error = OracleError;
    fn try_from(w: ModelWire) -> Result<Self, OracleError> {
        LinearGaussianModel::new(w.latent_dim, w.emissions)
    }
}

impl From<LinearGaussianModel> for ModelWire {
    fn from(m: LinearGaussianModel) -> Self {
        ModelWire { latent_dim: m.latent_dim, emissions: m.emissions }
    }
}

/// Exact posterior `N(mean, cov)` of the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub cov: Tensor<f64>,
}

/// Posterior mean as an affine map of the stacked subset observation:
/// `mean = gain · x_S + offset`; the covariance does not depend on `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMap {
    /// `[D_z, D_S]`.
    pub gain: Tensor<f64>,
    pub offset: Vec<f64>,
    pub cov: Tensor<f64>,
}

impl LinearGaussianModel {
    /// Emissions are stored in name order, matching [`ModalitySet`] order.
    pub fn new(latent_dim: usize, mut emissions: Vec<LinearEmission>) -> Result<Self, OracleError> {
        if latent_dim == 0 || emissions.is_empty() {
            return Err(OracleError::DimensionMismatch("model needs a latent and at least one modality".into()));
        }
        emissions.sort_by(|a, b| a.name.cmp(&b.name));
        for (i, e) in emissions.iter().enumerate() {
            if i > 0 && emissions[i - 1].name == e.name {
                return Err(OracleError::DimensionMismatch(format!("duplicate modality {:?}", e.name)));
            }
            if e.bias.is_empty() || e.weight.len() != e.bias.len() || e.weight.iter().any(|r| r.len() != latent_dim) {
                return Err(OracleError::DimensionMismatch(format!(
                    "modality {:?}: weight must be {}×{latent_dim}",
                    e.name,
                    e.bias.len()
                )));
            }
            let finite = e.weight.iter().flatten().chain(&e.bias).all(|v| v.is_finite());
            if !finite || !e.noise_var.is_finite() || e.noise_var < 0.0 {
                return Err(OracleError::DimensionMismatch(format!("modality {:?}: non-finite or negative entries", e.name)));
            }
        }
        let model = LinearGaussianModel { latent_dim, emissions };
        model.modality_set()?;
        Ok(model)
    }

    /// Weights `~ N(0, weight_scale²)`, biases `~ N(0, 1)`, shared noise variance.
    pub fn random(dims: &[(&str, usize)], latent_dim: usize, weight_scale: f64, noise_var: f64, rng: &mut RngStream) -> Result<Self, OracleError> {
        let emissions = dims
            .iter()
            .map(|&(name, d)| LinearEmission {
                name: name.to_string(),
                weight: (0..d).map(|_| (0..latent_dim).map(|_| weight_scale * rng.normal::<f64>()).collect()).collect(),
                bias: rng.normals(d),
                noise_var,
            })
            .collect();
        Self::new(latent_dim, emissions)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn emissions(&self) -> &[LinearEmission] {
        &self.emissions
    }

    pub fn modality_set(&self) -> Result<ModalitySet, OracleError> {
        let mods = self.emissions.iter().map(|e| Modality::new(e.name.clone(), e.data_dim(), Likelihood::DiagGaussian)).collect();
        ModalitySet::new(mods, self.latent_dim).map_err(|e| OracleError::DimensionMismatch(e.to_string()))
    }

    fn full(&self) -> Subset {
        Subset::full(self.emissions.len())
    }

    fn rows(&self, subset: Subset) -> impl Iterator<Item = (&LinearEmission, &Vec<f64>, f64, f64)> {
        subset.members().flat_map(move |i| {
            let e = &self.emissions[i];
            e.weight.iter().zip(&e.bias).map(move |(w, &b)| (e, w, b, e.noise_var))
        })
    }

    /// Stacked `[D_S, D_z]` weight of the subset's modalities.
    pub fn stacked_weight(&self, subset: Subset) -> Tensor<f64> {
        let data: Vec<f64> = self.rows(subset).flat_map(|(_, w, _, _)| w.iter().copied()).collect();
        Tensor::matrix(data.len() / self.latent_dim, self.latent_dim, data).expect("stacked weight")
    }

    pub fn stacked_bias(&self, subset: Subset) -> Vec<f64> {
        self.rows(subset).map(|(_, _, b, _)| b).collect()
    }

    /// `W_S W_Sᵀ + diag σ²` of the stacked subset observation.
    pub fn covariance(&self, subset: Subset) -> Tensor<f64> {
        let w = self.stacked_weight(subset);
        let mut cov = w.matmul(&w.transpose());
        let d = cov.rows();
        for (i, (_, _, _, s2)) in self.rows(subset).enumerate() {
            cov.data_mut()[i * d + i] += s2;
        }
        cov
    }

    fn check_noise(&self, subset: Subset) -> Result<(), OracleError> {
        for i in subset.members() {
            let e = &self.emissions[i];
            if !(e.noise_var > 0.0) {
                return Err(OracleError::NonPositiveNoise(e.name.clone()));
            }
        }
        Ok(())
    }

    fn stack(&self, obs: &Observation, subset: Subset) -> Result<Vec<f64>, OracleError> {
        let mut x = Vec::new();
        for i in subset.members() {
            let e = &self.emissions[i];
            let v = obs.get(&e.name).ok_or_else(|| OracleError::MissingModality(e.name.clone()))?;
            if v.len() != e.data_dim() {
                return Err(OracleError::DimensionMismatch(format!("{:?}: got {} values, want {}", e.name, v.len(), e.data_dim())));
            }
            x.extend_from_slice(v);
        }
        Ok(x)
    }

    pub fn subset_of(&self, names: &[&str]) -> Result<Subset, OracleError> {
        self.modality_set()?.subset_of(names).map_err(|e| OracleError::DimensionMismatch(e.to_string()))
    }

    /// `log p(x)` over all modalities.
    pub fn exact_log_likelihood(&self, obs: &Observation) -> Result<f64, OracleError> {
        self.log_likelihood_of(obs, self.full())
    }

    /// Marginal `log p(x_S)`; other modalities are integrated out.
    pub fn log_likelihood_of(&self, obs: &Observation, subset: Subset) -> Result<f64, OracleError> {
        self.check_noise(subset)?;
        let x = self.stack(obs, subset)?;
        mvn_log_density(&x, &self.stacked_bias(subset), &self.covariance(subset))
    }

    /// Monte Carlo `log (1/n) Σ p(x | z_i)`, `z_i ~ N(0, I)`, with a delta-method standard error.
    pub fn mc_log_likelihood(&self, obs: &Observation, n: usize, rng: &mut RngStream) -> Result<McEstimate, OracleError> {
        let full = self.full();
        self.check_noise(full)?;
        let x = self.stack(obs, full)?;
        let mut logs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = rng.normals(self.latent_dim);
            let mut lp = 0.0;
            for ((_, w, b, s2), &xi) in self.rows(full).zip(&x) {
                let mean: f64 = b + w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>();
                lp += -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (xi - mean).powi(2) / s2);
            }
            logs.push(lp);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ratios: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let est = McEstimate::from_samples(&ratios);
        Ok(McEstimate { estimate: max + est.estimate.ln(), std_error: est.std_error / est.estimate })
    }

    /// Posterior covariance `(I + Wᵀ D⁻¹ W)⁻¹` and gain `Σ Wᵀ D⁻¹` for subset `S`.
    pub fn posterior_map(&self, subset: Subset) -> Result<PosteriorMap, OracleError> {
        self.check_noise(subset)?;
        let w = self.stacked_weight(subset);
        let dinv: Vec<f64> = self.rows(subset).map(|(_, _, _, s2)| 1.0 / s2).collect();
        let wt_dinv = {
            let mut t = w.transpose();
            let cols = t.cols();
            for row in t.data_mut().chunks_mut(cols) {
                for (v, d) in row.iter_mut().zip(&dinv) {
                    *v *= d;
                }
            }
            t
        };
        let mut precision = wt_dinv.matmul(&w);
        let dz = self.latent_dim;
        for i in 0..dz {
            precision.data_mut()[i * dz + i] += 1.0;
        }
        let cov = Cholesky::factor(&precision)?.inverse();
        let gain = cov.matmul(&wt_dinv);
        let b = Tensor::matrix(dinv.len(), 1, self.stacked_bias(subset)).expect("bias column");
        let offset = gain.matmul(&b).data().iter().map(|v| -v).collect();
        Ok(PosteriorMap { gain, offset, cov })
    }

    pub fn posterior(&self, obs: &Observation, subset: Subset) -> Result<GaussianPosterior, OracleError> {
        let map = self.posterior_map(subset)?;
        let x = self.stack(obs, subset)?;
        let xt = Tensor::matrix(x.len(), 1, x).expect("observation column");
        let mean = map.gain.matmul(&xt).data().iter().zip(&map.offset).map(|(a, b)| a + b).collect();
        Ok(GaussianPosterior { mean, cov: map.cov })
    }

    /// Draws `n` iid samples; returns the latents `[n, D_z]` and one `[n, D_m]` matrix per modality.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> (Tensor<f64>, Batch<f64>) {
        let dz = self.latent_dim;
        let z: Vec<f64> = rng.normals(n * dz);
        let mut out = Batch::new();
        let mut buffers: Vec<Vec<f64>> = self.emissions.iter().map(|e| Vec::with_capacity(n * e.data_dim())).collect();
        for i in 0..n {
            let zi = &z[i * dz..(i + 1) * dz];
            for (e, buf) in self.emissions.iter().zip(&mut buffers) {
                let sd = e.noise_var.sqrt();
                for (w, b) in e.weight.iter().zip(&e.bias) {
                    let mean: f64 = b + w.iter().zip(zi).map(|(a, c)| a * c).sum::<f64>();
                    buf.push(mean + sd * rng.normal::<f64>());
                }
            }
        }
        for (e, buf) in self.emissions.iter().zip(buffers) {
            out.insert(e.name.clone(), Tensor::matrix(n, e.data_dim(), buf).expect("sample matrix"));
        }
        (Tensor::matrix(n, dz, z).expect("latent matrix"), out)
    }

    fn check_bundle(&self, bundle: &ModelBundle<f64>) -> Result<(), OracleError> {
        let ms = bundle.expression().modality_set();
        if ms != &self.modality_set()? {
            return Err(OracleError::DimensionMismatch("bundle modalities differ from the model's".into()));
        }
        Ok(())
    }
}

fn set_param(bundle: &mut ModelBundle<f64>, id: crate::autodiff::ParamId, data: Vec<f64>) {
    let t = bundle.store_mut().value_mut(id);
    assert_eq!(t.len(), data.len(), "parameter size");
    t.data_mut().copy_from_slice(&data);
}

fn checked_log(v: f64, what: &str) -> Result<f64, OracleError> {
    let l = v.ln();
    if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&l) {
        Ok(l)
    } else {
        Err(OracleError::Unrepresentable(format!("{what} variance {v} is outside the log-variance clamp")))
    }
}

/// Sets every decoder of a linear-decoder bundle to the model's exact emission.
pub fn install_exact_decoders(bundle: &mut ModelBundle<f64>, model: &LinearGaussianModel) -> Result<(), OracleError> {
    model.check_bundle(bundle)?;
    if !bundle.architecture().decoder_hidden.is_empty() {
        return Err(OracleError::Unrepresentable("exact decoders need a linear decoder architecture".into()));
    }
    let decoders: Vec<_> = bundle.decoders().values().cloned().collect();
    for dec in decoders {
        let e = &model.emissions()[dec.modality];
        let DecoderHead::Gaussian { mean, log_var } = dec.head else {
            return Err(OracleError::Unrepresentable(format!("decoder {:?} is not Gaussian", e.name)));
        };
        let wt = Tensor::from_rows(&e.weight).expect("emission weight").transpose();
        set_param(bundle, mean.weight, wt.into_data());
        set_param(bundle, mean.bias, e.bias.clone());
        let lv = checked_log(e.noise_var, &e.name)?;
        set_param(bundle, log_var.weight, vec![0.0; e.data_dim() * model.latent_dim()]);
        set_param(bundle, log_var.bias, vec![lv; e.data_dim()]);
    }
    Ok(())
}

/// Sets the encoder of `subset` to the exact posterior. Needs a linear
/// encoder architecture and a diagonal posterior covariance.
pub fn install_true_posterior(bundle: &mut ModelBundle<f64>, model: &LinearGaussianModel, subset: Subset) -> Result<(), OracleError> {
    model.check_bundle(bundle)?;
    if !bundle.architecture().encoder_hidden.is_empty() {
        return Err(OracleError::Unrepresentable("the true posterior needs a linear encoder architecture".into()));
    }
    let enc = bundle
        .encoder(subset)
        .cloned()
        .ok_or_else(|| OracleError::Unrepresentable(format!("no encoder for subset mask {:#b}", subset.mask())))?;
    let map = model.posterior_map(subset)?;
    let dz = model.latent_dim();
    let cov = map.cov.data();
    for i in 0..dz {
        for j in 0..dz {
            if i != j && cov[i * dz + j].abs() > 1e-12 * (cov[i * dz + i] * cov[j * dz + j]).sqrt() {
                return Err(OracleError::Unrepresentable("posterior covariance is not diagonal".into()));
            }
        }
    }
    let log_var = (0..dz).map(|i| checked_log(cov[i * dz + i], "posterior")).collect::<Result<Vec<_>, _>>()?;
    let input = map.gain.cols();
    set_param(bundle, enc.mean_head.weight, map.gain.transpose().into_data());
    set_param(bundle, enc.mean_head.bias, map.offset);
    set_param(bundle, enc.log_var_head.weight, vec![0.0; input * dz]);
    set_param(bundle, enc.log_var_head.bias, log_var);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapConfig {
    /// Reparameterized samples for the reconstruction expectation.
    pub samples: usize,
    pub seed: u64,
    /// Encoder used as `q`; the full set when `None`.
    pub source: Option<Subset>,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig { samples: 10_000, seed: 0, source: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboGap {
    pub elbo: f64,
    pub elbo_std_error: f64,
    pub exact: f64,
    /// `exact − elbo`, an estimate of `KL(q ‖ true posterior)`.
    pub gap: f64,
}

impl ElboGap {
    /// `gap ≥ −k·SE`.
    pub fn bound_holds(&self, k: f64) -> bool {
        self.gap >= -k * self.elbo_std_error
    }

    /// `|gap| ≤ k·SE`.
    pub fn consistent_with_zero(&self, k: f64) -> bool {
        self.gap.abs() <= k * self.elbo_std_error
    }
}

/// ELBO of one observation under the bundle's encoder `q(z | x_S)` and the
/// model's exact emissions (installed on a copy of the bundle), against the
/// exact log-likelihood. The KL to the prior is analytic; the expected
/// log-likelihood over all modalities is a Monte Carlo mean.
pub fn elbo_gap(model: &LinearGaussianModel, bundle: &ModelBundle<f64>, obs: &Observation, config: GapConfig) -> Result<ElboGap, OracleError> {
    if config.samples < 2 {
        return Err(OracleError::DimensionMismatch("elbo_gap needs at least two samples".into()));
    }
    let mut exact_bundle = bundle.clone();
    install_exact_decoders(&mut exact_bundle, model)?;
    let exact = model.exact_log_likelihood(obs)?;
    let n = config.samples;
    let dz = model.latent_dim();
    let batch: Batch<f64> = model
        .emissions()
        .iter()
        .map(|e| {
            let row = model.stack(obs, model.subset_of(&[e.name.as_str()])?)?;
            let data = row.iter().copied().cycle().take(n * row.len()).collect();
            Ok((e.name.clone(), Tensor::matrix(n, row.len(), data).expect("replicated observation")))
        })
        .collect::<Result<_, OracleError>>()?;
    let source = config.source.unwrap_or_else(|| model.full());
    let mut tape = Tape::new();
    let (mean, log_var) = exact_bundle.encode(&mut tape, source, &batch)?;
    let kl: f64 = tape
        .value(mean)
        .row(0)
        .iter()
        .zip(tape.value(log_var).row(0))
        .map(|(&m, &lv)| kl_standard_scalar(m, lv))
        .sum();
    let mut rng = RngStream::new(config.seed);
    let eps = tape.constant(Tensor::matrix(n, dz, rng.normals(n * dz)).expect("noise"));
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half);
    let scaled = tape.mul(sd, eps);
    let z = tape.add(mean, scaled);
    let mut recon = vec![0.0; n];
    for (m, e) in model.emissions().iter().enumerate() {
        let ll = exact_bundle.log_likelihood(&mut tape, m, z, &batch[&e.name])?;
        for (r, v) in recon.iter_mut().zip(tape.value(ll).data()) {
            *r += v;
        }
    }
    let est = McEstimate::from_samples(&recon);
    let elbo = est.estimate - kl;
    Ok(ElboGap { elbo, elbo_std_error: est.std_error, exact, gap: exact - elbo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::expand_joint;
    use crate::net::Architecture;

    fn scalar_model(w: f64, s2: f64) -> LinearGaussianModel {
        LinearGaussianModel::new(1, vec![LinearEmission { name: "a".into(), weight: vec![vec![w]], bias: vec![0.0], noise_var: s2 }]).unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let m = scalar_model(1.0, 1.0);
        let obs = Observation::from([("a".to_string(), vec![0.0])]);
        let v = m.exact_log_likelihood(&obs).unwrap();
        assert!((v + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_decouples() {
        let mut rng = RngStream::new(1);
        let mut m = LinearGaussianModel::random(&[("a", 2), ("b", 3)], 2, 0.0, 0.7, &mut rng).unwrap();
        m.emissions[1].noise_var = 1.3;
        let obs = Observation::from([("a".to_string(), vec![0.2, -1.0]), ("b".to_string(), vec![1.0, 0.0, 0.5])]);
        let mut expected = 0.0;
        for e in m.emissions() {
            for (x, b) in obs[&e.name].iter().zip(&e.bias) {
                expected += -0.5 * ((2.0 * std::f64::consts::PI * e.noise_var).ln() + (x - b).powi(2) / e.noise_var);
            }
        }
        assert!((m.exact_log_likelihood(&obs).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_positive_noise_is_an_error() {
        let m = scalar_model(1.0, 0.0);
        let obs = Observation::from([("a".to_string(), vec![0.0])]);
        assert_eq!(m.exact_log_likelihood(&obs).unwrap_err(), OracleError::NonPositiveNoise("a".into()));
        assert!(LinearGaussianModel::new(1, vec![LinearEmission { name: "a".into(), weight: vec![vec![1.0]], bias: vec![0.0], noise_var: -1.0 }]).is_err());
    }

    #[test]
    fn posterior_matches_bayes_rule_pointwise() {
        // p(z|x) ∝ p(x|z) p(z): the log ratio log p(x|z) + log p(z) − log q(z) equals log p(x) for every z.
        let mut rng = RngStream::new(2);
        let m = LinearGaussianModel::random(&[("a", 2), ("b", 1)], 2, 1.0, 0.5, &mut rng).unwrap();
        let obs = Observation::from([("a".to_string(), vec![0.3, -0.2]), ("b".to_string(), vec![1.1])]);
        let post = m.posterior(&obs, Subset::full(2)).unwrap();
        let exact = m.exact_log_likelihood(&obs).unwrap();
        for _ in 0..5 {
            let z: Vec<f64> = rng.normals(2);
            let mut joint = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - (2.0 * std::f64::consts::PI).ln();
            for e in m.emissions() {
                for ((w, b), x) in e.weight.iter().zip(&e.bias).zip(&obs[&e.name]) {
                    let mu = b + w[0] * z[0] + w[1] * z[1];
                    joint += -0.5 * ((2.0 * std::f64::consts::PI * e.noise_var).ln() + (x - mu).powi(2) / e.noise_var);
                }
            }
            let q = mvn_log_density(&z, &post.mean, &post.cov).unwrap();
            assert!((joint - q - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = RngStream::new(3);
        let m = LinearGaussianModel::random(&[("b", 2), ("a", 1)], 2, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(m.emissions()[0].name, "a");
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<LinearGaussianModel>(&text).unwrap(), m);
        assert!(serde_json::from_str::<LinearGaussianModel>(r#"{"latent_dim":1,"emissions":[]}"#).is_err());
    }

    #[test]
    fn true_posterior_gives_zero_gap() {
        let mut rng = RngStream::new(4);
        let m = LinearGaussianModel::random(&[("a", 1), ("b", 1)], 1, 1.0, 0.3, &mut rng).unwrap();
        let ms = m.modality_set().unwrap();
        let mut bundle = ModelBundle::<f64>::new(expand_joint(&ms).unwrap(), Architecture::linear());
        install_true_posterior(&mut bundle, &m, ms.full()).unwrap();
        let obs = Observation::from([("a".to_string(), vec![0.4]), ("b".to_string(), vec![-0.9])]);
        let g = elbo_gap(&m, &bundle, &obs, GapConfig::default()).unwrap();
        assert!(g.consistent_with_zero(3.0), "{g:?}");
    }
}
