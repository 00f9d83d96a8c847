//! Self-test suite behind `m2vae check`: expansion golden tests, KL Monte
//! Carlo agreement, gradient checks, ELBO-gap checks, and VI identities.
//! Sizes are smaller than the integration tests so the whole suite runs in
//! seconds.

use std::f64::consts::LN_2;
use std::fmt;
use std::thread;

use serde::Serialize;

use crate::compiler::{
    coefficient, expand_jmvae, expand_jmvae3_style, expand_m2vae, expand_m2vae_bruteforce, parse_expression, render,
    Likelihood, Modality, ModalitySet, Rational, RenderFormat, Subset, TermKind,
};
use crate::distributions::{kl_gaussian, mc_kl, DiagGaussian};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::net::{Activation, Architecture, Batch, ModelBundle};
use crate::oracles::{elbo_gap, install_true_posterior, DiscreteJoint, GapConfig, LinearGaussianModel, Observation};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Compiler,
    Distributions,
    Gradients,
    Bounds,
    Information,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Compiler, Group::Distributions, Group::Gradients, Group::Bounds, Group::Information];

    pub fn tag(self) -> &'static str {
        match self {
            Group::Compiler => "compiler",
            Group::Distributions => "distributions",
            Group::Gradients => "gradients",
            Group::Bounds => "bounds",
            Group::Information => "information",
        }
    }

    /// Parses a group tag; `all` yields every group.
    pub fn parse_suite(tag: &str) -> Option<Vec<Group>> {
        if tag == "all" {
            return Some(Group::ALL.to_vec());
        }
        Group::ALL.iter().find(|g| g.tag() == tag).map(|&g| vec![g])
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub group: Group,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{} {}/{}: {}", if r.passed { "PASS" } else { "FAIL" }, r.group, r.name, r.detail)?;
        }
        write!(f, "{} checks, {} failed", self.results.len(), self.failures())
    }
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs the requested groups, one thread each; results keep group order.
pub fn run_checks(groups: &[Group], seed: u64) -> CheckReport {
    let mut groups = groups.to_vec();
    groups.sort();
    groups.dedup();
    let results = thread::scope(|scope| {
        let handles: Vec<_> = groups.iter().map(|&g| scope.spawn(move || run_group(g, seed))).collect();
        handles.into_iter().flat_map(|h| h.join().expect("check group panicked")).collect()
    });
    CheckReport { seed, results }
}

fn run_group(group: Group, seed: u64) -> Vec<CheckResult> {
    let rng = RngStream::new(seed).split(group as u64 + 1);
    let checks: Vec<(&str, Box<dyn Fn(&RngStream) -> Outcome>)> = match group {
        Group::Compiler => vec![
            ("m2vae_bimodal_golden", Box::new(|_| m2vae_bimodal_golden())),
            ("m2vae_trimodal_golden", Box::new(|_| m2vae_trimodal_golden())),
            ("recursion_matches_closed_form", Box::new(|_| recursion_matches_closed_form())),
            ("jmvae_structure", Box::new(|_| jmvae_structure())),
            ("json_round_trip", Box::new(|_| json_round_trip())),
        ],
        Group::Distributions => vec![
            ("kl_unit_shift", Box::new(|_| kl_unit_shift())),
            ("kl_monte_carlo", Box::new(kl_monte_carlo)),
        ],
        Group::Gradients => vec![
            ("tanh_m2vae", Box::new(gradients_tanh)),
            ("linear_gaussian", Box::new(gradients_linear)),
        ],
        Group::Bounds => vec![
            ("exact_vs_monte_carlo_likelihood", Box::new(exact_vs_mc_likelihood)),
            ("elbo_below_likelihood", Box::new(elbo_below_likelihood)),
            ("true_posterior_gap", Box::new(true_posterior_gap)),
        ],
        Group::Information => vec![
            ("vi_two_forms", Box::new(vi_two_forms)),
            ("vi_three_bits", Box::new(|_| vi_three_bits())),
            ("information_inequalities", Box::new(information_inequalities)),
        ],
    };
    checks
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let outcome = f(&rng.split(i as u64));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { group, name: name.to_string(), passed, detail }
        })
        .collect()
}

fn r(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

fn gaussian_set(names: &[&str]) -> ModalitySet {
    ModalitySet::gaussian(names, 2, 2).expect("valid names")
}

/// Hand-listed bimodal expansion: every term at 1/2.
fn m2vae_bimodal_golden() -> Outcome {
    let ms = gaussian_set(&["a", "b"]);
    let (a, b, ab) = (Subset::from_mask(1), Subset::from_mask(2), Subset::from_mask(3));
    let expected = [
        TermKind::PriorKl { subset: a },
        TermKind::Recon { subset: a, target: 0 },
        TermKind::PriorKl { subset: b },
        TermKind::Recon { subset: b, target: 1 },
        TermKind::PriorKl { subset: ab },
        TermKind::Recon { subset: ab, target: 0 },
        TermKind::Recon { subset: ab, target: 1 },
        TermKind::CrossKl { subset: ab, dropped: 0 },
        TermKind::CrossKl { subset: ab, dropped: 1 },
    ];
    let e = expand_m2vae(&ms).map_err(|e| e.to_string())?;
    ensure(e.terms().len() == 9, || format!("{} terms", e.terms().len()))?;
    for k in expected {
        ensure(e.coefficient_of(k) == Some(r(1, 2)), || format!("{} has {:?}", k.label(&ms), e.coefficient_of(k)))?;
    }
    Ok("9 terms, all 1/2".into())
}

/// Triple at 1/3, pairs at 1/6, singletons at 1/3; 28 terms.
fn m2vae_trimodal_golden() -> Outcome {
    let ms = gaussian_set(&["a", "b", "c"]);
    let e = expand_m2vae(&ms).map_err(|e| e.to_string())?;
    ensure(e.terms().len() == 28, || format!("{} terms", e.terms().len()))?;
    for t in e.terms() {
        let want = match t.kind.subset().len() {
            3 => r(1, 3),
            2 => r(1, 6),
            _ => r(1, 3),
        };
        ensure(t.coeff == want, || format!("{} has {}", t.kind.label(&ms), t.coeff))?;
    }
    Ok("28 terms: |S|=3 → 1/3, |S|=2 → 1/6, |S|=1 → 1/3".into())
}

fn recursion_matches_closed_form() -> Outcome {
    let names = ["a", "b", "c", "d", "e", "f"];
    for n in 1..=6 {
        let ms = gaussian_set(&names[..n]);
        let closed = expand_m2vae(&ms).map_err(|e| e.to_string())?;
        let brute = expand_m2vae_bruteforce(&ms).map_err(|e| e.to_string())?;
        ensure(closed.terms() == brute.terms(), || format!("N={n}: expansions differ"))?;
        for k in 1..=n {
            // 1 / (k · C(n, k)).
            let binom: i64 = (0..k as i64).fold(1, |acc, i| acc * (n as i64 - i) / (i + 1));
            let c = coefficient(k, n).map_err(|e| e.to_string())?;
            ensure(c == r(1, k as i64 * binom), || format!("coefficient({k},{n}) = {c}"))?;
        }
    }
    Ok("N = 1..6 agree term for term".into())
}

fn jmvae_structure() -> Outcome {
    let ms = gaussian_set(&["a", "b"]);
    let ab = Subset::from_mask(3);
    let e = expand_jmvae(&ms).map_err(|e| e.to_string())?;
    let expected = [
        TermKind::PriorKl { subset: ab },
        TermKind::Recon { subset: ab, target: 0 },
        TermKind::Recon { subset: ab, target: 1 },
        TermKind::CrossKl { subset: ab, dropped: 0 },
        TermKind::CrossKl { subset: ab, dropped: 1 },
    ];
    ensure(e.terms().len() == 5, || format!("{} terms", e.terms().len()))?;
    for k in expected {
        ensure(e.coefficient_of(k) == Some(r(1, 1)), || format!("{} missing", k.label(&ms)))?;
    }
    let e3 = expand_jmvae3_style(&gaussian_set(&["a", "b", "c"])).map_err(|e| e.to_string())?;
    let inv = e3.encoder_inventory();
    ensure(inv.iter().all(|s| s.len() >= 2), || "trimodal JMVAE has a singleton encoder".into())?;
    ensure(inv.len() == 4, || format!("{} encoders", inv.len()))?;
    Ok("bimodal 5 terms at 1; trimodal inventory {abc, ab, ac, bc}".into())
}

fn json_round_trip() -> Outcome {
    let ms = ModalitySet::new(
        vec![Modality::new("img", 4, Likelihood::BernoulliLogits), Modality::new("snd", 3, Likelihood::DiagGaussian), Modality::new("txt", 2, Likelihood::DiagGaussian)],
        3,
    )
    .map_err(|e| e.to_string())?;
    let e = expand_m2vae(&ms).map_err(|e| e.to_string())?;
    let text = render(&e, RenderFormat::Json);
    let back = parse_expression(&text).map_err(|e| e.to_string())?;
    ensure(back == e && render(&back, RenderFormat::Json) == text, || "round trip changed the expression".into())?;
    Ok("render → parse → render is stable".into())
}

fn kl_unit_shift() -> Outcome {
    let q = DiagGaussian::<f64>::new(vec![1.0], vec![0.0]).map_err(|e| e.to_string())?;
    let v = kl_gaussian(&q, &DiagGaussian::standard(1)).map_err(|e| e.to_string())?;
    ensure((v - 0.5).abs() < 1e-12, || format!("KL = {v}"))?;
    Ok("KL(N(1,1) ‖ N(0,1)) = 0.5".into())
}

fn random_gaussian(rng: &mut RngStream, dim: usize) -> DiagGaussian<f64> {
    let mean = rng.normals(dim);
    let log_var = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    DiagGaussian::new(mean, log_var).expect("finite")
}

fn kl_monte_carlo(rng: &RngStream) -> Outcome {
    let mut rng = rng.clone();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let q = random_gaussian(&mut rng, 3);
        let p = random_gaussian(&mut rng, 3);
        let exact = kl_gaussian(&q, &p).map_err(|e| e.to_string())?;
        let est = mc_kl(&q, &p, 20_000, &mut rng).map_err(|e| e.to_string())?;
        let z = (est.estimate - exact).abs() / est.std_error;
        worst = worst.max(z);
        ensure(z < 4.0, || format!("pair {i}: closed {exact}, MC {} ± {}", est.estimate, est.std_error))?;
    }
    Ok(format!("20 pairs within 4 SE (worst {worst:.2} SE)"))
}

fn random_batch(ms: &ModalitySet, n: usize, rng: &mut RngStream) -> Batch<f64> {
    ms.modalities()
        .iter()
        .map(|m| {
            let data = match m.likelihood {
                Likelihood::DiagGaussian => rng.normals(n * m.data_dim),
                Likelihood::BernoulliLogits => (0..n * m.data_dim).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
            };
            (m.name.clone(), Tensor::matrix(n, m.data_dim, data).expect("batch shape"))
        })
        .collect()
}

fn gradients_tanh(rng: &RngStream) -> Outcome {
    let ms = ModalitySet::new(vec![Modality::new("a", 3, Likelihood::DiagGaussian), Modality::new("b", 4, Likelihood::BernoulliLogits)], 2)
        .map_err(|e| e.to_string())?;
    let mut bundle = ModelBundle::new(expand_m2vae(&ms).map_err(|e| e.to_string())?, Architecture::mlp(16, 2, Activation::Tanh));
    bundle.init_params(rng.split(0).seed());
    let batch = random_batch(&ms, 6, &mut rng.split(1));
    let cfg = GradCheckConfig { coords: 200, seed: rng.split(2).seed(), ..Default::default() };
    let report = grad_check(&bundle, &batch, &cfg).map_err(|e| e.to_string())?;
    ensure(report.passed(), || format!("max relative error {:e}", report.max_rel_err))?;
    Ok(format!("{} coordinates, max relative error {:.2e}", report.checked.len(), report.max_rel_err))
}

fn gradients_linear(rng: &RngStream) -> Outcome {
    let ms = gaussian_set(&["a", "b"]);
    let mut bundle = ModelBundle::new(expand_m2vae(&ms).map_err(|e| e.to_string())?, Architecture::linear());
    bundle.init_params(rng.split(0).seed());
    let batch = random_batch(&ms, 6, &mut rng.split(1));
    let cfg = GradCheckConfig { coords: 200, seed: rng.split(2).seed(), tolerance: 1e-6, ..Default::default() };
    let report = grad_check(&bundle, &batch, &cfg).map_err(|e| e.to_string())?;
    ensure(report.passed(), || format!("max relative error {:e}", report.max_rel_err))?;
    Ok(format!("{} coordinates, max relative error {:.2e}", report.checked.len(), report.max_rel_err))
}

fn two_modality_model(rng: &mut RngStream) -> Result<(LinearGaussianModel, Observation), String> {
    let model = LinearGaussianModel::random(&[("a", 1), ("b", 1)], 1, 1.0, 0.5, rng).map_err(|e| e.to_string())?;
    let (_, sample) = model.sample(1, rng);
    let obs = sample.into_iter().map(|(k, v)| (k, v.into_data())).collect();
    Ok((model, obs))
}

fn exact_vs_mc_likelihood(rng: &RngStream) -> Outcome {
    let mut rng = rng.clone();
    let (model, obs) = two_modality_model(&mut rng)?;
    let exact = model.exact_log_likelihood(&obs).map_err(|e| e.to_string())?;
    let est = model.mc_log_likelihood(&obs, 20_000, &mut rng).map_err(|e| e.to_string())?;
    ensure((est.estimate - exact).abs() < 3.0 * est.std_error, || format!("exact {exact}, MC {} ± {}", est.estimate, est.std_error))?;
    Ok(format!("exact {exact:.6}, MC {:.6} ± {:.1e}", est.estimate, est.std_error))
}

fn elbo_below_likelihood(rng: &RngStream) -> Outcome {
    let mut rng = rng.clone();
    let (model, obs) = two_modality_model(&mut rng)?;
    let ms = model.modality_set().map_err(|e| e.to_string())?;
    let expr = crate::compiler::expand_joint(&ms).map_err(|e| e.to_string())?;
    let arch = Architecture { encoder_hidden: vec![8], decoder_hidden: vec![], activation: Activation::Tanh };
    let mut min_gap = f64::INFINITY;
    for i in 0..20 {
        let mut bundle = ModelBundle::new(expr.clone(), arch.clone());
        bundle.init_params(rng.split(100 + i).seed());
        let g = elbo_gap(&model, &bundle, &obs, GapConfig { samples: 2_000, seed: rng.split(200 + i).seed(), source: None })
            .map_err(|e| e.to_string())?;
        ensure(g.bound_holds(3.0), || format!("encoder {i}: ELBO {} exceeds log-likelihood {}", g.elbo, g.exact))?;
        min_gap = min_gap.min(g.gap / g.elbo_std_error.max(f64::MIN_POSITIVE));
    }
    Ok(format!("20 random encoders, smallest gap {min_gap:.1} SE"))
}

fn true_posterior_gap(rng: &RngStream) -> Outcome {
    let mut rng = rng.clone();
    let (model, obs) = two_modality_model(&mut rng)?;
    let ms = model.modality_set().map_err(|e| e.to_string())?;
    let mut bundle = ModelBundle::new(crate::compiler::expand_joint(&ms).map_err(|e| e.to_string())?, Architecture::linear());
    install_true_posterior(&mut bundle, &model, ms.full()).map_err(|e| e.to_string())?;
    let g = elbo_gap(&model, &bundle, &obs, GapConfig { samples: 10_000, seed: rng.split(1).seed(), source: None }).map_err(|e| e.to_string())?;
    ensure(g.consistent_with_zero(3.0), || format!("gap {} with SE {}", g.gap, g.elbo_std_error))?;
    Ok(format!("gap {:.2e} ± {:.1e}", g.gap, g.elbo_std_error))
}

fn vi_two_forms(rng: &RngStream) -> Outcome {
    let mut rng = rng.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shape = vec![2 + rng.below(4), 2 + rng.below(4)];
        let j = DiscreteJoint::random(shape, &mut rng).map_err(|e| e.to_string())?;
        let a = j.vi_entropy_form().map_err(|e| e.to_string())?;
        let b = j.vi_conditional_form().map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-12, || format!("forms differ by {worst:e}"))?;
    Ok(format!("100 random joints, max difference {worst:.1e}"))
}

fn vi_three_bits() -> Outcome {
    let j = DiscreteJoint::independent(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).map_err(|e| e.to_string())?;
    let v = j.variation_of_information().map_err(|e| e.to_string())?;
    ensure((v - 3.0 * LN_2).abs() < 1e-12, || format!("VI = {v}"))?;
    Ok("three independent fair bits: 3 ln 2".into())
}

fn information_inequalities(rng: &RngStream) -> Outcome {
    let mut rng = rng.clone();
    for _ in 0..100 {
        let j = DiscreteJoint::random(vec![3, 4], &mut rng).map_err(|e| e.to_string())?;
        let mi = j.mutual_information(&[0], &[1]).map_err(|e| e.to_string())?;
        let ha = j.entropy(&[0]).map_err(|e| e.to_string())?;
        let hab = j.conditional_entropy(&[0], &[1]).map_err(|e| e.to_string())?;
        let joint = j.entropy(&[0, 1]).map_err(|e| e.to_string())?;
        let hb = j.entropy(&[1]).map_err(|e| e.to_string())?;
        ensure(mi >= -1e-12 && hab <= ha + 1e-12, || format!("I = {mi}, H(A|B) = {hab}, H(A) = {ha}"))?;
        ensure((joint - hb - hab).abs() < 1e-12, || "chain rule violated".into())?;
    }
    Ok("I ≥ 0, H(A|B) ≤ H(A), chain rule on 100 random joints".into())
}
