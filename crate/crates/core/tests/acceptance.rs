//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion; run with `--nocapture` to see them.
//!
//! Reference values are recomputed here from first principles (hand-listed
//! terms, factorials, closed-form densities, entropy sums) rather than taken
//! from the library.

use std::collections::BTreeSet;
use std::f64::consts::{LN_2, PI};
use std::fs;
use std::time::{Duration, Instant};

use m2vae::compiler::{
    coefficient, expand_jmvae, expand_jmvae3_style, expand_joint, expand_m2vae, expand_m2vae_bruteforce, ModalitySet, Rational,
    Subset, TermKind,
};
use m2vae::data::SyntheticSpec;
use m2vae::distributions::{kl_gaussian, mc_kl, DiagGaussian};
use m2vae::eval::evaluate_cross_modal;
use m2vae::gradcheck::{grad_check, GradCheckConfig};
use m2vae::net::{Activation, Architecture, Batch, ModelBundle};
use m2vae::oracles::{elbo_gap, install_true_posterior, DiscreteJoint, GapConfig, LinearGaussianModel, Observation};
use m2vae::rng::RngStream;
use m2vae::tensor::Tensor;
use m2vae::train::{smoothed_objective, train, TrainConfig};

type Outcome = Result<String, String>;

fn report(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let mut outcome = f();
    let elapsed = start.elapsed();
    if let (Ok(_), Some(limit)) = (&outcome, limit) {
        if elapsed > limit {
            outcome = Err(format!("took {elapsed:.2?}, limit {limit:?}"));
        }
    }
    match &outcome {
        Ok(detail) => println!("PASS [{id}] {name}: {detail} ({elapsed:.2?})"),
        Err(detail) => println!("FAIL [{id}] {name}: {detail} ({elapsed:.2?})"),
    }
    if let Err(detail) = outcome {
        panic!("criterion {id} failed: {detail}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn r(n: i64, d: i64) -> Rational {
    Rational::new(n, d)
}

fn set(names: &[&str]) -> ModalitySet {
    ModalitySet::gaussian(names, 2, 2).unwrap()
}

fn mask(m: u32) -> Subset {
    Subset::from_mask(m)
}

fn seconds(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn random_batch(ms: &ModalitySet, n: usize, rng: &mut RngStream) -> Batch<f64> {
    ms.modalities().iter().map(|m| (m.name.clone(), Tensor::matrix(n, m.data_dim, rng.normals(n * m.data_dim)).unwrap())).collect()
}

#[test]
fn criterion_1_compiler_golden() {
    report(1, "compiler golden expansions", seconds(1), || {
        let ms = set(&["a", "b"]);
        let (a, b, ab) = (mask(1), mask(2), mask(3));
        let half = r(1, 2);
        let golden: BTreeSet<(TermKind, Rational)> = [
            TermKind::Recon { subset: a, target: 0 },
            TermKind::PriorKl { subset: a },
            TermKind::Recon { subset: b, target: 1 },
            TermKind::PriorKl { subset: b },
            TermKind::Recon { subset: ab, target: 0 },
            TermKind::Recon { subset: ab, target: 1 },
            TermKind::PriorKl { subset: ab },
            TermKind::CrossKl { subset: ab, dropped: 0 },
            TermKind::CrossKl { subset: ab, dropped: 1 },
        ]
        .into_iter()
        .map(|k| (k, half))
        .collect();
        let got: BTreeSet<(TermKind, Rational)> = expand_m2vae(&ms).map_err(e)?.terms().iter().map(|t| (t.kind, t.coeff)).collect();
        check(got == golden, || format!("bimodal expansion differs: {got:?}"))?;

        // Trimodal: per subset, recon of each member, prior KL, cross KL per member (|S| ≥ 2).
        let ms3 = set(&["a", "b", "c"]);
        let mut golden3 = BTreeSet::new();
        for m in 1u32..8 {
            let s = mask(m);
            let c = match s.len() {
                3 => r(1, 3),
                2 => r(1, 6),
                _ => r(1, 3),
            };
            for i in s.members() {
                golden3.insert((TermKind::Recon { subset: s, target: i }, c));
                if s.len() >= 2 {
                    golden3.insert((TermKind::CrossKl { subset: s, dropped: i }, c));
                }
            }
            golden3.insert((TermKind::PriorKl { subset: s }, c));
        }
        let got3: BTreeSet<(TermKind, Rational)> = expand_m2vae(&ms3).map_err(e)?.terms().iter().map(|t| (t.kind, t.coeff)).collect();
        check(got3.len() == 28 && got3 == golden3, || format!("trimodal expansion differs ({} terms)", got3.len()))?;
        Ok("{a,b}: 9 terms at 1/2; {a,b,c}: 28 terms at 1/3, 1/6, 1/3".into())
    });
}

fn factorial(n: usize) -> i64 {
    (1..=n as i64).product()
}

#[test]
fn criterion_2_recursion_oracle() {
    report(2, "recursion oracle N = 1..6", seconds(10), || {
        let names = ["a", "b", "c", "d", "e", "f"];
        let mut compared = 0;
        for n in 1..=6 {
            let ms = set(&names[..n]);
            let closed = expand_m2vae(&ms).map_err(e)?;
            let brute = expand_m2vae_bruteforce(&ms).map_err(e)?;
            check(closed.terms() == brute.terms(), || format!("N={n}: closed form and brute force differ"))?;
            compared += closed.terms().len();
            for k in 1..=n {
                let want = r(factorial(n - k) * factorial(k - 1), factorial(n));
                let got = coefficient(k, n).map_err(e)?;
                check(got == want, || format!("coefficient({k},{n}) = {got}, want {want}"))?;
                for t in closed.terms().iter().filter(|t| t.kind.subset().len() == k) {
                    check(t.coeff == want, || format!("N={n}: {:?} has {}", t.kind, t.coeff))?;
                }
            }
        }
        Ok(format!("{compared} terms equal; (N−k)!(k−1)!/N! for all k ≤ N ≤ 6"))
    });
}

#[test]
fn criterion_3_jmvae_structure() {
    report(3, "JMVAE structure", None, || {
        let ms = set(&["a", "b"]);
        let ab = mask(3);
        let one = r(1, 1);
        let golden: BTreeSet<(TermKind, Rational)> = [
            TermKind::Recon { subset: ab, target: 0 },
            TermKind::Recon { subset: ab, target: 1 },
            TermKind::PriorKl { subset: ab },
            TermKind::CrossKl { subset: ab, dropped: 0 },
            TermKind::CrossKl { subset: ab, dropped: 1 },
        ]
        .into_iter()
        .map(|k| (k, one))
        .collect();
        let got: BTreeSet<(TermKind, Rational)> = expand_jmvae(&ms).map_err(e)?.terms().iter().map(|t| (t.kind, t.coeff)).collect();
        check(got == golden, || format!("bimodal JMVAE differs: {got:?}"))?;

        let ms3 = set(&["a", "b", "c"]);
        let expr = expand_jmvae3_style(&ms3).map_err(e)?;
        let inventory = expr.encoder_inventory();
        check(inventory.iter().all(|s| s.len() >= 2), || format!("singleton encoder in {inventory:?}"))?;
        let mut bundle = ModelBundle::new(expr, Architecture::mlp(8, 1, Activation::Tanh));
        bundle.init_params(3);
        let data = random_batch(&ms3, 5, &mut RngStream::new(3));
        for i in 0..3 {
            for t in 0..3 {
                let err = evaluate_cross_modal(&bundle, &data, Subset::singleton(i), t);
                check(matches!(&err, Err(m2vae::net::ModelError::EncoderNotInInventory(_))), || format!("source {i} → {t}: {err:?}"))?;
            }
        }
        let pair = evaluate_cross_modal(&bundle, &data, mask(0b011), 2).map_err(e)?;
        check(pair.is_finite(), || "pair source failed".into())?;
        Ok(format!("5 terms at 1; trimodal inventory of {} non-singleton encoders; singleton sources rejected", inventory.len()))
    });
}

/// Closed-form KL between diagonal Gaussians given means and variances.
fn kl_reference(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> f64 {
    (0..mq.len()).map(|i| 0.5 * ((vp[i] / vq[i]).ln() + (vq[i] + (mq[i] - mp[i]).powi(2)) / vp[i] - 1.0)).sum()
}

#[test]
fn criterion_4_gaussian_kl() {
    report(4, "Gaussian KL closed form vs Monte Carlo", seconds(30), || {
        let mut rng = RngStream::new(4);
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let dim = 1 + rng.below(4);
            let mq: Vec<f64> = rng.normals(dim);
            let mp: Vec<f64> = rng.normals(dim);
            let lq: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let lp: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let q = DiagGaussian::new(mq.clone(), lq.clone()).map_err(e)?;
            let p = DiagGaussian::new(mp.clone(), lp.clone()).map_err(e)?;
            let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
            let reference = kl_reference(&mq, &exp(&lq), &mp, &exp(&lp));
            let closed = kl_gaussian(&q, &p).map_err(e)?;
            check((closed - reference).abs() <= 1e-12 * reference.max(1.0), || format!("pair {i}: closed {closed}, reference {reference}"))?;
            let mc = mc_kl(&q, &p, 100_000, &mut rng).map_err(e)?;
            let z = (mc.estimate - closed).abs() / mc.std_error;
            worst = worst.max(z);
            check(z <= 4.0, || format!("pair {i}: closed {closed}, MC {} ± {}", mc.estimate, mc.std_error))?;
        }
        let unit: f64 = kl_gaussian(&DiagGaussian::new(vec![1.0], vec![0.0]).map_err(e)?, &DiagGaussian::standard(1)).map_err(e)?;
        check((unit - 0.5).abs() <= 1e-12, || format!("KL(N(1,1) ‖ N(0,1)) = {unit}"))?;
        Ok(format!("200 pairs within 4 SE (worst {worst:.2}); unit shift {unit}"))
    });
}

#[test]
fn criterion_5_gradient_fidelity() {
    report(5, "gradient fidelity", seconds(60), || {
        let ms = set(&["a", "b"]);
        let rng = RngStream::new(5);
        let mut tanh = ModelBundle::new(expand_m2vae(&ms).map_err(e)?, Architecture::mlp(64, 2, Activation::Tanh));
        tanh.init_params(rng.split(1).seed());
        let batch = random_batch(&ms, 8, &mut rng.split(2));
        let cfg = GradCheckConfig { coords: 1000, seed: rng.split(3).seed(), tolerance: 1e-4, ..Default::default() };
        let deep = grad_check(&tanh, &batch, &cfg).map_err(e)?;
        check(deep.checked.len() >= 1000, || format!("only {} coordinates", deep.checked.len()))?;
        check(deep.max_rel_err < 1e-4, || format!("tanh max relative error {:e}", deep.max_rel_err))?;

        let mut linear = ModelBundle::new(expand_m2vae(&ms).map_err(e)?, Architecture::linear());
        linear.init_params(rng.split(4).seed());
        let cfg = GradCheckConfig { coords: 1000, seed: rng.split(5).seed(), tolerance: 1e-6, ..Default::default() };
        let smooth = grad_check(&linear, &batch, &cfg).map_err(e)?;
        check(smooth.max_rel_err < 1e-6, || format!("linear max relative error {:e}", smooth.max_rel_err))?;
        Ok(format!(
            "tanh: {} coords, max rel {:.2e}; linear: {} coords, max rel {:.2e}",
            deep.checked.len(),
            deep.max_rel_err,
            smooth.checked.len(),
            smooth.max_rel_err
        ))
    });
}

/// Log density of a 1-latent, 2-modality scalar model, from its 2×2 covariance.
fn exact_bimodal_log_likelihood(model: &LinearGaussianModel, obs: &Observation) -> f64 {
    let [ea, eb] = model.emissions() else { unreachable!() };
    let (wa, wb) = (ea.weight[0][0], eb.weight[0][0]);
    let (s11, s22, s12) = (wa * wa + ea.noise_var, wb * wb + eb.noise_var, wa * wb);
    let (da, db) = (obs[&ea.name][0] - ea.bias[0], obs[&eb.name][0] - eb.bias[0]);
    let det = s11 * s22 - s12 * s12;
    let quad = (s22 * da * da - 2.0 * s12 * da * db + s11 * db * db) / det;
    -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad
}

#[test]
fn criterion_6_bound_witness() {
    report(6, "ELBO bound witness", seconds(60), || {
        let mut rng = RngStream::new(6);
        let model = LinearGaussianModel::random(&[("a", 1), ("b", 1)], 1, 1.0, 0.5, &mut rng).map_err(e)?;
        let (_, sample) = model.sample(1, &mut rng);
        let obs: Observation = sample.into_iter().map(|(k, v)| (k, v.into_data())).collect();
        let reference = exact_bimodal_log_likelihood(&model, &obs);
        let exact = model.exact_log_likelihood(&obs).map_err(e)?;
        check((exact - reference).abs() < 1e-12, || format!("exact {exact}, reference {reference}"))?;

        let ms = model.modality_set().map_err(e)?;
        let expr = expand_joint(&ms).map_err(e)?;
        let arch = Architecture { encoder_hidden: vec![8], decoder_hidden: vec![], activation: Activation::Tanh };
        let mut smallest = f64::INFINITY;
        for i in 0..100 {
            let mut bundle = ModelBundle::new(expr.clone(), arch.clone());
            bundle.init_params(rng.split(100 + i).seed());
            let g = elbo_gap(&model, &bundle, &obs, GapConfig { samples: 2_000, seed: rng.split(300 + i).seed(), source: None }).map_err(e)?;
            check((g.exact - reference).abs() < 1e-12, || "gap uses a different log-likelihood".into())?;
            check(g.elbo <= reference + 3.0 * g.elbo_std_error, || format!("encoder {i}: ELBO {} ± {} above {reference}", g.elbo, g.elbo_std_error))?;
            smallest = smallest.min(g.gap / g.elbo_std_error);
        }

        let mut truth = ModelBundle::new(expr, Architecture::linear());
        install_true_posterior(&mut truth, &model, ms.full()).map_err(e)?;
        let g = elbo_gap(&model, &truth, &obs, GapConfig { samples: 10_000, seed: rng.split(1).seed(), source: None }).map_err(e)?;
        check((g.elbo - reference).abs() <= 3.0 * g.elbo_std_error, || format!("true posterior gap {} ± {}", reference - g.elbo, g.elbo_std_error))?;
        Ok(format!(
            "100 random encoders below log p = {reference:.6} (closest {smallest:.1} SE); true posterior gap {:.1e} ± {:.1e}",
            reference - g.elbo,
            g.elbo_std_error
        ))
    });
}

#[test]
fn criterion_7_training_sanity() {
    report(7, "training sanity", seconds(300), || {
        let config = TrainConfig {
            variant: "m2vae".into(),
            latent_dim: 2,
            steps: Some(2_000),
            seed: 5,
            eval_every: 0,
            synthetic: Some(SyntheticSpec::shared_latent_linear(&[("a", 3), ("b", 3)], 2, 0.1, 2_000, 11)),
            ..Default::default()
        };
        let data = config.dataset().map_err(e)?;
        check(data.rows() == 2_000, || format!("{} rows", data.rows()))?;
        let out = train(&config, &data).map_err(e)?;
        check(out.rows.len() == 2_000, || format!("{} steps", out.rows.len()))?;
        let smooth = smoothed_objective(&out.rows, 50);
        let (first, last) = (smooth[0], *smooth.last().unwrap());
        check(last > first, || format!("smoothed objective {first} → {last}"))?;
        let (a, b) = (Subset::singleton(0), 1);
        let before = out.eval_of(&out.initial_eval, a, b).ok_or("no {a}→b column")?;
        let after = out.eval_of(&out.final_eval, a, b).ok_or("no {a}→b column")?;
        check(after * 2.0 <= before, || format!("{{a}}→b error {before} → {after}"))?;
        Ok(format!("smoothed objective {first:.3} → {last:.3}; {{a}}→b MSE {before:.3} → {after:.3} ({:.1}×)", before / after))
    });
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[test]
fn criterion_8_vi_identities() {
    report(8, "variation of information identities", None, || {
        let mut rng = RngStream::new(8);
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let (na, nb) = (2 + rng.below(4), 2 + rng.below(4));
            let j = DiscreteJoint::random(vec![na, nb], &mut rng).map_err(e)?;
            let p = j.probs();
            let pa: Vec<f64> = (0..na).map(|x| (0..nb).map(|y| p[x * nb + y]).sum()).collect();
            let pb: Vec<f64> = (0..nb).map(|y| (0..na).map(|x| p[x * nb + y]).sum()).collect();
            let (h, ha, hb) = (entropy_of(p), entropy_of(&pa), entropy_of(&pb));
            let reference = 2.0 * h - ha - hb;
            let h_form = j.vi_entropy_form().map_err(e)?;
            let c_form = j.vi_conditional_form().map_err(e)?;
            worst = worst.max((h_form - c_form).abs());
            check((h_form - c_form).abs() <= 1e-12, || format!("joint {i}: forms {h_form} and {c_form}"))?;
            check((h_form - reference).abs() <= 1e-12, || format!("joint {i}: {h_form}, reference {reference}"))?;
        }
        let bits = DiscreteJoint::independent(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).map_err(e)?;
        let v3 = bits.variation_of_information().map_err(e)?;
        check((v3 - 3.0 * LN_2).abs() <= 1e-12, || format!("three bits: {v3}"))?;
        Ok(format!("100 joints, forms agree to {worst:.1e}; three independent bits {v3:.15} = 3 ln 2"))
    });
}

#[test]
fn criterion_9_determinism() {
    report(9, "deterministic training", None, || {
        let dir = tempfile::tempdir().map_err(e)?;
        let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
            let config = TrainConfig {
                latent_dim: 2,
                architecture: Architecture::mlp(8, 1, Activation::Tanh),
                batch_size: 16,
                steps: Some(60),
                seed: 9,
                eval_every: 20,
                synthetic: Some(SyntheticSpec::shared_latent_linear(&[("a", 2), ("b", 3)], 2, 0.1, 200, 9)),
                checkpoint: Some(dir.path().join(format!("{tag}.json"))),
                metrics: Some(dir.path().join(format!("{tag}.csv"))),
                ..Default::default()
            };
            let data = config.dataset().map_err(e)?;
            train(&config, &data).map_err(e)?;
            let ck = fs::read(config.checkpoint.as_ref().unwrap()).map_err(e)?;
            let metrics = fs::read(config.metrics.as_ref().unwrap()).map_err(e)?;
            Ok((ck, metrics))
        };
        let (ck1, m1) = run("first")?;
        let (ck2, m2) = run("second")?;
        check(m1 == m2, || "metrics differ".into())?;
        check(ck1 == ck2, || "checkpoints differ".into())?;
        Ok(format!("metrics ({} bytes) and checkpoint ({} bytes) byte-identical", m1.len(), ck1.len()))
    });
}
