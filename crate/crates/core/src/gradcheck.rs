//! Reverse-mode gradients versus central finite differences.

use crate::net::{draw_noise, forward_objective_with_noise, Batch, ModelBundle, ModelError, Noise, ObjectiveOptions};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Number of distinct parameter coordinates; all of them if larger than the store.
    pub coords: usize,
    /// Finite-difference step.
    pub h: f64,
    pub seed: u64,
    /// Relative error above which a coordinate is reported as a failure.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that vanish
    /// analytically are judged on absolute error.
    pub floor: f64,
    pub options: ObjectiveOptions,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            coords: 1000,
            h: 1e-5,
            seed: 0,
            tolerance: 1e-4,
            floor: DEFAULT_FLOOR,
            options: ObjectiveOptions::default(),
        }
    }
}

/// Denominator floor used unless configured otherwise.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    /// Flat index into the parameter store.
    pub flat: usize,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Coordinates compared (near-kink ones excluded).
    pub checked: Vec<CoordCheck>,
    /// Coordinates whose ±h evaluations straddle a relu or clamp kink.
    pub near_kink: Vec<usize>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checked.iter().filter(move |c| !(c.rel_err < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

fn evaluate(bundle: &ModelBundle<f64>, batch: &Batch<f64>, noise: &Noise<f64>, options: ObjectiveOptions) -> Result<(f64, u64), ModelError> {
    let pass = forward_objective_with_noise(bundle, batch, noise, options)?;
    Ok((pass.value(), pass.tape.kink_signature()))
}

/// Compares backward to central differences at randomly chosen coordinates.
/// The noise is drawn once from `seed`, so the sampled objective is a
/// deterministic function of the parameters.
pub fn grad_check(bundle: &ModelBundle<f64>, batch: &Batch<f64>, config: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let rows = bundle.check_batch(batch)?;
    let root = RngStream::new(config.seed);
    let noise = draw_noise(bundle.expression(), rows, config.options.mc_samples, &mut root.split(1));
    let pass = forward_objective_with_noise(bundle, batch, &noise, config.options)?;
    let grads = pass.tape.backward(pass.objective, bundle.store());
    let base_signature = pass.tape.kink_signature();

    let total = bundle.store().scalar_count();
    let mut coords = if config.coords >= total {
        (0..total).collect()
    } else {
        root.split(2).sample_indices(total, config.coords)
    };
    coords.sort_unstable();

    let mut work = bundle.clone();
    let mut checked = Vec::with_capacity(coords.len());
    let mut near_kink = Vec::new();
    for flat in coords {
        let (id, offset) = work.store().locate(flat).expect("coordinate within store");
        let original = work.store().value(id).data()[offset];
        work.store_mut().value_mut(id).data_mut()[offset] = original + config.h;
        let (plus, sig_plus) = evaluate(&work, batch, &noise, config.options)?;
        work.store_mut().value_mut(id).data_mut()[offset] = original - config.h;
        let (minus, sig_minus) = evaluate(&work, batch, &noise, config.options)?;
        work.store_mut().value_mut(id).data_mut()[offset] = original;
        if sig_plus != base_signature || sig_minus != base_signature {
            near_kink.push(flat);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * config.h);
        let analytic = grads.get(id).data()[offset];
        let abs_err = (analytic - numeric).abs();
        let rel_err = abs_err / analytic.abs().max(numeric.abs()).max(config.floor);
        checked.push(CoordCheck { flat, param: work.store().get(id).name.clone(), analytic, numeric, abs_err, rel_err });
    }
    let max_rel_err = checked.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let max_abs_err = checked.iter().map(|c| c.abs_err).fold(0.0, f64::max);
    Ok(GradCheckReport { checked, near_kink, max_rel_err, max_abs_err, tolerance: config.tolerance })
}
