//! Cross-modal reconstruction error: encode a source subset, take the
//! posterior mean, decode a target modality.

use serde::Serialize;

use crate::autodiff::Tape;
use crate::compiler::{Likelihood, Subset};
use crate::distributions::softplus;
use crate::net::{Batch, DecoderOutput, ModelBundle, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// Mean squared error of the decoder mean, per element.
    Mse,
    /// Binary cross-entropy of the decoder logits in nats, per element.
    CrossEntropy,
}

impl ErrorMetric {
    pub fn for_likelihood(l: Likelihood) -> Self {
        match l {
            Likelihood::DiagGaussian => ErrorMetric::Mse,
            Likelihood::BernoulliLogits => ErrorMetric::CrossEntropy,
        }
    }
}

/// Error of predicting `target` from the `source` modalities on `data`.
/// Fails with [`ModelError::EncoderNotInInventory`] when the bundle has no
/// encoder for `source`.
pub fn evaluate_cross_modal(bundle: &ModelBundle<f64>, data: &Batch<f64>, source: Subset, target: usize) -> Result<f64, ModelError> {
    let ms = bundle.expression().modality_set();
    let n = bundle.check_batch(data)?;
    let mut tape = Tape::new();
    let (mean, _) = bundle.encode(&mut tape, source, data)?;
    let truth = &data[&ms.get(target).name];
    let out = bundle.decode(&mut tape, target, mean)?;
    let count = (n * truth.cols()) as f64;
    Ok(match out {
        DecoderOutput::Gaussian { mean, .. } => {
            tape.value(mean).data().iter().zip(truth.data()).map(|(p, x)| (p - x).powi(2)).sum::<f64>() / count
        }
        DecoderOutput::Logits(l) => {
            tape.value(l).data().iter().zip(truth.data()).map(|(&l, &x)| softplus(l) - x * l).sum::<f64>() / count
        }
    })
}

/// Column label of one (source, target) pair, e.g. `xmod:a+b>c`.
pub fn pair_label(bundle: &ModelBundle<f64>, source: Subset, target: usize) -> String {
    let ms = bundle.expression().modality_set();
    format!("xmod:{}>{}", ms.subset_label(source, "+"), ms.get(target).name)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossModalEntry {
    pub source: Vec<String>,
    pub target: String,
    pub metric: ErrorMetric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Every nonempty source subset against every decodable target; pairs
/// without an encoder carry the inventory error instead of a value.
pub fn cross_modal_report(bundle: &ModelBundle<f64>, data: &Batch<f64>) -> Result<Vec<CrossModalEntry>, ModelError> {
    bundle.check_batch(data)?;
    let ms = bundle.expression().modality_set();
    let mut out = Vec::new();
    for source in ms.nonempty_subsets() {
        for &target in bundle.decoders().keys() {
            let m = ms.get(target);
            let (value, error) = match evaluate_cross_modal(bundle, data, source, target) {
                Ok(v) => (Some(v), None),
                Err(e @ ModelError::EncoderNotInInventory(_)) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            out.push(CrossModalEntry {
                source: ms.subset_names(source).into_iter().map(String::from).collect(),
                target: m.name.clone(),
                metric: ErrorMetric::for_likelihood(m.likelihood),
                value,
                error,
            });
        }
    }
    Ok(out)
}
