//! Text, LaTeX and JSON rendering of loss expressions, and JSON parsing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LossExpression, Modality, ModalitySet, Rational, Subset, TermKind, Variant};
use super::Likelihood;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Text,
    Json,
    Latex,
}

impl RenderFormat {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "text" => Some(RenderFormat::Text),
            "json" => Some(RenderFormat::Json),
            "latex" => Some(RenderFormat::Latex),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpressionParseError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid expression: {0}")]
    Semantic(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ExpressionWire {
    variant: String,
    modalities: Vec<ModalityWire>,
    latent_dim: usize,
    terms: Vec<TermWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityWire {
    name: String,
    dim: usize,
    likelihood: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermWire {
    kind: String,
    subset: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dropped: Option<String>,
    coeff: String,
}

pub fn render(expr: &LossExpression, format: RenderFormat) -> String {
    match format {
        RenderFormat::Text => render_text(expr),
        RenderFormat::Latex => render_latex(expr),
        RenderFormat::Json => {
            serde_json::to_string_pretty(&to_wire(expr)).expect("expression serializes")
        }
    }
}

fn render_text(expr: &LossExpression) -> String {
    let ms = expr.modality_set();
    let posterior = |s: Subset| format!("q(z|{})", ms.subset_label(s, ","));
    expr.terms()
        .iter()
        .map(|t| {
            let sign = if t.kind.sign() > 0 { '+' } else { '\u{2212}' };
            let body = match t.kind {
                TermKind::Recon { subset, target } => {
                    let lik = format!("log p({}|z)", ms.get(target).name);
                    if subset == Subset::singleton(target) {
                        format!("E[{lik}]")
                    } else {
                        format!("E_{}[{lik}]", posterior(subset))
                    }
                }
                TermKind::PriorKl { subset } => format!("KL({}\u{2016}p(z))", posterior(subset)),
                TermKind::CrossKl { subset, dropped } => {
                    format!("KL({}\u{2016}{})", posterior(subset), posterior(subset.without(dropped)))
                }
            };
            format!("{sign}{}\u{b7}{body}", t.coeff)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn latex_name(name: &str) -> String {
    name.replace('_', "\\_")
}

fn render_latex(expr: &LossExpression) -> String {
    let ms = expr.modality_set();
    let args = |s: Subset| {
        s.members().map(|i| latex_name(&ms.get(i).name)).collect::<Vec<_>>().join(",")
    };
    let q = |s: Subset| format!("q_{{\\phi_{{{}}}}}(z \\mid {})", args(s).replace(',', ""), args(s));
    let terms: Vec<String> = expr
        .terms()
        .iter()
        .map(|t| {
            let sign = if t.kind.sign() > 0 { "+" } else { "-" };
            let coeff = if *t.coeff.denom() == 1 {
                if *t.coeff.numer() == 1 { String::new() } else { format!("{}\\,", t.coeff.numer()) }
            } else {
                format!("\\tfrac{{{}}}{{{}}}\\,", t.coeff.numer(), t.coeff.denom())
            };
            let body = match t.kind {
                TermKind::Recon { subset, target } => {
                    let m = latex_name(&ms.get(target).name);
                    format!("\\mathbb{{E}}_{{{}}}\\left[\\log p_{{\\theta_{{{m}}}}}({m} \\mid z)\\right]", q(subset))
                }
                TermKind::PriorKl { subset } => format!("D_{{KL}}\\left({} \\,\\|\\, p(z)\\right)", q(subset)),
                TermKind::CrossKl { subset, dropped } => {
                    format!("D_{{KL}}\\left({} \\,\\|\\, {}\\right)", q(subset), q(subset.without(dropped)))
                }
            };
            format!("{sign} {coeff}{body}")
        })
        .collect();
    format!("\\mathcal{{L}}_{{\\text{{{}}}}} = {}", expr.variant().tag().replace('_', "\\_"), terms.join(" "))
}

fn format_coeff(c: Rational) -> String {
    format!("{}/{}", c.numer(), c.denom())
}

pub(crate) fn to_wire(expr: &LossExpression) -> ExpressionWire {
    let ms = expr.modality_set();
    let names = |s: Subset| ms.subset_names(s).into_iter().map(str::to_string).collect();
    ExpressionWire {
        variant: expr.variant().tag().to_string(),
        modalities: ms
            .modalities()
            .iter()
            .map(|m| ModalityWire { name: m.name.clone(), dim: m.data_dim, likelihood: m.likelihood.tag().to_string() })
            .collect(),
        latent_dim: ms.latent_dim(),
        terms: expr
            .terms()
            .iter()
            .map(|t| {
                let (target, dropped) = match t.kind {
                    TermKind::Recon { target, .. } => (Some(ms.get(target).name.clone()), None),
                    TermKind::PriorKl { .. } => (None, None),
                    TermKind::CrossKl { dropped, .. } => (None, Some(ms.get(dropped).name.clone())),
                };
                TermWire { kind: t.kind.tag().to_string(), subset: names(t.kind.subset()), target, dropped, coeff: format_coeff(t.coeff) }
            })
            .collect(),
    }
}

fn parse_coeff(s: &str) -> Result<Rational, ExpressionParseError> {
    let bad = || ExpressionParseError::Semantic(format!("malformed coefficient {s:?}, expected \"p/q\""));
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim().parse::<i64>().map_err(|_| bad())?, d.trim().parse::<i64>().map_err(|_| bad())?),
        None => (s.trim().parse::<i64>().map_err(|_| bad())?, 1),
    };
    if d == 0 {
        return Err(bad());
    }
    let c = Rational::new(n, d);
    if c <= Rational::from_integer(0) {
        return Err(ExpressionParseError::Semantic(format!("coefficient {s:?} must be positive")));
    }
    Ok(c)
}

pub(crate) fn from_wire(wire: ExpressionWire) -> Result<LossExpression, ExpressionParseError> {
    let sem = |m: String| ExpressionParseError::Semantic(m);
    let variant = Variant::from_tag(&wire.variant).ok_or_else(|| sem(format!("unknown variant {:?}", wire.variant)))?;
    let mods = wire
        .modalities
        .into_iter()
        .map(|m| {
            let lik = Likelihood::from_tag(&m.likelihood).ok_or_else(|| sem(format!("unknown likelihood {:?}", m.likelihood)))?;
            Ok(Modality::new(m.name, m.dim, lik))
        })
        .collect::<Result<Vec<_>, ExpressionParseError>>()?;
    let ms = ModalitySet::new(mods, wire.latent_dim).map_err(|e| sem(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    let mut terms = Vec::with_capacity(wire.terms.len());
    for t in wire.terms {
        let subset = ms.subset_of(&t.subset).map_err(|e| sem(e.to_string()))?;
        let index = |field: &str, v: Option<String>| -> Result<usize, ExpressionParseError> {
            let name = v.ok_or_else(|| sem(format!("{} term needs a {field:?} field", t.kind)))?;
            ms.index_of(&name).ok_or_else(|| sem(format!("unknown modality {name:?}")))
        };
        let kind = match t.kind.as_str() {
            "recon" if t.dropped.is_none() => TermKind::Recon { subset, target: index("target", t.target.clone())? },
            "prior_kl" if t.target.is_none() && t.dropped.is_none() => TermKind::PriorKl { subset },
            "cross_kl" if t.target.is_none() => TermKind::CrossKl { subset, dropped: index("dropped", t.dropped.clone())? },
            "recon" | "prior_kl" | "cross_kl" => return Err(sem(format!("unexpected field on {} term", t.kind))),
            other => return Err(sem(format!("unknown term kind {other:?}"))),
        };
        if !seen.insert(kind) {
            return Err(sem(format!("duplicate term {}", kind.label(&ms))));
        }
        terms.push((kind, parse_coeff(&t.coeff)?));
    }
    LossExpression::from_terms(variant, ms, terms).map_err(|e| sem(e.to_string()))
}

/// Parses the JSON form produced by [`render`] with [`RenderFormat::Json`].
pub fn parse_expression(text: &str) -> Result<LossExpression, ExpressionParseError> {
    let wire: ExpressionWire = serde_json::from_str(text).map_err(|e| ExpressionParseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    from_wire(wire)
}

impl LossExpression {
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(to_wire(self)).expect("expression serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self, ExpressionParseError> {
        let wire: ExpressionWire = serde_json::from_value(value)
            .map_err(|e| ExpressionParseError::Syntax { line: e.line(), column: e.column(), message: e.to_string() })?;
        from_wire(wire)
    }
}
