//! ELBO term compiler.
//!
//! Expands the marginal log-likelihood bound of a modality set into a
//! canonical multiset of weighted loss terms. Four objective families are
//! supported:
//!
//! * `Vanilla`: one modality, prior KL plus reconstruction.
//! * `Joint`: one joint encoder over all modalities, one decoder per modality.
//! * `Jmvae` / `Jmvae3Style`: the joint objective plus KL terms pulling the
//!   joint posterior toward the posteriors of the sets with one modality removed.
//! * `M2vae`: the recursive objective that averages the variation-of-information
//!   bound over the whole subset lattice, `L(S) = (L_VI(S) + Σ_m L(S∖m)) / |S|`,
//!   terminating in vanilla bounds for singletons.
//!
//! Coefficients are exact rationals. Every term carries a positive coefficient
//! and its kind fixes the sign in the assembled objective.

mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use render::{parse_expression, render, ExpressionParseError, RenderFormat};

/// Exact coefficient type. Always kept in lowest terms.
pub type Rational = num_rational::Rational64;

/// Largest modality set accepted by [`ModalitySet::new`] (subset masks are `u32`).
pub const MAX_MODALITIES: usize = 16;
/// Largest modality set the closed-form M²VAE expansion accepts.
pub const MAX_M2VAE_MODALITIES: usize = 12;
/// Largest modality set the recursive reference expansion accepts.
pub const MAX_BRUTEFORCE_MODALITIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("modality set is empty")]
    EmptyModalitySet,
    #[error("invalid modality name {0:?}: use ASCII letters, digits, '_' or '-'")]
    InvalidName(String),
    #[error("duplicate modality name {0:?}")]
    DuplicateModality(String),
    #[error("modality {0:?} has zero data dimension")]
    ZeroDataDim(String),
    #[error("latent dimension must be positive")]
    ZeroLatentDim,
    #[error("{got} modalities exceeds the supported maximum of {max}")]
    TooManyModalities { got: usize, max: usize },
    #[error("{variant} objective requires {expected} modalities, got {got}")]
    ModalityCount { variant: Variant, expected: &'static str, got: usize },
    #[error("coefficient requires 1 <= k <= n <= {MAX_M2VAE_MODALITIES}, got k={k}, n={n}")]
    CoefficientDomain { k: usize, n: usize },
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("invalid term: {0}")]
    InvalidTerm(String),
    #[error("coefficient of {0} must be positive")]
    NonPositiveCoefficient(String),
}

/// Likelihood family of a modality's decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Likelihood {
    BernoulliLogits,
    DiagGaussian,
}

impl Likelihood {
    pub fn tag(self) -> &'static str {
        match self {
            Likelihood::BernoulliLogits => "bern",
            Likelihood::DiagGaussian => "gauss",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "bern" | "bernoulli" => Some(Likelihood::BernoulliLogits),
            "gauss" | "gaussian" => Some(Likelihood::DiagGaussian),
            _ => None,
        }
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Modality {
    pub name: String,
    pub data_dim: usize,
    pub likelihood: Likelihood,
}

impl Modality {
    pub fn new(name: impl Into<String>, data_dim: usize, likelihood: Likelihood) -> Self {
        Modality { name: name.into(), data_dim, likelihood }
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Modalities in canonical (lexicographic by name) order plus the latent width.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModalitySet {
    modalities: Vec<Modality>,
    latent_dim: usize,
}

impl ModalitySet {
    pub fn new(mut modalities: Vec<Modality>, latent_dim: usize) -> Result<Self, CompileError> {
        if modalities.is_empty() {
            return Err(CompileError::EmptyModalitySet);
        }
        if modalities.len() > MAX_MODALITIES {
            return Err(CompileError::TooManyModalities { got: modalities.len(), max: MAX_MODALITIES });
        }
        if latent_dim == 0 {
            return Err(CompileError::ZeroLatentDim);
        }
        for m in &modalities {
            if !valid_name(&m.name) {
                return Err(CompileError::InvalidName(m.name.clone()));
            }
            if m.data_dim == 0 {
                return Err(CompileError::ZeroDataDim(m.name.clone()));
            }
        }
        modalities.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = modalities.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(CompileError::DuplicateModality(w[0].name.clone()));
        }
        Ok(ModalitySet { modalities, latent_dim })
    }

    /// Convenience constructor: Gaussian modalities of the given dimension.
    pub fn gaussian(names: &[&str], data_dim: usize, latent_dim: usize) -> Result<Self, CompileError> {
        let mods = names.iter().map(|n| Modality::new(*n, data_dim, Likelihood::DiagGaussian)).collect();
        Self::new(mods, latent_dim)
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn get(&self, index: usize) -> &Modality {
        &self.modalities[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.modalities.binary_search_by(|m| m.name.as_str().cmp(name)).ok()
    }

    pub fn full(&self) -> Subset {
        Subset::full(self.len())
    }

    pub fn subset_of<S: AsRef<str>>(&self, names: &[S]) -> Result<Subset, CompileError> {
        names.iter().try_fold(Subset::EMPTY, |acc, n| {
            let n = n.as_ref();
            self.index_of(n).map(|i| acc.with(i)).ok_or_else(|| CompileError::UnknownModality(n.to_string()))
        })
    }

    pub fn subset_names(&self, subset: Subset) -> Vec<&str> {
        subset.members().map(|i| self.modalities[i].name.as_str()).collect()
    }

    /// Human readable subset label, members joined by `sep`.
    pub fn subset_label(&self, subset: Subset, sep: &str) -> String {
        self.subset_names(subset).join(sep)
    }

    /// All nonempty subsets ordered by mask.
    pub fn nonempty_subsets(&self) -> impl Iterator<Item = Subset> {
        (1..(1u32 << self.len())).map(Subset)
    }

    /// Width of the concatenated input of a subset encoder.
    pub fn input_dim(&self, subset: Subset) -> usize {
        subset.members().map(|i| self.modalities[i].data_dim).sum()
    }

    /// Copy with modalities renamed through `rename`; canonical order is recomputed.
    pub fn renamed(&self, rename: impl Fn(&str) -> String) -> Result<Self, CompileError> {
        let mods = self
            .modalities
            .iter()
            .map(|m| Modality { name: rename(&m.name), ..m.clone() })
            .collect();
        Self::new(mods, self.latent_dim)
    }
}

/// Bitmask over the canonical modality order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Subset(u32);

impl Subset {
    pub const EMPTY: Subset = Subset(0);

    pub fn from_mask(mask: u32) -> Self {
        Subset(mask)
    }

    pub fn singleton(index: usize) -> Self {
        Subset(1 << index)
    }

    pub fn full(n: usize) -> Self {
        Subset(((1u64 << n) - 1) as u32)
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, index: usize) -> bool {
        index < 32 && self.0 & (1 << index) != 0
    }

    pub fn with(self, index: usize) -> Self {
        Subset(self.0 | (1 << index))
    }

    pub fn without(self, index: usize) -> Self {
        Subset(self.0 & !(1 << index))
    }

    pub fn is_subset_of(self, other: Subset) -> bool {
        self.0 & !other.0 == 0
    }

    /// Member indices in ascending (canonical) order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.0 & (1 << i) != 0)
    }
}

/// Kind of a compiled loss term. Declaration order is the canonical sort key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermKind {
    /// `E_{q(z|S)} log p(target | z)`, enters the ELBO positively.
    Recon { subset: Subset, target: usize },
    /// `KL(q(z|S) ‖ p(z))`, enters negatively.
    PriorKl { subset: Subset },
    /// `KL(q(z|S) ‖ q(z|S∖dropped))`, enters negatively.
    CrossKl { subset: Subset, dropped: usize },
}

impl TermKind {
    pub fn subset(self) -> Subset {
        match self {
            TermKind::Recon { subset, .. } | TermKind::PriorKl { subset } | TermKind::CrossKl { subset, .. } => subset,
        }
    }

    /// +1 for reconstruction terms, −1 for KL terms.
    pub fn sign(self) -> i32 {
        match self {
            TermKind::Recon { .. } => 1,
            TermKind::PriorKl { .. } | TermKind::CrossKl { .. } => -1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TermKind::Recon { .. } => "recon",
            TermKind::PriorKl { .. } => "prior_kl",
            TermKind::CrossKl { .. } => "cross_kl",
        }
    }

    /// Encoder subset the reference posterior of a cross KL comes from.
    pub fn reference_subset(self) -> Option<Subset> {
        match self {
            TermKind::CrossKl { subset, dropped } => Some(subset.without(dropped)),
            _ => None,
        }
    }

    fn validate(self, n: usize) -> Result<(), String> {
        let subset = self.subset();
        if subset.is_empty() {
            return Err("subset must be nonempty".into());
        }
        if !subset.is_subset_of(Subset::full(n)) {
            return Err("subset references a modality outside the set".into());
        }
        match self {
            TermKind::Recon { target, .. } if !subset.contains(target) => {
                Err("reconstruction target must belong to the subset".into())
            }
            TermKind::CrossKl { .. } if subset.len() < 2 => {
                Err("cross KL needs a subset of at least two modalities".into())
            }
            TermKind::CrossKl { dropped, .. } if !subset.contains(dropped) => {
                Err("dropped modality must belong to the subset".into())
            }
            _ => Ok(()),
        }
    }

    /// Column-style identifier, e.g. `recon:a+b:a`, `cross_kl:a+b:b`.
    pub fn label(self, set: &ModalitySet) -> String {
        let s = set.subset_label(self.subset(), "+");
        match self {
            TermKind::Recon { target, .. } => format!("recon:{s}:{}", set.get(target).name),
            TermKind::PriorKl { .. } => format!("prior_kl:{s}"),
            TermKind::CrossKl { dropped, .. } => format!("cross_kl:{s}:{}", set.get(dropped).name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerm {
    pub kind: TermKind,
    pub coeff: Rational,
}

impl LossTerm {
    /// Signed coefficient as it enters the maximized objective.
    pub fn signed_coeff(&self) -> Rational {
        self.coeff * Rational::from_integer(self.kind.sign() as i64)
    }
}

/// Objective family an expression was compiled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Vanilla,
    Joint,
    Jmvae,
    M2vae,
    Jmvae3Style,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Vanilla, Variant::Joint, Variant::Jmvae, Variant::M2vae, Variant::Jmvae3Style];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Joint => "joint",
            Variant::Jmvae => "jmvae",
            Variant::M2vae => "m2vae",
            Variant::Jmvae3Style => "jmvae3_style",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Canonical, merged, exact-weighted term list for one objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossExpression {
    variant: Variant,
    modalities: ModalitySet,
    terms: Vec<LossTerm>,
}

impl LossExpression {
    /// Builds an expression, merging duplicate kinds by exact addition and
    /// sorting into canonical order.
    pub fn from_terms(
        variant: Variant,
        modalities: ModalitySet,
        terms: impl IntoIterator<Item = (TermKind, Rational)>,
    ) -> Result<Self, CompileError> {
        let mut merged: BTreeMap<TermKind, Rational> = BTreeMap::new();
        for (kind, coeff) in terms {
            kind.validate(modalities.len()).map_err(CompileError::InvalidTerm)?;
            *merged.entry(kind).or_insert_with(|| Rational::from_integer(0)) += coeff;
        }
        let mut out = Vec::with_capacity(merged.len());
        for (kind, coeff) in merged {
            if coeff <= Rational::from_integer(0) {
                return Err(CompileError::NonPositiveCoefficient(kind.label(&modalities)));
            }
            out.push(LossTerm { kind, coeff });
        }
        Ok(LossExpression { variant, modalities, terms: out })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn modality_set(&self) -> &ModalitySet {
        &self.modalities
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    pub fn coefficient_of(&self, kind: TermKind) -> Option<Rational> {
        self.terms.binary_search_by(|t| t.kind.cmp(&kind)).ok().map(|i| self.terms[i].coeff)
    }

    /// Every subset an encoder is needed for, including cross-KL reference subsets.
    pub fn encoder_inventory(&self) -> BTreeSet<Subset> {
        self.terms
            .iter()
            .flat_map(|t| std::iter::once(t.kind.subset()).chain(t.kind.reference_subset()))
            .collect()
    }

    /// Modality indices that need a decoder.
    pub fn decoder_inventory(&self) -> BTreeSet<usize> {
        self.terms
            .iter()
            .filter_map(|t| match t.kind {
                TermKind::Recon { target, .. } => Some(target),
                _ => None,
            })
            .collect()
    }
}

fn one() -> Rational {
    Rational::from_integer(1)
}

/// Terms of the bound on `log p(S)` for a singleton (vanilla) or of the
/// variation-of-information bound `L_J(S) − Σ_m KL(q_S ‖ q_{S∖m})` otherwise.
fn subset_bound_terms(subset: Subset) -> Vec<TermKind> {
    let mut kinds = vec![TermKind::PriorKl { subset }];
    kinds.extend(subset.members().map(|target| TermKind::Recon { subset, target }));
    if subset.len() >= 2 {
        kinds.extend(subset.members().map(|dropped| TermKind::CrossKl { subset, dropped }));
    }
    kinds
}

fn require(variant: Variant, ok: bool, expected: &'static str, got: usize) -> Result<(), CompileError> {
    if ok {
        Ok(())
    } else {
        Err(CompileError::ModalityCount { variant, expected, got })
    }
}

pub fn expand_vanilla(ms: &ModalitySet) -> Result<LossExpression, CompileError> {
    require(Variant::Vanilla, ms.len() == 1, "exactly 1", ms.len())?;
    let s = ms.full();
    LossExpression::from_terms(
        Variant::Vanilla,
        ms.clone(),
        [(TermKind::PriorKl { subset: s }, one()), (TermKind::Recon { subset: s, target: 0 }, one())],
    )
}

fn joint_terms(full: Subset) -> impl Iterator<Item = (TermKind, Rational)> {
    std::iter::once(TermKind::PriorKl { subset: full })
        .chain(full.members().map(move |target| TermKind::Recon { subset: full, target }))
        .map(|k| (k, one()))
}

pub fn expand_joint(ms: &ModalitySet) -> Result<LossExpression, CompileError> {
    require(Variant::Joint, ms.len() >= 2, "at least 2", ms.len())?;
    LossExpression::from_terms(Variant::Joint, ms.clone(), joint_terms(ms.full()))
}

/// Bimodal JMVAE: joint terms plus `KL(q_ab ‖ q_a) + KL(q_ab ‖ q_b)`.
pub fn expand_jmvae(ms: &ModalitySet) -> Result<LossExpression, CompileError> {
    require(Variant::Jmvae, ms.len() == 2, "exactly 2", ms.len())?;
    let full = ms.full();
    let cross = full.members().map(|dropped| (TermKind::CrossKl { subset: full, dropped }, one()));
    LossExpression::from_terms(Variant::Jmvae, ms.clone(), joint_terms(full).chain(cross))
}

/// Trimodal JMVAE: cross KLs reference only the pairwise encoders.
pub fn expand_jmvae3_style(ms: &ModalitySet) -> Result<LossExpression, CompileError> {
    require(Variant::Jmvae3Style, ms.len() == 3, "exactly 3", ms.len())?;
    let full = ms.full();
    let cross = full.members().map(|dropped| (TermKind::CrossKl { subset: full, dropped }, one()));
    LossExpression::from_terms(Variant::Jmvae3Style, ms.clone(), joint_terms(full).chain(cross))
}

fn factorial(n: usize) -> i64 {
    (1..=n as i64).product()
}

/// Closed-form M²VAE weight of every term over a subset of size `k` in a set of
/// size `n`: `(n−k)!·(k−1)!/n!`.
pub fn coefficient(k: usize, n: usize) -> Result<Rational, CompileError> {
    if k < 1 || k > n || n > MAX_M2VAE_MODALITIES {
        return Err(CompileError::CoefficientDomain { k, n });
    }
    Ok(Rational::new(factorial(n - k) * factorial(k - 1), factorial(n)))
}

pub fn expand_m2vae(ms: &ModalitySet) -> Result<LossExpression, CompileError> {
    let n = ms.len();
    if n > MAX_M2VAE_MODALITIES {
        return Err(CompileError::TooManyModalities { got: n, max: MAX_M2VAE_MODALITIES });
    }
    let weights: Vec<Rational> = (1..=n).map(|k| coefficient(k, n)).collect::<Result<_, _>>()?;
    let terms = ms.nonempty_subsets().flat_map(|s| {
        let w = weights[s.len() - 1];
        subset_bound_terms(s).into_iter().map(move |k| (k, w))
    });
    LossExpression::from_terms(Variant::M2vae, ms.clone(), terms)
}

/// Literal evaluation of the M²VAE recursion: each level scales by `1/|S|` and
/// recurses into every `S∖m`; repeated subsets merge by exact addition.
pub fn expand_m2vae_bruteforce(ms: &ModalitySet) -> Result<LossExpression, CompileError> {
    if ms.len() > MAX_BRUTEFORCE_MODALITIES {
        return Err(CompileError::TooManyModalities { got: ms.len(), max: MAX_BRUTEFORCE_MODALITIES });
    }
    fn recurse(subset: Subset, weight: Rational, out: &mut Vec<(TermKind, Rational)>) {
        let w = weight / Rational::from_integer(subset.len() as i64);
        out.extend(subset_bound_terms(subset).into_iter().map(|k| (k, w)));
        if subset.len() > 1 {
            for m in subset.members() {
                recurse(subset.without(m), w, out);
            }
        }
    }
    let mut raw = Vec::new();
    recurse(ms.full(), one(), &mut raw);
    LossExpression::from_terms(Variant::M2vae, ms.clone(), raw)
}

/// Dispatches to the expansion for `variant`.
pub fn expand(ms: &ModalitySet, variant: Variant) -> Result<LossExpression, CompileError> {
    match variant {
        Variant::Vanilla => expand_vanilla(ms),
        Variant::Joint => expand_joint(ms),
        Variant::Jmvae => expand_jmvae(ms),
        Variant::M2vae => expand_m2vae(ms),
        Variant::Jmvae3Style => expand_jmvae3_style(ms),
    }
}
