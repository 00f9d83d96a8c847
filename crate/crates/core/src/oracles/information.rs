//! Entropies, mutual information, and variation of information of a finite
//! joint distribution over two or three variables. All values in nats.

use crate::rng::RngStream;

use super::OracleError;

/// Agreement required between the two forms of the two-variable VI.
pub const VI_FORM_TOLERANCE: f64 = 1e-12;

/// Probability table over 2 or 3 finite alphabets, row-major in variable order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    shape: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(shape: Vec<usize>, probs: Vec<f64>) -> Result<Self, OracleError> {
        if !(2..=3).contains(&shape.len()) || shape.contains(&0) {
            return Err(OracleError::InvalidTable(format!("shape {shape:?}: need 2 or 3 nonempty alphabets")));
        }
        if probs.len() != shape.iter().product::<usize>() {
            return Err(OracleError::InvalidTable(format!("{} entries for shape {shape:?}", probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(OracleError::InvalidTable("entries must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(OracleError::InvalidTable(format!("entries sum to {total}")));
        }
        Ok(DiscreteJoint { shape, probs })
    }

    /// Random table with Exp(1) weights, normalized (a flat Dirichlet draw).
    pub fn random(shape: Vec<usize>, rng: &mut RngStream) -> Result<Self, OracleError> {
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform::<f64>(0.0, 1.0)).ln()).collect();
        let total: f64 = w.iter().sum();
        Self::new(shape, w.into_iter().map(|v| v / total).collect())
    }

    /// Product of independent marginals.
    pub fn independent(marginals: &[Vec<f64>]) -> Result<Self, OracleError> {
        let shape: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let mut probs = vec![1.0];
        for m in marginals {
            probs = probs.iter().flat_map(|p| m.iter().map(move |q| p * q)).collect();
        }
        Self::new(shape, probs)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_vars(&self) -> usize {
        self.shape.len()
    }

    fn check_vars(&self, vars: &[usize]) -> Result<(), OracleError> {
        for (i, &v) in vars.iter().enumerate() {
            if v >= self.shape.len() || vars[..i].contains(&v) {
                return Err(OracleError::InvalidTable(format!("variable list {vars:?} for a {}-variable table", self.shape.len())));
            }
        }
        Ok(())
    }

    /// Marginal table over `vars` (in ascending variable order).
    fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let mut keep: Vec<usize> = vars.to_vec();
        keep.sort_unstable();
        let size: usize = keep.iter().map(|&v| self.shape[v]).product();
        let mut out = vec![0.0; size];
        let mut index = vec![0usize; self.shape.len()];
        for &p in &self.probs {
            let mut flat = 0;
            for &v in &keep {
                flat = flat * self.shape[v] + index[v];
            }
            out[flat] += p;
            for d in (0..index.len()).rev() {
                index[d] += 1;
                if index[d] < self.shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        out
    }

    /// Joint entropy of the variables in `vars`; zero for an empty list.
    pub fn entropy(&self, vars: &[usize]) -> Result<f64, OracleError> {
        self.check_vars(vars)?;
        if vars.is_empty() {
            return Ok(0.0);
        }
        Ok(self.marginal(vars).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
    }

    /// `H(A | B) = H(A, B) − H(B)`.
    pub fn conditional_entropy(&self, a: &[usize], given: &[usize]) -> Result<f64, OracleError> {
        let joint: Vec<usize> = a.iter().chain(given).copied().collect();
        Ok(self.entropy(&joint)? - self.entropy(given)?)
    }

    /// `I(A; B) = H(A) + H(B) − H(A, B)`.
    pub fn mutual_information(&self, a: &[usize], b: &[usize]) -> Result<f64, OracleError> {
        let joint: Vec<usize> = a.iter().chain(b).copied().collect();
        Ok(self.entropy(a)? + self.entropy(b)? - self.entropy(&joint)?)
    }

    /// `I(A; B | C) = H(A | C) − H(A | B, C)`.
    pub fn conditional_mutual_information(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64, OracleError> {
        let bc: Vec<usize> = b.iter().chain(c).copied().collect();
        Ok(self.conditional_entropy(a, c)? - self.conditional_entropy(a, &bc)?)
    }

    /// Two variables: `H(A) + H(B) − 2 I(A; B)`.
    pub fn vi_entropy_form(&self) -> Result<f64, OracleError> {
        self.require_vars(2)?;
        Ok(self.entropy(&[0])? + self.entropy(&[1])? - 2.0 * self.mutual_information(&[0], &[1])?)
    }

    /// Sum over variables of the entropy of each given all the others:
    /// `H(A|B) + H(B|A)` or `H(A|B,C) + H(B|A,C) + H(C|A,B)`.
    pub fn vi_conditional_form(&self) -> Result<f64, OracleError> {
        let n = self.num_vars();
        (0..n)
            .map(|v| {
                let rest: Vec<usize> = (0..n).filter(|&u| u != v).collect();
                self.conditional_entropy(&[v], &rest)
            })
            .sum()
    }

    /// Variation of information. For two variables both forms are computed
    /// and must agree to [`VI_FORM_TOLERANCE`].
    pub fn variation_of_information(&self) -> Result<f64, OracleError> {
        let conditional = self.vi_conditional_form()?;
        if self.num_vars() == 2 {
            let entropy = self.vi_entropy_form()?;
            if (entropy - conditional).abs() > VI_FORM_TOLERANCE {
                return Err(OracleError::ViFormsDisagree { entropy_form: entropy, conditional_form: conditional });
            }
        }
        Ok(conditional)
    }

    fn require_vars(&self, n: usize) -> Result<(), OracleError> {
        if self.num_vars() != n {
            return Err(OracleError::InvalidTable(format!("needs {n} variables, table has {}", self.num_vars())));
        }
        Ok(())
    }
}
