//! Small dense symmetric positive-definite algebra.

use crate::tensor::Tensor;

use super::OracleError;

/// Lower-triangular `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Tensor<f64>) -> Result<Self, OracleError> {
        let n = a.rows();
        if a.cols() != n {
            return Err(OracleError::DimensionMismatch(format!("Cholesky of a {:?} matrix", a.shape())));
        }
        let a = a.data();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(OracleError::NotPositiveDefinite);
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    /// `L⁻¹ b` by forward substitution.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = self.forward(b);
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] -= self.l[k * n + i] * x[k];
            }
            x[i] /= self.l[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in self.solve(&e).into_iter().enumerate() {
                inv[i * n + j] = v;
            }
        }
        Tensor::matrix(n, n, inv).expect("square inverse")
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        self.forward(b).iter().map(|v| v * v).sum()
    }
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn mvn_log_density(x: &[f64], mean: &[f64], cov: &Tensor<f64>) -> Result<f64, OracleError> {
    if x.len() != mean.len() || cov.rows() != x.len() {
        return Err(OracleError::DimensionMismatch(format!(
            "point {} / mean {} / covariance {:?}",
            x.len(),
            mean.len(),
            cov.shape()
        )));
    }
    let chol = Cholesky::factor(cov)?;
    let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let d = x.len() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + chol.quad_form(&r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_solve_inverse() {
        let a = Tensor::matrix(3, 3, vec![4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0]).unwrap();
        let c = Cholesky::factor(&a).unwrap();
        let x = c.solve(&[1.0, 2.0, 3.0]);
        let back = a.matmul(&Tensor::matrix(3, 1, x).unwrap());
        for (u, v) in back.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((u - v).abs() < 1e-12);
        }
        let id = a.matmul(&c.inverse());
        for i in 0..3 {
            for j in 0..3 {
                assert!((id.data()[i * 3 + j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        // det by cofactor expansion.
        let det = 4.0 * (15.0 - 1.0) - 2.0 * (6.0 - 0.4) + 0.4 * (2.0 - 2.0);
        assert!((c.log_det() - f64::ln(det)).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(Cholesky::factor(&a).unwrap_err(), OracleError::NotPositiveDefinite);
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(Cholesky::factor(&z).unwrap_err(), OracleError::NotPositiveDefinite);
    }

    #[test]
    fn scalar_density() {
        let cov = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let v = mvn_log_density(&[0.0], &[0.0], &cov).unwrap();
        assert!((v + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }
}
