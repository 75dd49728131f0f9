//! Penalized cubic B-splines for global smooth terms.
//!
//! Each smooth enters the design under a sum-to-zero constraint (applied by a
//! Householder projection of the coefficient space) so it is identifiable next
//! to an intercept. The penalty is the squared `penalty_order`-th difference
//! of the coefficients, and the smoothing parameter is picked from a fixed
//! grid by GCV inside the IRLS half-steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGREE: usize = 3;

/// Declarative description of one smooth term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub variable: String,
    pub basis_size: usize,
    pub penalty_order: usize,
    pub smoothing_grid: Vec<f64>,
}

impl SmoothTerm {
    pub fn new(variable: impl Into<String>) -> Self {
        Self {
            variable: variable.into(),
            basis_size: 10,
            penalty_order: 2,
            smoothing_grid: default_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis_size < self.penalty_order + 2 {
            return Err(Error::Domain(format!(
                "smooth '{}': basis_size {} < penalty_order {} + 2",
                self.variable, self.basis_size, self.penalty_order
            )));
        }
        if self.smoothing_grid.is_empty() || self.smoothing_grid.iter().any(|&r| r <= 0.0) {
            return Err(Error::Domain(format!(
                "smooth '{}': smoothing grid must be positive and non-empty",
                self.variable
            )));
        }
        Ok(())
    }
}

/// log-spaced 1e-4 .. 1e4, 13 points
pub fn default_grid() -> Vec<f64> {
    (0..13)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 12.0))
        .collect()
}

/// A smooth term together with the data column it applies to.
#[derive(Debug, Clone)]
pub struct SmoothData {
    pub term: SmoothTerm,
    pub values: DVector<f64>,
}

impl SmoothData {
    pub fn new(term: SmoothTerm, values: DVector<f64>) -> Self {
        Self { term, values }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            term: self.term.clone(),
            values: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.values[r])),
        }
    }
}

/// Clamped cubic B-spline basis with interior knots at quantiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineBasis {
    pub knots: Vec<f64>,
    pub n_basis: usize,
}

impl SplineBasis {
    pub fn from_data(values: &DVector<f64>, basis_size: usize) -> Result<Self> {
        let n = values.len();
        if n < basis_size {
            return Err(Error::Domain(format!(
                "{n} observations cannot support a {basis_size}-column spline basis"
            )));
        }
        let mut sorted: Vec<f64> = values.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[n - 1];
        if !(hi > lo) {
            return Err(Error::Domain(
                "smooth variable has no spread; cannot place knots".into(),
            ));
        }
        let n_interior = basis_size - (DEGREE + 1);
        let mut knots = vec![lo; DEGREE + 1];
        for j in 1..=n_interior {
            let q = j as f64 / (n_interior + 1) as f64;
            let pos = q * (n - 1) as f64;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let v = if i0 + 1 < n {
                sorted[i0] * (1.0 - frac) + sorted[i0 + 1] * frac
            } else {
                sorted[i0]
            };
            knots.push(v);
        }
        knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
        Ok(Self {
            knots,
            n_basis: basis_size,
        })
    }

    /// Cox-de Boor evaluation of all basis functions at x.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let k = &self.knots;
        let nb = self.n_basis;
        let lo = k[0];
        let hi = k[k.len() - 1];
        let x = x.clamp(lo, hi);
        // knot span index mu with k[mu] <= x < k[mu+1]
        let mut mu = DEGREE;
        while mu + 1 < nb && x >= k[mu + 1] {
            mu += 1;
        }
        let mut vals = vec![0.0; nb];
        vals[mu] = 1.0;
        for d in 1..=DEGREE {
            for j in mu.saturating_sub(d)..=mu {
                let mut v = 0.0;
                let denom_l = k[j + d] - k[j];
                if denom_l > 0.0 {
                    v += (x - k[j]) / denom_l * vals[j];
                }
                if j + 1 < nb {
                    let denom_r = k[j + d + 1] - k[j + 1];
                    if denom_r > 0.0 {
                        v += (k[j + d + 1] - x) / denom_r * vals[j + 1];
                    }
                }
                vals[j] = v;
            }
        }
        vals
    }

    pub fn evaluate_matrix(&self, values: &DVector<f64>) -> DMatrix<f64> {
        let n = values.len();
        let mut m = DMatrix::zeros(n, self.n_basis);
        for i in 0..n {
            let row = self.evaluate(values[i]);
            for j in 0..self.n_basis {
                m[(i, j)] = row[j];
            }
        }
        m
    }

    /// Squared `order`-th difference penalty D' D on the full coefficients.
    pub fn penalty(&self, order: usize) -> DMatrix<f64> {
        let nb = self.n_basis;
        let mut d = DMatrix::<f64>::identity(nb, nb);
        for _ in 0..order {
            let r = d.nrows() - 1;
            let mut next = DMatrix::zeros(r, nb);
            for i in 0..r {
                for j in 0..nb {
                    next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
                }
            }
            d = next;
        }
        d.transpose() * d
    }
}

/// Basis with the sum-to-zero constraint absorbed: the reduced design is
/// `B Z` where `Z` spans the null space of the training column-sum vector.
#[derive(Debug, Clone)]
pub struct ConstrainedBasis {
    pub basis: SplineBasis,
    /// n_basis x (n_basis - 1) projection.
    pub z: DMatrix<f64>,
}

impl ConstrainedBasis {
    pub fn from_data(values: &DVector<f64>, basis_size: usize) -> Result<Self> {
        let basis = SplineBasis::from_data(values, basis_size)?;
        let b = basis.evaluate_matrix(values);
        // v = B' 1; constraint v' c = 0.
        let k = basis.n_basis;
        let mut v = DVector::zeros(k);
        for j in 0..k {
            v[j] = b.column(j).sum();
        }
        // Householder reflector H mapping v to ||v|| e1; Z = columns 2..k of H.
        let norm = v.norm();
        let mut u = v.clone();
        u[0] += if v[0] >= 0.0 { norm } else { -norm };
        let un = u.norm();
        if un == 0.0 {
            return Err(Error::Domain("degenerate spline constraint".into()));
        }
        u /= un;
        let mut h = DMatrix::<f64>::identity(k, k);
        for a in 0..k {
            for bcol in 0..k {
                h[(a, bcol)] -= 2.0 * u[a] * u[bcol];
            }
        }
        let z = h.columns(1, k - 1).into_owned();
        Ok(Self { basis, z })
    }

    pub fn n_cols(&self) -> usize {
        self.basis.n_basis - 1
    }

    /// Reduced design columns for the given data.
    pub fn columns(&self, values: &DVector<f64>) -> DMatrix<f64> {
        self.basis.evaluate_matrix(values) * &self.z
    }

    /// Penalty on the reduced coefficients: Z' S Z.
    pub fn penalty(&self, order: usize) -> DMatrix<f64> {
        let s = self.basis.penalty(order);
        self.z.transpose() * s * &self.z
    }

    /// Full-length coefficient vector from reduced coefficients.
    pub fn full_coef(&self, reduced: &[f64]) -> Vec<f64> {
        let r = DVector::from_row_slice(reduced);
        (&self.z * r).iter().copied().collect()
    }
}

/// A fitted smooth: basis, full coefficients and the GCV-selected penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedSmooth {
    pub variable: String,
    pub basis: SplineBasis,
    /// Coefficients on the full basis (constraint already applied).
    pub coef: Vec<f64>,
    pub rho: f64,
    pub edf: f64,
}

impl FittedSmooth {
    pub fn eval(&self, x: f64) -> f64 {
        self.basis
            .evaluate(x)
            .iter()
            .zip(&self.coef)
            .map(|(b, w)| b * w)
            .sum()
    }

    pub fn eval_vec(&self, values: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(values.len(), values.iter().map(|&x| self.eval(x)))
    }
}
