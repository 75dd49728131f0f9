//! Design matrices with named columns and an additive offset.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A block of regressors for one linear predictor. The offset is added to the
/// predictor but never re-estimated, which is how global effects are held
/// fixed during node refits.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub matrix: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub offset: DVector<f64>,
}

impl DesignBlock {
    pub fn new(matrix: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        let offset = DVector::zeros(matrix.nrows());
        Self::with_offset(matrix, column_names, offset)
    }

    pub fn with_offset(
        matrix: DMatrix<f64>,
        column_names: Vec<String>,
        offset: DVector<f64>,
    ) -> Result<Self> {
        if column_names.len() != matrix.ncols() {
            return Err(Error::Shape(format!(
                "{} column names for a {}-column matrix",
                column_names.len(),
                matrix.ncols()
            )));
        }
        if offset.len() != matrix.nrows() {
            return Err(Error::Shape(format!(
                "offset length {} for {} rows",
                offset.len(),
                matrix.nrows()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite value in design block".into()));
        }
        Ok(Self {
            matrix,
            column_names,
            offset,
        })
    }

    /// Intercept-only block.
    pub fn intercept(n: usize) -> Self {
        Self {
            matrix: DMatrix::from_element(n, 1, 1.0),
            column_names: vec!["(intercept)".into()],
            offset: DVector::zeros(n),
        }
    }

    /// An intercept column followed by the given named columns.
    pub fn with_intercept(columns: &[(&str, &[f64])]) -> Result<Self> {
        let n = columns.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut m = DMatrix::zeros(n, columns.len() + 1);
        let mut names = Vec::with_capacity(columns.len() + 1);
        names.push("(intercept)".to_string());
        for i in 0..n {
            m[(i, 0)] = 1.0;
        }
        for (j, (name, vals)) in columns.iter().enumerate() {
            if vals.len() != n {
                return Err(Error::Shape(format!("column {name} has length {}", vals.len())));
            }
            names.push((*name).to_string());
            for i in 0..n {
                m[(i, j + 1)] = vals[i];
            }
        }
        Self::new(m, names)
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Restrict to a subset of rows, keeping the matching offset entries.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut m = DMatrix::zeros(rows.len(), self.ncols());
        let mut off = DVector::zeros(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..self.ncols() {
                m[(i, j)] = self.matrix[(r, j)];
            }
            off[i] = self.offset[r];
        }
        Self {
            matrix: m,
            column_names: self.column_names.clone(),
            offset: off,
        }
    }

    /// Same matrix with a replacement offset.
    pub fn replacing_offset(&self, offset: DVector<f64>) -> Result<Self> {
        Self::with_offset(self.matrix.clone(), self.column_names.clone(), offset)
    }
}
