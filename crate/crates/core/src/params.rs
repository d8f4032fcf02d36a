//! Flat parameter vectors and the d-by-m parameter matrix.
//!
//! Every client model is a flattened `ParamVector` of fixed length `d`; a
//! `ParamMatrix` collects the `m` client vectors as columns. Both are value
//! types: once constructed they are immutable and guaranteed finite, so the
//! rest of the crate can do arithmetic without re-checking.

use alloc::vec::Vec;

use crate::fmath;
use crate::{Error, Result};

/// A client's flattened model parameters (length `d`, all entries finite).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps a raw vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("parameter vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameter vector",
            });
        }
        Ok(Self { values })
    }

    /// All-zero vector of length `d`.
    pub fn zeros(d: usize) -> Result<Self> {
        Self::new(alloc::vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        fmath::sqrt(self.values.iter().map(|v| v * v).sum())
    }

    /// Dot product; lengths must match.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_same_len(self, other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    /// `self + scale * other`, as a new vector.
    pub fn axpy(&self, scale: f64, other: &Self) -> Result<Self> {
        check_same_len(self, other, "axpy")?;
        Self::new(
            self.values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-1.0, other)
    }
}

impl core::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl<'a> IntoIterator for &'a ParamVector {
    type Item = &'a f64;
    type IntoIter = core::slice::Iter<'a, f64>;
    fn into_iter(self) -> Self::IntoIter {
        self.values.iter()
    }
}

fn check_same_len(a: &ParamVector, b: &ParamVector, context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Squared Euclidean distance between two parameter vectors.
pub fn sq_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_same_len(a, b, "sq_distance")?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum())
}

/// The d-by-m matrix collecting all clients' parameter vectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    columns: Vec<ParamVector>,
}

impl ParamMatrix {
    /// Builds from columns; all columns must share one length.
    pub fn from_columns(columns: Vec<ParamVector>) -> Result<Self> {
        let d = match columns.first() {
            Some(c) => c.len(),
            None => return Err(Error::Domain("parameter matrix needs m >= 1".into())),
        };
        for c in &columns {
            if c.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "matrix column",
                    expected: d,
                    actual: c.len(),
                });
            }
        }
        Ok(Self { columns })
    }

    /// Number of rows `d`.
    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    /// Number of columns `m`.
    pub fn clients(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &ParamVector {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[ParamVector] {
        &self.columns
    }

    /// Entry-wise difference, as a new matrix.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.clients() != other.clients() {
            return Err(Error::DimensionMismatch {
                context: "matrix sub",
                expected: self.clients(),
                actual: other.clients(),
            });
        }
        let cols = self
            .columns
            .iter()
            .zip(other.columns.iter())
            .map(|(a, b)| a.sub(b))
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(cols)
    }

    /// Largest absolute entry-wise difference against another matrix.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let diff = self.sub(other)?;
        Ok(diff
            .columns
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs())))
    }
}

/// Frobenius norm: square root of the sum of all squared entries.
pub fn frobenius_norm(m: &ParamMatrix) -> f64 {
    let total: f64 = m
        .columns()
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>())
        .sum();
    fmath::sqrt(total)
}
