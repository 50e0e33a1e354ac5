//! Row-major embedding matrices.

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// `rows × dim` feature matrix, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Argument(format!(
                "embedding buffer has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "embedding row {} has a non-finite entry",
                i / dim.max(1)
            )));
        }
        let mut m = EmbeddingMatrix {
            rows,
            dim,
            data,
            normalized: false,
        };
        m.normalized = m.rows_are_unit();
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Argument("embedding rows differ in length".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    fn rows_are_unit(&self) -> bool {
        self.rows > 0
            && (0..self.rows).all(|i| (norm(self.row(i)) - 1.0).abs() <= UNIT_TOL)
    }

    /// Row norms, failing on the first zero row.
    pub fn norms(&self) -> Result<Vec<f64>> {
        (0..self.rows)
            .map(|i| {
                let n = norm(self.row(i));
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(Error::Numeric(format!("embedding row {i} has zero norm")))
                }
            })
            .collect()
    }

    pub fn l2_normalized(&self) -> Result<Self> {
        let norms = self.norms()?;
        let mut data = self.data.clone();
        for (i, n) in norms.iter().enumerate() {
            for v in &mut data[i * self.dim..(i + 1) * self.dim] {
                *v /= n;
            }
        }
        Ok(EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data,
            normalized: true,
        })
    }

    /// Rows selected by index, in order.
    pub fn select(&self, idx: &[usize]) -> EmbeddingMatrix {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        EmbeddingMatrix {
            rows: idx.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_flag_tracks_row_norms() {
        let e = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        assert!(!e.is_normalized());
        let n = e.l2_normalized().unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-12);
        assert!(EmbeddingMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap().is_normalized());
    }

    #[test]
    fn zero_row_and_nan_are_rejected() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = e.l2_normalized().unwrap_err();
        assert!(err.to_string().contains("row 1"));
        assert!(EmbeddingMatrix::from_rows(&[vec![f64::NAN, 0.0]]).is_err());
    }
}
