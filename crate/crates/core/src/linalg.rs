//! Small dense linear-algebra helpers shared by the GP code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative jitter levels tried after a plain factorization fails. Each level
/// is multiplied by the mean of the diagonal.
pub const JITTER_LEVELS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// A Cholesky factor together with the absolute jitter that was added to the
/// diagonal to obtain it (zero when none was needed).
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
    /// Number of jitter escalations used; 0 means the plain factorization
    /// succeeded.
    pub escalations: usize,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn ln_determinant(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

pub fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.diagonal().iter().sum::<f64>() / m.nrows() as f64
}

/// Cholesky factorization with the escalating-jitter policy. Tries the
/// matrix as given first, then `level * mean(diag)` for each entry of
/// [`JITTER_LEVELS`].
pub fn cholesky_with_jitter(m: &DMatrix<f64>, context: &str) -> Result<Factor> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "{context}: matrix is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{context}: matrix has non-finite entries")));
    }
    if let Some(chol) = m.clone().cholesky() {
        return Ok(Factor {
            chol,
            jitter: 0.0,
            escalations: 0,
        });
    }
    let scale = mean_diagonal(m).abs().max(f64::MIN_POSITIVE);
    let mut last = 0.0;
    for (i, level) in JITTER_LEVELS.iter().enumerate() {
        let jitter = level * scale;
        last = jitter;
        let mut jittered = m.clone();
        for d in 0..jittered.nrows() {
            jittered[(d, d)] += jitter;
        }
        if let Some(chol) = jittered.cholesky() {
            return Ok(Factor {
                chol,
                jitter,
                escalations: i + 1,
            });
        }
    }
    Err(Error::Cholesky {
        context: context.to_string(),
        jitter: last,
    })
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_factorization_needs_no_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let f = cholesky_with_jitter(&m, "test").unwrap();
        assert_eq!(f.jitter, 0.0);
        assert!((f.ln_determinant() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_matrix_is_rescued_by_jitter() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let f = cholesky_with_jitter(&m, "rank one").unwrap();
        assert!(f.jitter > 0.0);
        assert!(f.escalations <= 3);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_with_jitter(&m, "indefinite"),
            Err(Error::Cholesky { .. })
        ));
    }
}

/// Serde adapter storing a matrix as a list of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}
