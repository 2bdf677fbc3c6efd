//! Row-major f32 matrix used for embedding batches and the vector index.

use crate::error::{Error, Result};

/// Dense row-major matrix of 32-bit floats. Rows are embeddings, all of one
/// fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut m = Matrix::with_capacity(dim, rows.len());
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Packed little-endian byte image of the matrix, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Rebuild from packed little-endian bytes. The byte length must equal
    /// `rows * dim * 4` exactly.
    pub fn from_le_bytes(dim: usize, rows: usize, bytes: &[u8]) -> Result<Self> {
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptCache("matrix size overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::CorruptCache(format!(
                "matrix file holds {} bytes, manifest implies {}",
                bytes.len(),
                expected
            )));
        }
        let mut data = Vec::with_capacity(rows * dim);
        for chunk in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok(Self { dim, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_read_rows() {
        let mut m = Matrix::new(3);
        m.push_row(&[1.0, 2.0, 3.0]).unwrap();
        m.push_row(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let mut m = Matrix::new(3);
        assert!(m.push_row(&[1.0]).is_err());
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let mut m = Matrix::new(2);
        m.push_row(&[0.1, -7.25]).unwrap();
        m.push_row(&[f32::MIN_POSITIVE, 3.5e8]).unwrap();
        let bytes = m.to_le_bytes();
        let back = Matrix::from_le_bytes(2, 2, &bytes).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn truncated_bytes_rejected() {
        let m = Matrix::from_rows(2, &[vec![1.0, 2.0]]).unwrap();
        let mut bytes = m.to_le_bytes();
        bytes.pop();
        assert!(Matrix::from_le_bytes(2, 1, &bytes).is_err());
    }
}
