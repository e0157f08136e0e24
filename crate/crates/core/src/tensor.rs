//! Dense row-major matrices of token features.

use crate::error::{Error, Result};

/// `rows × cols` real matrix, row-major. Rows are tokens, columns features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "token matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape {
                what: "token matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("token matrix has non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "token matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                what: "row length",
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn same_shape(&self, other: &TokenMatrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &TokenMatrix) -> Result<TokenMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                what: "matmul inner dimension",
                expected: self.cols,
                found: rhs.rows,
            });
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let o = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(TokenMatrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> TokenMatrix {
        assert!(start < end && end <= self.cols, "bad column range");
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        TokenMatrix {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(parts: &[TokenMatrix]) -> Result<TokenMatrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::Shape {
                what: "hconcat rows",
                expected: rows,
                found: bad.rows,
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        TokenMatrix::new(rows, cols, data)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vconcat(parts: &[&TokenMatrix]) -> Result<TokenMatrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::Shape {
                what: "vconcat cols",
                expected: cols,
                found: bad.cols,
            });
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        TokenMatrix::new(data.len() / cols.max(1), cols, data)
    }

    /// `(1 − w)·self + w·other`, returning an exact copy of the relevant
    /// endpoint when `w` is 0 or 1. Elements equal on both sides are copied,
    /// so blending a matrix with itself is exact for every `w`.
    pub fn lerp(&self, other: &TokenMatrix, w: f64) -> Result<TokenMatrix> {
        if !self.same_shape(other) {
            return Err(Error::Shape {
                what: "blend operands",
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        if w == 0.0 {
            return Ok(self.clone());
        }
        if w == 1.0 {
            return Ok(other.clone());
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| if a == b { a } else { (1.0 - w) * a + w * b })
            .collect();
        Ok(TokenMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Adds `rhs` in place.
    pub fn add_assign(&mut self, rhs: &TokenMatrix) -> Result<()> {
        if !self.same_shape(rhs) {
            return Err(Error::Shape {
                what: "residual add",
                expected: self.rows * self.cols,
                found: rhs.rows * rhs.cols,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> TokenMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        TokenMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TokenMatrix {
        TokenMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = TokenMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = TokenMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert!(a.matmul(&TokenMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn lerp_endpoints_are_exact_copies() {
        let a = TokenMatrix::from_rows(&[vec![-0.0, 1.5]]).unwrap();
        let b = TokenMatrix::from_rows(&[vec![2.0, 0.1]]).unwrap();
        let at0 = a.lerp(&b, 0.0).unwrap();
        assert_eq!(at0.data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(a.lerp(&b, 1.0).unwrap(), b);
        assert_eq!(a.lerp(&b, 0.5).unwrap().data(), &[1.0, 0.8]);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(TokenMatrix::new(0, 3, vec![]).is_err());
        assert!(TokenMatrix::new(1, 2, vec![1.0]).is_err());
        assert!(TokenMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(TokenMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn slicing_and_concat() {
        let a = TokenMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let l = a.column_slice(0, 1);
        let r = a.column_slice(1, 3);
        assert_eq!(TokenMatrix::hconcat(&[l, r]).unwrap(), a);
        let s = a.select_rows(&[1]);
        assert_eq!(s.data(), &[4.0, 5.0, 6.0]);
        let v = TokenMatrix::vconcat(&[&a, &s]).unwrap();
        assert_eq!(v.rows(), 3);
    }
}
