use std::io::{Read, Write};

use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"DSRT";

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and holds only finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {:?}",
            shape
        );
        let expected: usize = shape.iter().product();
        ensure!(
            data.len() == expected,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite tensor entry at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// `n x n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element `(r, c)` of a matrix.
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        ensure!(self.rank() == 2, "{what} requires a matrix, got shape {:?}", self.shape);
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose")?;
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        ensure!(
            other.rows() == k,
            "matmul shape mismatch {:?} x {:?}",
            self.shape,
            other.shape
        );
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self * v` for a matrix and a vector slice.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.require_matrix("matvec")?;
        ensure!(
            v.len() == self.cols(),
            "matvec dimension mismatch: matrix {:?}, vector {}",
            self.shape,
            v.len()
        );
        Ok((0..self.rows()).map(|r| dot(self.row(r), v)).collect())
    }

    /// `self^T * v` for a matrix and a vector slice.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.require_matrix("t_matvec")?;
        ensure!(
            v.len() == self.rows(),
            "t_matvec dimension mismatch: matrix {:?}, vector {}",
            self.shape,
            v.len()
        );
        let c = self.cols();
        let mut out = vec![0.0; c];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    /// Writes the tensor in the `DSRT` binary layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        ensure!(self.rank() <= u8::MAX as usize, "tensor rank too large");
        w.write_all(MAGIC)?;
        w.write_all(&[self.rank() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}, expected \"DSRT\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated tensor payload: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Pairwise summation; result does not depend on how callers chunk the input.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let at = a.transpose().unwrap();
        let g = a.matmul(&at).unwrap();
        assert_eq!(g.data(), &[14., 32., 32., 77.]);
        assert_eq!(a.matvec(&[1., 0., -1.]).unwrap(), vec![-2., -2.]);
        assert_eq!(a.t_matvec(&[1., 1.]).unwrap(), vec![5., 7., 9.]);
    }

    #[test]
    fn binary_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"DSRT");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..13], &1u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 37);
        assert_eq!(Tensor::read_from(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = Tensor::eye(2).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Tensor::read_from(&bytes[..]),
            Err(Error::Format(_))
        ));
    }
}
