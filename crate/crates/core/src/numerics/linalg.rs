use super::Tensor;
use crate::error::{ensure, Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, matching `values`.
    pub vectors: Tensor,
}

pub fn check_symmetric(m: &Tensor) -> Result<()> {
    ensure!(
        m.rank() == 2 && m.rows() == m.cols(),
        "expected a square matrix, got shape {:?}",
        m.shape()
    );
    let n = m.rows();
    let scale = m.max_abs().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            let gap = (m.at(i, j) - m.at(j, i)).abs();
            ensure!(
                gap <= 1e-10 * scale,
                "matrix is not symmetric: |m[{i},{j}] - m[{j},{i}]| = {gap:e}"
            );
        }
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// Eigenvector signs are fixed so the largest-magnitude component of each
/// column is positive.
pub fn sym_eig(m: &Tensor) -> Result<SymEig> {
    check_symmetric(m)?;
    let n = m.rows();
    // Work on the exactly-symmetrized copy.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.at(i, j) + m.at(j, i));
        }
    }
    let mut v = Tensor::eye(n).into_data();

    let total: f64 = a.iter().map(|x| x * x).sum();
    let tol = (f64::EPSILON * f64::EPSILON) * total;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= tol || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Rotation is a no-op at working precision.
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigendecomposition did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut column: Vec<f64> = (0..n).map(|k| v[k * n + src]).collect();
        fix_sign(&mut column);
        for k in 0..n {
            vectors[k * n + col] = column[k];
        }
    }
    Ok(SymEig {
        values,
        vectors: Tensor::new(vec![n, n], vectors)?,
    })
}

/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Returns `F` with `F F^T = m` for a symmetric positive semi-definite `m`.
/// Slightly negative eigenvalues from round-off are clamped to zero.
pub fn psd_factor(m: &Tensor) -> Result<Tensor> {
    let eig = sym_eig(m)?;
    let n = m.rows();
    let scale = eig.values.first().copied().unwrap_or(0.0).abs().max(1.0);
    let mut f = eig.vectors.into_data();
    for (j, &lam) in eig.values.iter().enumerate() {
        ensure!(
            lam >= -1e-9 * scale,
            "matrix is not positive semi-definite (eigenvalue {lam:e})"
        );
        let s = lam.max(0.0).sqrt();
        for k in 0..n {
            f[k * n + j] *= s;
        }
    }
    Tensor::new(vec![n, n], f)
}

/// Gram-Schmidt orthonormalization of the columns of `m` (`rows >= cols`).
pub fn orthonormalize_columns(m: &Tensor) -> Result<Tensor> {
    ensure!(m.rank() == 2 && m.rows() >= m.cols(), "need a tall matrix");
    let (r, c) = (m.rows(), m.cols());
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    for j in 0..c {
        let mut v = m.column(j);
        // Two passes keep the basis orthonormal to round-off.
        for _ in 0..2 {
            for u in &cols {
                let p = super::dot(u, &v);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= p * y;
                }
            }
        }
        let nrm = super::norm(&v);
        if nrm < 1e-12 {
            return Err(Error::Numerical("columns are linearly dependent".into()));
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        cols.push(v);
    }
    let mut data = vec![0.0; r * c];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..r {
            data[i * c + j] = col[i];
        }
    }
    Tensor::new(vec![r, c], data)
}
