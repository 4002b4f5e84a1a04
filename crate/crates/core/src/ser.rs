//! Subspace discovery on auxiliary data and the projections it produces.

use std::path::Path;

use crate::augment::ImageShape;
use crate::data::{LabeledImages, MixtureSpec};
use crate::error::{ensure, Error, Result};
use crate::extractor::Network;
use crate::numerics::{dot, fix_sign, sym_eig, RngStream, Tensor};
use crate::privacy::{ClipConfig, PrivacyBudget};

const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    ExternalFile(String),
    SyntheticGenerator,
}

/// Images used only to find subspaces, never the private data.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliarySet {
    images: LabeledImages,
    provenance: Provenance,
    /// Budget spent producing the set when it came from a DP generator.
    budget_share: Option<PrivacyBudget>,
}

impl AuxiliarySet {
    pub fn new(images: LabeledImages, provenance: Provenance, budget_share: Option<PrivacyBudget>) -> Self {
        Self {
            images,
            provenance,
            budget_share,
        }
    }

    pub fn load(images: &Path, labels: &Path, budget_share: Option<PrivacyBudget>) -> Result<Self> {
        let set = LabeledImages::read(images, labels)?;
        Ok(Self::new(
            set,
            Provenance::ExternalFile(images.display().to_string()),
            budget_share,
        ))
    }

    pub fn images(&self) -> &LabeledImages {
        &self.images
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn budget_share(&self) -> Option<PrivacyBudget> {
        self.budget_share
    }

    /// Checks the set can drive subspace discovery for a run.
    pub fn check_usable(&self, shape: ImageShape, num_classes: usize) -> Result<()> {
        ensure!(
            self.images.shape() == shape,
            "auxiliary image shape {:?} does not match input shape {:?}",
            self.images.shape(),
            shape
        );
        let mut counts = self.images.class_counts();
        counts.resize(num_classes.max(counts.len()), 0);
        for (c, &n) in counts.iter().take(num_classes).enumerate() {
            ensure!(n >= 2, "auxiliary class {c} has {n} images, need at least 2");
        }
        Ok(())
    }
}

pub fn synth_aux(spec: &MixtureSpec, n_per_class: usize, stream: &RngStream) -> Result<AuxiliarySet> {
    let images = spec.sample(n_per_class, stream)?;
    Ok(AuxiliarySet::new(images, Provenance::SyntheticGenerator, None))
}

/// Column-orthonormal `D x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    matrix: Tensor,
}

impl Projection {
    pub fn new(matrix: Tensor) -> Result<Self> {
        ensure!(
            matrix.rank() == 2 && matrix.cols() <= matrix.rows(),
            "projection must be a tall D x d matrix, got {:?}",
            matrix.shape()
        );
        let err = orthonormality_error(&matrix);
        if err >= ORTHONORMAL_TOL {
            return Err(Error::Numerical(format!(
                "projection columns are not orthonormal (max |P^T P - I| = {err:e})"
            )));
        }
        Ok(Self { matrix })
    }

    /// Skips the orthonormality check. Only for fault-injection tests.
    pub fn new_unchecked(matrix: Tensor) -> Self {
        Self { matrix }
    }

    /// First `d` standard basis vectors.
    pub fn axes(dim: usize, d: usize) -> Result<Self> {
        ensure!(d >= 1 && d <= dim, "need 1 <= d <= D");
        let mut m = Tensor::zeros(&[dim, d]).into_data();
        for j in 0..d {
            m[j * d + j] = 1.0;
        }
        Self::new(Tensor::new(vec![dim, d], m)?)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.matrix)
    }

    /// `P^T v`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            v.len() == self.input_dim(),
            "vector of length {} cannot be projected by a {}x{} matrix",
            v.len(),
            self.input_dim(),
            self.subspace_dim()
        );
        self.matrix.t_matvec(v)
    }

    /// `P u`.
    pub fn reconstruct(&self, u: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            u.len() == self.subspace_dim(),
            "vector of length {} cannot be lifted by a {}x{} matrix",
            u.len(),
            self.input_dim(),
            self.subspace_dim()
        );
        self.matrix.matvec(u)
    }

    /// `(I - P P^T) v`.
    pub fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let back = self.reconstruct(&self.project(v)?)?;
        Ok(v.iter().zip(&back).map(|(a, b)| a - b).collect())
    }
}

fn orthonormality_error(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let cols: Vec<Vec<f64>> = (0..c).map(|j| m.column(j)).collect();
    let mut worst: f64 = 0.0;
    for a in 0..c {
        for b in a..c {
            let g = dot(&cols[a], &cols[b]);
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    debug_assert!(r >= c);
    worst
}

/// Top-`d` PCA subspace of the uncentered second moment `(1/n) F^T F`.
///
/// Eigenvalues are returned alongside the projection (all of them, descending).
pub fn discover_subspace_with_spectrum(features: &Tensor, d: usize) -> Result<(Projection, Vec<f64>)> {
    ensure!(features.rank() == 2, "features must be an n x D matrix");
    let (n, dim) = (features.rows(), features.cols());
    ensure!(n >= 2, "need at least 2 feature rows, got {n}");
    ensure!(
        d >= 1 && d <= n.min(dim),
        "subspace dimension {d} must be in 1..={}",
        n.min(dim)
    );
    let f = features.data();
    let inv_n = 1.0 / n as f64;

    let (values, mut cols) = if n < dim {
        // Small Gram matrix: F F^T / n shares the nonzero spectrum.
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = dot(&f[i * dim..(i + 1) * dim], &f[j * dim..(j + 1) * dim]) * inv_n;
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        let eig = sym_eig(&Tensor::new(vec![n, n], g)?)?;
        let mut cols = Vec::with_capacity(d);
        for k in 0..d.min(n) {
            let u = eig.vectors.column(k);
            let mut v = vec![0.0; dim];
            for (i, &ui) in u.iter().enumerate() {
                if ui != 0.0 {
                    for (vj, fj) in v.iter_mut().zip(&f[i * dim..(i + 1) * dim]) {
                        *vj += ui * fj;
                    }
                }
            }
            cols.push(v);
        }
        (eig.values, cols)
    } else {
        let mut m = vec![0.0; dim * dim];
        for row in f.chunks_exact(dim) {
            for a in 0..dim {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..dim {
                    m[a * dim + b] += ra * row[b];
                }
            }
        }
        for a in 0..dim {
            for b in a..dim {
                m[a * dim + b] *= inv_n;
                m[b * dim + a] = m[a * dim + b];
            }
        }
        let eig = sym_eig(&Tensor::new(vec![dim, dim], m)?)?;
        let cols = (0..d).map(|k| eig.vectors.column(k)).collect();
        (eig.values, cols)
    };

    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
    let rank = values.iter().filter(|&&l| l > tol).count();
    if top == 0.0 || rank < d {
        return Err(Error::DegenerateSubspace { requested: d, rank });
    }

    // Normalize, then one re-orthogonalization pass to remove round-off.
    for k in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(k);
        let v = &mut rest[0];
        for u in done.iter() {
            let p = dot(u, v);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let nrm = dot(v, v).sqrt();
        v.iter_mut().for_each(|x| *x /= nrm);
        fix_sign(v);
    }
    let mut data = vec![0.0; dim * d];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..dim {
            data[i * d + j] = col[i];
        }
    }
    Ok((Projection::new(Tensor::new(vec![dim, d], data)?)?, values))
}

pub fn discover_subspace(features: &Tensor, d: usize) -> Result<Projection> {
    discover_subspace_with_spectrum(features, d).map(|(p, _)| p)
}

/// Clipped extractor features of the given images as an `n x D` matrix.
pub fn clipped_features(net: &Network, images: &[&[f64]], clip: &ClipConfig) -> Result<Tensor> {
    let dim = net.feature_dim();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        data.extend(clip.clip(&net.forward(img)?));
    }
    Tensor::new(vec![images.len(), dim], data)
}
