//! Numerical laboratory for the projected mean-estimation error.
//!
//! A [`SignalModel`] draws per-example signals `v = mu + p + r` with
//! `p ~ N(0, Sigma_p)`, `r ~ N(0, Sigma_r)` and `||v|| <= K` enforced by
//! rejection. Two estimators of `mu` from a group of `L` signals are compared:
//!
//! * original: `mean(v) + N(0, sigma_orig^2 I_D)`
//! * projected back: `P (P^T mean(v) + N(0, sigma_proj^2 I_d))`
//!
//! [`analytic_terms`] evaluates the closed-form error difference and
//! [`monte_carlo_mse`] estimates both errors by simulation.

mod sweep;

use rand_chacha::ChaCha20Rng;

use crate::error::{ensure, Error, Result};
use crate::numerics::{check_symmetric, dot, pairwise_sum, standard_normal, sym_eig, Purpose, RngStream, Tensor};
use crate::ser::Projection;

pub use sweep::{
    classify_regime, fixed_sweep_model, random_model, sweep, MseReport, Regime, SweepTable, CSV_HEADER,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SignalModel {
    mu: Vec<f64>,
    sigma_p: Tensor,
    sigma_r: Tensor,
    clip_bound: f64,
    group_size: usize,
}

impl SignalModel {
    pub fn new(mu: Vec<f64>, sigma_p: Tensor, sigma_r: Tensor, clip_bound: f64, group_size: usize) -> Result<Self> {
        let dim = mu.len();
        ensure!(dim >= 1, "model dimension must be positive");
        ensure!(mu.iter().all(|v| v.is_finite()), "mean must be finite");
        for (name, s) in [("Sigma_p", &sigma_p), ("Sigma_r", &sigma_r)] {
            ensure!(
                s.shape() == [dim, dim],
                "{name} has shape {:?}, expected {dim}x{dim}",
                s.shape()
            );
            check_symmetric(s)?;
            let low = sym_eig(s)?.values.last().copied().unwrap_or(0.0);
            ensure!(
                low >= -1e-10 * s.max_abs().max(1.0),
                "{name} is not positive semi-definite (eigenvalue {low:e})"
            );
        }
        ensure!(clip_bound > 0.0 && clip_bound.is_finite(), "clip bound must be positive");
        ensure!(group_size >= 1, "group size must be at least 1");
        Ok(Self {
            mu,
            sigma_p,
            sigma_r,
            clip_bound,
            group_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_p(&self) -> &Tensor {
        &self.sigma_p
    }

    pub fn sigma_r(&self) -> &Tensor {
        &self.sigma_r
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn sampler(&self) -> Result<ModelSampler<'_>> {
        let fp = Factor::of(&self.sigma_p, 1.0)?;
        let fr = Factor::of(&self.sigma_r, 1.0)?;
        let sum = add(&self.sigma_p, &self.sigma_r)?;
        let fmean = Factor::of(&sum, 1.0 / self.group_size as f64)?;
        Ok(ModelSampler {
            model: self,
            fp,
            fr,
            fmean,
        })
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// `F` with `F F^T = scale * m`, keeping only columns with positive eigenvalues.
struct Factor {
    dim: usize,
    rank: usize,
    /// Row-major `dim x rank`.
    data: Vec<f64>,
}

impl Factor {
    fn of(m: &Tensor, scale: f64) -> Result<Self> {
        let dim = m.rows();
        let eig = sym_eig(m)?;
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let keep: Vec<usize> = (0..dim).filter(|&k| eig.values[k] > 1e-14 * top && top > 0.0).collect();
        let rank = keep.len();
        let mut data = vec![0.0; dim * rank];
        for (j, &k) in keep.iter().enumerate() {
            let s = (eig.values[k] * scale).sqrt();
            for i in 0..dim {
                data[i * rank + j] = eig.vectors.at(i, k) * s;
            }
        }
        Ok(Self { dim, rank, data })
    }

    /// Adds `F z` to `out` with fresh standard normal `z`.
    fn add_draw(&self, rng: &mut ChaCha20Rng, z: &mut Vec<f64>, out: &mut [f64]) {
        if self.rank == 0 {
            return;
        }
        z.clear();
        z.extend((0..self.rank).map(|_| standard_normal(rng)));
        for (i, o) in out.iter_mut().enumerate().take(self.dim) {
            *o += dot(&self.data[i * self.rank..(i + 1) * self.rank], z);
        }
    }
}

/// Draws from a [`SignalModel`] using cached covariance factors.
pub struct ModelSampler<'a> {
    model: &'a SignalModel,
    fp: Factor,
    fr: Factor,
    fmean: Factor,
}

const MAX_REJECTIONS: usize = 1000;

impl ModelSampler<'_> {
    /// One signal with `||v|| <= K`; returns the signal and the number of rejected draws.
    pub fn draw(&self, rng: &mut ChaCha20Rng) -> Result<(Vec<f64>, usize)> {
        let mut z = Vec::new();
        let k2 = self.model.clip_bound * self.model.clip_bound;
        for rejected in 0..MAX_REJECTIONS {
            let mut v = self.model.mu.clone();
            self.fp.add_draw(rng, &mut z, &mut v);
            self.fr.add_draw(rng, &mut z, &mut v);
            if dot(&v, &v) <= k2 {
                return Ok((v, rejected));
            }
        }
        Err(Error::Numerical(format!(
            "{MAX_REJECTIONS} consecutive draws exceeded the clip bound {}",
            self.model.clip_bound
        )))
    }

    /// `n` draws and the fraction of raw draws that were rejected.
    pub fn support(&self, n: usize, stream: &RngStream) -> Result<(Vec<Vec<f64>>, f64)> {
        let mut rng = stream.rng();
        let mut rejected = 0usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (v, r) = self.draw(&mut rng)?;
            rejected += r;
            out.push(v);
        }
        Ok((out, rejected as f64 / (n + rejected).max(1) as f64))
    }
}

/// The three-term breakdown of `MSE_orig - MSE_back`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremTerms {
    /// `Tr((I - P P^T) Sigma_r) / L`.
    pub residual: f64,
    /// `sigma_proj^2 (rho^2 D - d)`.
    pub dim_reduction: f64,
    /// `||(I - P P^T) mu||^2 - Tr((I - P P^T) Sigma_p) / L`.
    pub proj_error: f64,
    pub delta: f64,
    pub mse_orig: f64,
    pub mse_back: f64,
}

/// `Tr(P^T S P)` without forming `P P^T`.
fn projected_trace(p: &Projection, s: &Tensor) -> Result<f64> {
    let m = p.matrix();
    let sp = s.matmul(m)?;
    Ok((0..m.rows())
        .map(|i| dot(m.row(i), sp.row(i)))
        .sum())
}

fn trace(s: &Tensor) -> f64 {
    (0..s.rows()).map(|i| s.at(i, i)).sum()
}

pub fn analytic_terms(model: &SignalModel, p: &Projection, sigma_proj: f64, rho: f64) -> Result<TheoremTerms> {
    ensure!(
        p.input_dim() == model.dim(),
        "projection maps {} dims but the model has {}",
        p.input_dim(),
        model.dim()
    );
    ensure!(rho >= 1.0 && rho.is_finite(), "noise ratio must be >= 1, got {rho}");
    ensure!(sigma_proj >= 0.0 && sigma_proj.is_finite(), "sigma_proj must be >= 0");
    let l = model.group_size as f64;
    let (dim, d) = (model.dim() as f64, p.subspace_dim() as f64);
    let tr_p = trace(&model.sigma_p);
    let tr_r = trace(&model.sigma_r);
    let ptr_p = projected_trace(p, &model.sigma_p)?;
    let ptr_r = projected_trace(p, &model.sigma_r)?;
    let res_mu = p.residual(&model.mu)?;
    let bias = dot(&res_mu, &res_mu);

    let residual = (tr_r - ptr_r) / l;
    let dim_reduction = sigma_proj * sigma_proj * (rho * rho * dim - d);
    let proj_error = bias - (tr_p - ptr_p) / l;
    let sigma_orig = rho * sigma_proj;
    let mse_orig = (tr_p + tr_r) / l + sigma_orig * sigma_orig * dim;
    let mse_back = (ptr_p + ptr_r) / l + sigma_proj * sigma_proj * d + bias;
    Ok(TheoremTerms {
        residual,
        dim_reduction,
        proj_error,
        delta: residual + dim_reduction - proj_error,
        mse_orig,
        mse_back,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoEstimate {
    pub rho: f64,
    pub max_norm: f64,
    pub max_proj_norm: f64,
    pub rejection_rate: f64,
}

/// `max ||v|| / max ||P^T v||` over `samples` draws from the model.
pub fn estimate_rho(model: &SignalModel, p: &Projection, samples: usize, stream: &RngStream) -> Result<RhoEstimate> {
    ensure!(samples >= 1, "need at least one support sample");
    let (support, rejection_rate) = model.sampler()?.support(samples, stream)?;
    let mut max_norm: f64 = 0.0;
    let mut max_proj: f64 = 0.0;
    for v in &support {
        max_norm = max_norm.max(dot(v, v).sqrt());
        let u = p.project(v)?;
        max_proj = max_proj.max(dot(&u, &u).sqrt());
    }
    if max_proj == 0.0 {
        return Err(Error::Numerical("every support sample projects to zero".into()));
    }
    Ok(RhoEstimate {
        rho: (max_norm / max_proj).max(1.0),
        max_norm,
        max_proj_norm: max_proj,
        rejection_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McMode {
    /// Draws the group-mean error directly from `N(0, (Sigma_p + Sigma_r) / L)`.
    /// Exact when the clip bound never binds.
    Aggregated,
    /// Draws all `L` signals per trial through the rejection sampler.
    PerSample,
}

/// A sample mean with its batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimates {
    pub trials: usize,
    pub mse_orig: Estimate,
    pub mse_back: Estimate,
    /// Paired difference `MSE_orig - MSE_back`.
    pub diff: Estimate,
    /// `<omega, eta>`: sampling error against privacy noise, expected zero.
    pub cross: Estimate,
    pub rejection_rate: f64,
}

pub const MC_BATCHES: usize = 100;
pub const MC_MIN_TRIALS: usize = 1000;

fn batch_estimate(batch_sums: &[f64], batch_sizes: &[usize]) -> Estimate {
    let total: usize = batch_sizes.iter().sum();
    let mean = pairwise_sum(batch_sums) / total as f64;
    let means: Vec<f64> = batch_sums
        .iter()
        .zip(batch_sizes)
        .map(|(s, &n)| s / n as f64)
        .collect();
    let b = means.len() as f64;
    let var = pairwise_sum(&means.iter().map(|m| (m - mean).powi(2)).collect::<Vec<_>>()) / (b - 1.0);
    Estimate {
        mean,
        std_err: (var / b).sqrt(),
    }
}

/// Monte-Carlo estimates of both errors, split over [`MC_BATCHES`] batches
/// that each own a derived stream; results depend only on `stream` and `trials`.
pub fn monte_carlo_mse(
    model: &SignalModel,
    p: &Projection,
    sigma_orig: f64,
    sigma_proj: f64,
    trials: usize,
    mode: McMode,
    stream: &RngStream,
) -> Result<McEstimates> {
    ensure!(
        trials >= MC_MIN_TRIALS,
        "Monte-Carlo needs at least {MC_MIN_TRIALS} trials, got {trials}"
    );
    ensure!(p.input_dim() == model.dim(), "projection and model dimensions differ");
    ensure!(
        sigma_orig >= 0.0 && sigma_proj >= 0.0 && sigma_orig.is_finite() && sigma_proj.is_finite(),
        "noise scales must be finite and non-negative"
    );
    let sampler = model.sampler()?;
    let dim = model.dim();
    let l = model.group_size;
    let mut sums = [const { Vec::new() }; 4];
    let mut sizes = Vec::with_capacity(MC_BATCHES);
    let mut rejected = 0usize;
    let mut drawn = 0usize;
    for b in 0..MC_BATCHES {
        let n = trials / MC_BATCHES + usize::from(b < trials % MC_BATCHES);
        let mut rng = stream.derive(Purpose::MonteCarlo, &[b as u64]).rng();
        let mut z = Vec::new();
        let mut acc = [0.0f64; 4];
        let mut omega = vec![0.0; dim];
        for _ in 0..n {
            match mode {
                McMode::Aggregated => {
                    omega.iter_mut().for_each(|o| *o = 0.0);
                    sampler.fmean.add_draw(&mut rng, &mut z, &mut omega);
                }
                McMode::PerSample => {
                    omega.iter_mut().for_each(|o| *o = 0.0);
                    for _ in 0..l {
                        let (v, r) = sampler.draw(&mut rng)?;
                        rejected += r;
                        drawn += r + 1;
                        for ((o, vi), mi) in omega.iter_mut().zip(&v).zip(&model.mu) {
                            *o += (vi - mi) / l as f64;
                        }
                    }
                }
            }
            let mut e_orig = 0.0;
            let mut cross = 0.0;
            for &w in &omega {
                let eta = sigma_orig * standard_normal(&mut rng);
                e_orig += (w + eta) * (w + eta);
                cross += w * eta;
            }
            let est: Vec<f64> = model.mu.iter().zip(&omega).map(|(m, w)| m + w).collect();
            let mut u = p.project(&est)?;
            for ui in u.iter_mut() {
                *ui += sigma_proj * standard_normal(&mut rng);
            }
            let back = p.reconstruct(&u)?;
            let e_back: f64 = back.iter().zip(&model.mu).map(|(a, m)| (a - m) * (a - m)).sum();
            acc[0] += e_orig;
            acc[1] += e_back;
            acc[2] += e_orig - e_back;
            acc[3] += cross;
        }
        for (s, a) in sums.iter_mut().zip(acc) {
            s.push(a);
        }
        sizes.push(n);
    }
    Ok(McEstimates {
        trials,
        mse_orig: batch_estimate(&sums[0], &sizes),
        mse_back: batch_estimate(&sums[1], &sizes),
        diff: batch_estimate(&sums[2], &sizes),
        cross: batch_estimate(&sums[3], &sizes),
        rejection_rate: if drawn == 0 { 0.0 } else { rejected as f64 / drawn as f64 },
    })
}
