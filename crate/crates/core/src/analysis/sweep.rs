//! Error-versus-dimension sweeps and the random model families they run on.

use std::fmt::Write as _;

use super::{analytic_terms, monte_carlo_mse, McEstimates, McMode, SignalModel, TheoremTerms};
use crate::error::{ensure, Result};
use crate::numerics::{dot, orthonormalize_columns, standard_normal, Purpose, RngStream, Tensor};
use crate::ser::{discover_subspace, Projection};

pub const CSV_HEADER: &str = "model_id,D,d,noise_multiplier,mse_orig,mse_back,term_residual,term_dimreduction,\
term_projerror,mc_mse_orig,se_mse_orig,mc_mse_back,se_mse_back,mc_diff,se_diff";

#[derive(Clone, Debug, PartialEq)]
pub struct MseReport {
    pub model_id: String,
    pub dim: usize,
    pub subspace_dim: usize,
    pub noise_multiplier: f64,
    pub sigma_orig: f64,
    pub sigma_proj: f64,
    pub rho: f64,
    pub terms: TheoremTerms,
    pub mc: Option<McEstimates>,
}

impl MseReport {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        let mut row = format!(
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.model_id,
            self.dim,
            self.subspace_dim,
            self.noise_multiplier,
            t.mse_orig,
            t.mse_back,
            t.residual,
            t.dim_reduction,
            t.proj_error
        );
        match &self.mc {
            Some(mc) => {
                for e in [mc.mse_orig, mc.mse_back, mc.diff] {
                    write!(row, ",{:?},{:?}", e.mean, e.std_err).unwrap();
                }
            }
            None => row.push_str(",,,,,,"),
        }
        row
    }
}

/// Where the error-minimizing subspace dimension falls for one noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Minimizer at the largest dimension.
    Low,
    /// Minimizer strictly inside the grid.
    Intermediate,
    /// Minimizer at the smallest dimension.
    High,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Low => "low",
            Regime::Intermediate => "intermediate",
            Regime::High => "high",
        }
    }
}

pub fn classify_regime(mse_back: &[f64]) -> Regime {
    let best = mse_back
        .iter()
        .enumerate()
        .fold(0, |b, (k, &v)| if v < mse_back[b] { k } else { b });
    if best + 1 == mse_back.len() {
        Regime::Low
    } else if best == 0 {
        Regime::High
    } else {
        Regime::Intermediate
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub dims: Vec<usize>,
    pub noise_multipliers: Vec<f64>,
    /// Noise-multiplier major: `reports[n * dims.len() + k]`.
    pub reports: Vec<MseReport>,
    pub regimes: Vec<Regime>,
}

impl SweepTable {
    pub fn column(&self, noise_index: usize) -> &[MseReport] {
        let k = self.dims.len();
        &self.reports[noise_index * k..(noise_index + 1) * k]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

fn first_columns(p: &Projection, d: usize) -> Result<Projection> {
    let m = p.matrix();
    let mut data = Vec::with_capacity(m.rows() * d);
    for i in 0..m.rows() {
        data.extend_from_slice(&m.row(i)[..d]);
    }
    Projection::new(Tensor::new(vec![m.rows(), d], data)?)
}

/// Sweeps subspace dimension and noise multiplier on one model.
///
/// Projections come from PCA on `support` draws of the auxiliary model; noise
/// scales follow `sigma = nm * max||.|| / L` over `support` draws of the
/// model. `trials = 0` skips Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    model: &SignalModel,
    aux: &SignalModel,
    model_id: &str,
    dims: &[usize],
    noise_multipliers: &[f64],
    trials: usize,
    support: usize,
    stream: &RngStream,
) -> Result<SweepTable> {
    ensure!(!dims.is_empty() && !noise_multipliers.is_empty(), "sweep grids must not be empty");
    ensure!(dims.windows(2).all(|w| w[0] < w[1]), "dimension grid must be strictly increasing");
    let d_max = *dims.last().unwrap();
    ensure!(
        dims[0] >= 1 && d_max <= model.dim(),
        "dimensions must lie in 1..={}",
        model.dim()
    );
    ensure!(support >= d_max.max(2), "need at least {} support samples", d_max.max(2));
    ensure!(aux.dim() == model.dim(), "auxiliary model dimension differs");
    let sampler = model.sampler()?;
    let (aux, _) = aux.sampler()?.support(support, &stream.derive(Purpose::Auxiliary, &[]))?;
    let feats = Tensor::new(vec![aux.len(), model.dim()], aux.concat())?;
    let full = discover_subspace(&feats, d_max)?;
    let (samples, _) = sampler.support(support, &stream.derive(Purpose::Support, &[]))?;
    let l = model.group_size() as f64;
    let max_norm = samples.iter().map(|v| dot(v, v).sqrt()).fold(0.0, f64::max);

    let mut projections = Vec::with_capacity(dims.len());
    for &d in dims {
        let p = first_columns(&full, d)?;
        let mut max_proj: f64 = 0.0;
        for v in &samples {
            let u = p.project(v)?;
            max_proj = max_proj.max(dot(&u, &u).sqrt());
        }
        projections.push((p, max_proj));
    }

    let mut reports = Vec::with_capacity(dims.len() * noise_multipliers.len());
    let mut regimes = Vec::with_capacity(noise_multipliers.len());
    for (n, &nm) in noise_multipliers.iter().enumerate() {
        ensure!(nm >= 0.0 && nm.is_finite(), "noise multipliers must be non-negative");
        let sigma_orig = nm * max_norm / l;
        for (k, (p, max_proj)) in projections.iter().enumerate() {
            let rho = (max_norm / max_proj).max(1.0);
            let sigma_proj = nm * max_proj / l;
            let terms = analytic_terms(model, p, sigma_proj, rho)?;
            let mc = if trials > 0 {
                let s = stream.derive(Purpose::MonteCarlo, &[n as u64, k as u64]);
                Some(monte_carlo_mse(model, p, rho * sigma_proj, sigma_proj, trials, McMode::Aggregated, &s)?)
            } else {
                None
            };
            reports.push(MseReport {
                model_id: model_id.to_string(),
                dim: model.dim(),
                subspace_dim: p.subspace_dim(),
                noise_multiplier: nm,
                sigma_orig,
                sigma_proj,
                rho,
                terms,
                mc,
            });
        }
        let col: Vec<f64> = reports[n * dims.len()..].iter().map(|r| r.terms.mse_back).collect();
        regimes.push(classify_regime(&col));
    }
    Ok(SweepTable {
        dims: dims.to_vec(),
        noise_multipliers: noise_multipliers.to_vec(),
        reports,
        regimes,
    })
}

fn random_basis(dim: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Result<Tensor> {
    let g = Tensor::new(vec![dim, dim], (0..dim * dim).map(|_| standard_normal(rng)).collect())?;
    orthonormalize_columns(&g)
}

/// `Q diag(w) Q^T` restricted to the first `w.len()` columns of `Q`.
fn spectral(q: &Tensor, w: &[f64]) -> Result<Tensor> {
    let dim = q.rows();
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let v: f64 = w.iter().enumerate().map(|(k, wk)| wk * q.at(i, k) * q.at(j, k)).sum();
            m[i * dim + j] = v;
            m[j * dim + i] = v;
        }
    }
    Tensor::new(vec![dim, dim], m)
}

fn clip_for(mu: &[f64], sigma_p: &Tensor, sigma_r: &Tensor) -> f64 {
    let tr: f64 = (0..sigma_p.rows()).map(|i| sigma_p.at(i, i) + sigma_r.at(i, i)).sum();
    // Twice the RMS norm: the bound essentially never binds.
    2.0 * (dot(mu, mu) + tr).sqrt()
}

/// Random model of dimension `dim`: random basis, decaying mean energy,
/// low-rank informative covariance and a dense residual covariance.
pub fn random_model(dim: usize, group_size: usize, stream: &RngStream) -> Result<SignalModel> {
    ensure!(dim >= 2, "random models need dimension >= 2");
    let mut rng = stream.derive(Purpose::Model, &[]).rng();
    let q = random_basis(dim, &mut rng)?;
    let coef: Vec<f64> = (0..dim)
        .map(|k| standard_normal(&mut rng) / ((k + 1) as f64).sqrt())
        .collect();
    let mu = q.matvec(&coef)?;
    let rank = 1 + (rand::Rng::random_range(&mut rng, 0..dim / 2));
    let scale = 0.2 + rand::Rng::random::<f64>(&mut rng);
    let lambda: Vec<f64> = (0..rank).map(|k| scale / (k + 1) as f64).collect();
    let sigma_p = spectral(&q, &lambda)?;
    let s2 = 0.01 + 0.09 * rand::Rng::random::<f64>(&mut rng);
    let w: Vec<f64> = (0..dim * dim).map(|_| standard_normal(&mut rng)).collect();
    let mut r = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let v = dot(&w[i * dim..(i + 1) * dim], &w[j * dim..(j + 1) * dim]) * s2 / dim as f64;
            r[i * dim + j] = v;
            r[j * dim + i] = v;
        }
    }
    let sigma_r = Tensor::new(vec![dim, dim], r)?;
    let k = clip_for(&mu, &sigma_p, &sigma_r);
    SignalModel::new(mu, sigma_p, sigma_r, k, group_size)
}

/// The model used by the dimension/noise sweep and its auxiliary counterpart.
///
/// Along the `k`-th direction of a random basis the model has mean energy
/// `1/k` and informative variance `0.5/k`, plus isotropic residual variance
/// `0.01`. The auxiliary model is zero-mean with variance `1/k` along the same
/// basis, so its principal directions rank the basis but do not single out
/// the model's mean.
pub fn fixed_sweep_model(dim: usize, group_size: usize, stream: &RngStream) -> Result<(SignalModel, SignalModel)> {
    let mut rng = stream.derive(Purpose::Model, &[]).rng();
    let q = random_basis(dim, &mut rng)?;
    let coef: Vec<f64> = (0..dim).map(|k| 1.0 / ((k + 1) as f64).sqrt()).collect();
    let mu = q.matvec(&coef)?;
    let lambda: Vec<f64> = (0..dim).map(|k| 0.5 / (k + 1) as f64).collect();
    let sigma_p = spectral(&q, &lambda)?;
    let sigma_r = Tensor::eye(dim).scale(0.01);
    let k = clip_for(&mu, &sigma_p, &sigma_r);
    let model = SignalModel::new(mu, sigma_p, sigma_r, k, group_size)?;
    let aux_cov = spectral(&q, &coef.iter().map(|c| c * c).collect::<Vec<_>>())?;
    let zero = Tensor::zeros(&[dim, dim]);
    let ka = clip_for(&vec![0.0; dim], &aux_cov, &zero);
    let aux = SignalModel::new(vec![0.0; dim], aux_cov, zero, ka, group_size)?;
    Ok((model, aux))
}
