use std::collections::BTreeMap;

use log::{info, warn};
use rand::Rng;

use super::{SignalRecord, SignalSpec, SignalStore};
use crate::data::LabeledImages;
use crate::error::{ensure, Result};
use crate::extractor::{materialize, ExtractorParams};
use crate::numerics::{gaussian_noise, Purpose, RngStream};
use crate::privacy::{calibrate_noise_multiplier, epsilon_for, PrivacyBudget};
use crate::ser::{discover_subspace, AuxiliarySet, Projection};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSetting {
    /// Smallest noise multiplier meeting the budget.
    Calibrate(PrivacyBudget),
    /// A fixed multiplier; epsilon is reported at `delta`.
    Multiplier { noise_multiplier: f64, delta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub signal: SignalSpec,
    /// Expected batch size `L`, also the fixed denominator of every mean.
    pub group_size: usize,
    pub iterations: usize,
    pub noise: NoiseSetting,
    /// Enables subspace projection with this many dimensions.
    pub subspace_dim: Option<usize>,
    pub seed: u64,
    /// Extra metadata copied into the store (config hash and the like).
    pub tags: BTreeMap<String, String>,
}

/// Includes each of `0..n` independently with probability `q`.
pub fn poisson_sample(n: usize, q: f64, stream: &RngStream) -> Result<Vec<usize>> {
    ensure!(q > 0.0 && q.is_finite(), "sampling rate must be positive, got {q}");
    let q = if q > 1.0 {
        warn!("sampling rate {q} exceeds 1 (group size larger than class); clamping to 1");
        1.0
    } else {
        q
    };
    if q == 1.0 {
        return Ok((0..n).collect());
    }
    let mut rng = stream.rng();
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

/// Noise multiplier, the max sampling rate and the resulting epsilon/delta.
pub(crate) fn resolve_noise(cfg: &SampleConfig, class_sizes: &[usize]) -> Result<(f64, f64, f64, f64)> {
    let min_n = class_sizes.iter().copied().min().unwrap_or(0);
    ensure!(min_n > 0, "every class needs at least one private image");
    let q = (cfg.group_size as f64 / min_n as f64).min(1.0);
    let steps = cfg.iterations as u64;
    Ok(match cfg.noise {
        NoiseSetting::Calibrate(budget) => {
            let nm = calibrate_noise_multiplier(budget, q, steps)?;
            let eps = epsilon_for(q, nm, steps, budget.delta())?;
            (nm, q, eps, budget.delta())
        }
        NoiseSetting::Multiplier { noise_multiplier, delta } => {
            ensure!(
                noise_multiplier >= 0.0 && noise_multiplier.is_finite(),
                "noise multiplier must be finite and non-negative"
            );
            let eps = if noise_multiplier > 0.0 {
                epsilon_for(q, noise_multiplier, steps, delta)?
            } else {
                f64::INFINITY
            };
            (noise_multiplier, q, eps, delta)
        }
    })
}

/// Builds the sealed signal store from private data.
///
/// Noise is calibrated before any image is read, so an infeasible budget
/// aborts without touching the data.
pub fn sample_stage(
    private: &LabeledImages,
    aux: Option<&AuxiliarySet>,
    cfg: &SampleConfig,
) -> Result<SignalStore> {
    cfg.signal.validate()?;
    ensure!(cfg.group_size >= 1, "group size must be at least 1");
    ensure!(cfg.iterations >= 1, "need at least one sampling iteration");
    let shape = cfg.signal.input_shape();
    ensure!(
        private.shape() == shape,
        "private images have shape {:?}, extractor expects {:?}",
        private.shape(),
        shape
    );
    let num_classes = private.num_classes();
    let sizes = private.class_counts();
    let feature_dim = cfg.signal.feature_dim();
    let aux = match cfg.subspace_dim {
        Some(d) => {
            ensure!(d >= 1 && d <= feature_dim, "subspace dimension {d} must be in 1..={feature_dim}");
            let aux = aux.ok_or_else(|| {
                crate::Error::Validation("subspace projection needs an auxiliary set".into())
            })?;
            aux.check_usable(shape, num_classes)?;
            Some(aux)
        }
        None => None,
    };

    let (nm, q_max, epsilon, delta) = resolve_noise(cfg, &sizes)?;
    let sigma = nm * cfg.signal.clip.bound() / cfg.group_size as f64;
    info!("sampling stage: noise multiplier {nm:.6}, sigma {sigma:.3e}, rate {q_max:.4}, epsilon {epsilon:.4}");

    let root = RngStream::new(cfg.seed);
    let class_images: Vec<Vec<&[f64]>> = (0..num_classes).map(|c| private.class_images(c)).collect();
    let aux_images: Vec<Vec<&[f64]>> = match aux {
        Some(a) => (0..num_classes).map(|c| a.images().class_images(c)).collect(),
        None => Vec::new(),
    };
    let denom = cfg.group_size as f64;
    let mut records = Vec::with_capacity(cfg.iterations * num_classes);
    for i in 0..cfg.iterations {
        let theta = root.derive(Purpose::Extractor, &[i as u64]).seed_u64();
        let net = materialize(
            &cfg.signal.extractor,
            ExtractorParams {
                seed: theta,
                init_scale: cfg.signal.init_scale,
            },
        )?;
        for c in 0..num_classes {
            let zeta = root.derive(Purpose::Augment, &[i as u64, c as u64]).seed_u64();
            let f = cfg.signal.signal_fn_with(net.clone(), zeta);
            // The subspace is fit under the same map the private signal goes through.
            let projection: Option<Projection> = match cfg.subspace_dim {
                Some(d) => Some(discover_subspace(&f.features(&aux_images[c])?, d)?),
                None => None,
            };
            let q = (cfg.group_size as f64 / sizes[c] as f64).min(1.0);
            let batch = poisson_sample(
                sizes[c],
                q,
                &root.derive(Purpose::PoissonSample, &[i as u64, c as u64]),
            )?;
            let picked: Vec<&[f64]> = batch.iter().map(|&j| class_images[c][j]).collect();
            let clean = f.aggregate(&picked, denom, projection.as_ref())?;
            let noise_stream = root.derive(Purpose::Noise, &[i as u64, c as u64]);
            let noisy_mean = add_noise(&clean, sigma, &noise_stream)?;
            records.push(SignalRecord {
                iteration: i as u32,
                class: c as u32,
                aug_seed: zeta,
                extractor_seed: theta,
                projection,
                noisy_mean,
            });
        }
    }

    let mut meta = cfg.tags.clone();
    cfg.signal.to_meta(&mut meta);
    let rates: Vec<String> = sizes
        .iter()
        .map(|&n| format!("{:?}", (cfg.group_size as f64 / n as f64).min(1.0)))
        .collect();
    meta.insert("class_rates".into(), rates.join(","));
    meta.insert("sampling_rate".into(), format!("{q_max:?}"));
    meta.insert("noise_multiplier".into(), format!("{nm:?}"));
    meta.insert("sigma".into(), format!("{sigma:?}"));
    meta.insert("group_size".into(), cfg.group_size.to_string());
    meta.insert("steps".into(), cfg.iterations.to_string());
    meta.insert("epsilon".into(), format!("{epsilon:?}"));
    meta.insert("delta".into(), format!("{delta:?}"));
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert(
        "subspace_dim".into(),
        cfg.subspace_dim.map_or("none".into(), |d| d.to_string()),
    );
    SignalStore::seal(num_classes, cfg.iterations, feature_dim, meta, records)
}

pub(crate) fn add_noise(clean: &[f64], sigma: f64, stream: &RngStream) -> Result<Vec<f64>> {
    let noise = gaussian_noise(stream, &[clean.len()], sigma)?;
    Ok(clean.iter().zip(noise.data()).map(|(a, b)| a + b).collect())
}
