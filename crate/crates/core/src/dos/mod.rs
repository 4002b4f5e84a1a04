//! Decoupled sampling and optimization.
//!
//! [`sample_stage`] is the only code that reads private images. It emits a
//! sealed [`SignalStore`] of noisy aggregated signals tagged with the seeds
//! needed to rebuild the extractor and augmentation. [`optimize_stage`] takes
//! nothing but that store.

mod optimize;
mod sample;
mod store;

use std::collections::BTreeMap;

use crate::augment::{self, AugParam, AugmentPolicy, ImageShape};
use crate::error::{ensure, Error, Result};
use crate::extractor::{materialize, ExtractorParams, ExtractorSpec, Network};
use crate::numerics::{RngStream, Tensor};
use crate::privacy::ClipConfig;
use crate::ser::Projection;

#[cfg(test)]
use optimize::Picker;
pub use optimize::{
    optimize_stage, synth_signal, OptimizeConfig, OptimizeOutcome, OptimizerKind, Schedule, Selection,
    SyntheticSet,
};
pub use sample::{poisson_sample, sample_stage, NoiseSetting, SampleConfig};
pub use store::{SignalRecord, SignalStore, STORE_MAGIC, STORE_VERSION};

/// Everything needed to rebuild the per-example signal map
/// `x -> clip_K(f_theta(A_zeta(x)))` from a pair of seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSpec {
    pub extractor: ExtractorSpec,
    pub init_scale: f64,
    pub augment: AugmentPolicy,
    pub clip: ClipConfig,
}

impl SignalSpec {
    pub fn input_shape(&self) -> ImageShape {
        self.extractor.input_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.augment.validate()?;
        ensure!(
            self.init_scale > 0.0 && self.init_scale.is_finite(),
            "extractor init scale must be positive"
        );
        Ok(())
    }

    pub(crate) fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let (c, h, w) = self.extractor.input_shape;
        meta.insert("input_shape".into(), format!("{c}x{h}x{w}"));
        meta.insert("extractor".into(), self.extractor.layers_string());
        meta.insert("feature_dim".into(), self.extractor.feature_dim.to_string());
        meta.insert("init_scale".into(), format!("{:?}", self.init_scale));
        meta.insert("augment".into(), self.augment.to_spec_string());
        meta.insert("clip_bound".into(), format!("{:?}", self.clip.bound()));
    }

    pub(crate) fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("store metadata lacks {k:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("store metadata {k:?} is not a number")))
        };
        let dims: Vec<usize> = get("input_shape")?
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("bad input_shape in store metadata".into()))?;
        let [c, h, w] = dims[..] else {
            return Err(Error::Format("bad input_shape in store metadata".into()));
        };
        let extractor = ExtractorSpec::from_layers((c, h, w), ExtractorSpec::parse_layers(get("extractor")?)?)?;
        let spec = Self {
            extractor,
            init_scale: num("init_scale")?,
            augment: AugmentPolicy::parse(get("augment")?)?,
            clip: ClipConfig::new(num("clip_bound")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The concrete map for one `(theta, zeta)` pair.
    pub fn signal_fn(&self, extractor_seed: u64, aug_seed: u64) -> Result<SignalFn> {
        let net = materialize(
            &self.extractor,
            ExtractorParams {
                seed: extractor_seed,
                init_scale: self.init_scale,
            },
        )?;
        Ok(self.signal_fn_with(net, aug_seed))
    }

    pub(crate) fn signal_fn_with(&self, net: Network, aug_seed: u64) -> SignalFn {
        let shape = self.input_shape();
        let aug = augment::sample_params(&self.augment, &RngStream::new(aug_seed), shape);
        SignalFn {
            net,
            aug,
            shape,
            clip: self.clip,
        }
    }
}

/// `x -> clip_K(f_theta(A_zeta(x)))`, shared verbatim by the real and synthetic paths.
/// One augmentation draw is applied to every image of a batch.
pub struct SignalFn {
    net: Network,
    aug: Vec<AugParam>,
    shape: ImageShape,
    clip: ClipConfig,
}

impl SignalFn {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.shape.0 * self.shape.1 * self.shape.2,
            "image has {} pixels, expected shape {:?}",
            x.len(),
            self.shape
        );
        let a = augment::apply_with_params(&self.aug, x, self.shape);
        Ok(self.clip.clip(&self.net.forward(&a)?))
    }

    /// One row of `feature` per image.
    pub fn features(&self, images: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.net.feature_dim());
        for x in images {
            data.extend(self.feature(x)?);
        }
        Tensor::new(vec![images.len(), self.net.feature_dim()], data)
    }

    /// `P^T (1/denom) sum_j feature(x_j)`; without a projection the sum stays in feature space.
    pub fn aggregate(&self, images: &[&[f64]], denom: f64, projection: Option<&Projection>) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.net.feature_dim()];
        for x in images {
            for (s, v) in sum.iter_mut().zip(self.feature(x)?) {
                *s += v;
            }
        }
        sum.iter_mut().for_each(|s| *s /= denom);
        match projection {
            Some(p) => p.project(&sum),
            None => Ok(sum),
        }
    }

    /// Mean signal of `images` and the gradient of `||target - mean||^2` with
    /// respect to every image. Returns `(loss, gradients)`.
    pub(crate) fn matching_loss_grad(
        &self,
        images: &[&[f64]],
        target: &[f64],
        projection: Option<&Projection>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let m = images.len() as f64;
        let mut traces = Vec::with_capacity(images.len());
        let mut mean = vec![0.0; self.net.feature_dim()];
        for x in images {
            let a = augment::apply_with_params(&self.aug, x, self.shape);
            let trace = self.net.forward_trace(&a)?;
            for (s, v) in mean.iter_mut().zip(self.clip.clip(trace.output())) {
                *s += v / m;
            }
            traces.push(trace);
        }
        let signal = match projection {
            Some(p) => p.project(&mean)?,
            None => mean,
        };
        ensure!(
            signal.len() == target.len(),
            "signal has {} entries but the record holds {}",
            signal.len(),
            target.len()
        );
        let diff: Vec<f64> = signal.iter().zip(target).map(|(s, t)| s - t).collect();
        let loss = crate::numerics::dot(&diff, &diff);
        let mut g_mean: Vec<f64> = diff.iter().map(|d| 2.0 * d / m).collect();
        if let Some(p) = projection {
            g_mean = p.reconstruct(&g_mean)?;
        }
        let mut grads = Vec::with_capacity(images.len());
        for trace in &traces {
            let g_feat = self.clip.clip_vjp(trace.output(), &g_mean);
            let (g_aug, _) = self.net.backward(trace, &g_feat, false)?;
            grads.push(augment::adjoint_with_params(&self.aug, &g_aug, self.shape));
        }
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests;
