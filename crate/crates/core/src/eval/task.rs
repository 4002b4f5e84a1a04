//! Seeded toy classification tasks built from class-conditional mixtures.

use rand::Rng;

use crate::data::{ClassMixture, LabeledImages, MixtureComponent, MixtureSpec};
use crate::error::{ensure, Result};
use crate::numerics::{Purpose, RngStream};
use crate::augment::ImageShape;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub num_classes: usize,
    pub shape: ImageShape,
    pub components_per_class: usize,
    pub blobs_per_component: usize,
    pub pixel_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            shape: (1, 16, 16),
            components_per_class: 2,
            blobs_per_component: 3,
            pixel_std: 0.3,
            train_per_class: 500,
            test_per_class: 250,
            seed: 2024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Blob {
    cy: f64,
    cx: f64,
    width: f64,
    amp: f64,
}

/// A task: the mixture plus its train and test splits drawn from disjoint streams.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub spec: ToyTaskSpec,
    blobs: Vec<Vec<Vec<Blob>>>,
    pub mixture: MixtureSpec,
    pub train: LabeledImages,
    pub test: LabeledImages,
}

const BACKGROUND: f64 = 0.25;

fn render(shape: ImageShape, blobs: &[Blob]) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut img = vec![BACKGROUND; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut v = BACKGROUND;
                for b in blobs {
                    let r2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                    v += b.amp * (-r2 / (2.0 * b.width * b.width)).exp();
                }
                img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn mixture_from(shape: ImageShape, blobs: &[Vec<Vec<Blob>>], pixel_std: f64) -> MixtureSpec {
    MixtureSpec {
        shape,
        classes: blobs
            .iter()
            .map(|comps| ClassMixture {
                components: comps
                    .iter()
                    .map(|bl| MixtureComponent {
                        weight: 1.0,
                        mean: render(shape, bl),
                        std: pixel_std,
                    })
                    .collect(),
            })
            .collect(),
    }
}

impl ToyTask {
    pub fn generate(spec: &ToyTaskSpec) -> Result<Self> {
        ensure!(spec.num_classes >= 2 && spec.num_classes <= 256, "toy task needs 2..=256 classes");
        ensure!(spec.components_per_class >= 1 && spec.blobs_per_component >= 1, "toy mixture is empty");
        ensure!(spec.train_per_class >= 1 && spec.test_per_class >= 1, "toy splits must be nonempty");
        ensure!(spec.pixel_std >= 0.0, "pixel noise must be >= 0");
        let (_, h, w) = spec.shape;
        ensure!(h >= 4 && w >= 4, "toy images must be at least 4x4");
        let root = RngStream::new(spec.seed);
        let mut rng = root.derive(Purpose::Task, &[0]).rng();
        let blobs: Vec<Vec<Vec<Blob>>> = (0..spec.num_classes)
            .map(|_| {
                (0..spec.components_per_class)
                    .map(|_| {
                        (0..spec.blobs_per_component)
                            .map(|_| Blob {
                                cy: rng.random_range(2.0..h as f64 - 2.0),
                                cx: rng.random_range(2.0..w as f64 - 2.0),
                                width: rng.random_range(1.2..2.5),
                                amp: rng.random_range(0.3..0.6),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mixture = mixture_from(spec.shape, &blobs, spec.pixel_std);
        let train = mixture.sample(spec.train_per_class, &root.derive(Purpose::Task, &[1]))?;
        let test = mixture.sample(spec.test_per_class, &root.derive(Purpose::Task, &[2]))?;
        Ok(Self {
            spec: spec.clone(),
            blobs,
            mixture,
            train,
            test,
        })
    }

    /// A stand-in for imperfect public or generated data: blob centers
    /// jittered by up to `shift` pixels and amplitudes scaled by up to
    /// `1 +- amp_jitter`, drawn from `stream`.
    pub fn perturbed_mixture(&self, shift: f64, amp_jitter: f64, stream: &RngStream) -> Result<MixtureSpec> {
        ensure!(shift >= 0.0 && (0.0..1.0).contains(&amp_jitter), "invalid perturbation");
        let mut rng = stream.rng();
        let mut jitter = |lim: f64| if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        let blobs: Vec<Vec<Vec<Blob>>> = self
            .blobs
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|bl| {
                        bl.iter()
                            .map(|b| Blob {
                                cy: b.cy + jitter(shift),
                                cx: b.cx + jitter(shift),
                                width: b.width,
                                amp: b.amp * (1.0 + jitter(amp_jitter)),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mix = mixture_from(self.spec.shape, &blobs, self.spec.pixel_std);
        mix.validate()?;
        Ok(mix)
    }
}
