use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{SignalRecord, SignalSpec, SignalStore};
use crate::augment::ImageShape;
use crate::data::LabeledImages;
use crate::error::{ensure, Error, Result};
use crate::numerics::{standard_normal, Purpose, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Per-pixel step scaled by a running root-mean-square of past gradients.
    Adaptive,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Uniform with replacement.
    Uniform,
    /// Every record once per epoch, in a seeded random order.
    ShuffledEpochs,
    /// Step `t` uses record `t mod I1`.
    InOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub images_per_class: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub selection: Selection,
    pub init_std: f64,
    /// Decay of the adaptive second-moment average.
    pub beta: f64,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            images_per_class: 5,
            iterations: 4000,
            learning_rate: 0.01,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Adaptive,
            selection: Selection::Uniform,
            init_std: 0.1,
            beta: 0.99,
            seed: 0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.images_per_class >= 1, "need at least one synthetic image per class");
        ensure!(self.iterations >= 1, "need at least one optimization iteration");
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning rate must be finite and non-negative"
        );
        ensure!(self.init_std >= 0.0 && self.init_std.is_finite(), "init std must be >= 0");
        ensure!((0.0..1.0).contains(&self.beta), "beta must lie in [0, 1)");
        Ok(())
    }
}

/// Distilled images with their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    shape: ImageShape,
    images_per_class: usize,
    /// Per class, `M` images back to back.
    images: Vec<Vec<f64>>,
    second_moments: Vec<Vec<f64>>,
    step: u64,
}

impl SyntheticSet {
    /// `N(0.5, init_std^2)` pixels clamped to `[0, 1]`.
    pub fn init(shape: ImageShape, num_classes: usize, m: usize, init_std: f64, stream: &RngStream) -> Self {
        let n = shape.0 * shape.1 * shape.2 * m;
        let images = (0..num_classes)
            .map(|c| {
                let mut rng = stream.child(c as u64).rng();
                (0..n)
                    .map(|_| (0.5 + init_std * standard_normal(&mut rng)).clamp(0.0, 1.0))
                    .collect()
            })
            .collect();
        Self {
            shape,
            images_per_class: m,
            images,
            second_moments: vec![vec![0.0; n]; num_classes],
            step: 0,
        }
    }

    pub fn from_labeled(set: &LabeledImages) -> Result<Self> {
        let counts = set.class_counts();
        let m = counts[0];
        ensure!(
            m > 0 && counts.iter().all(|&k| k == m),
            "synthetic sets need the same positive count in every class, got {counts:?}"
        );
        let images: Vec<Vec<f64>> = (0..set.num_classes())
            .map(|c| set.class_images(c).concat())
            .collect();
        let second_moments = images.iter().map(|v| vec![0.0; v.len()]).collect();
        Ok(Self {
            shape: set.shape(),
            images_per_class: m,
            images,
            second_moments,
            step: 0,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.images.len()
    }

    pub fn images_per_class(&self) -> usize {
        self.images_per_class
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn image_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn class_images(&self, c: usize) -> Vec<&[f64]> {
        self.images[c].chunks_exact(self.image_len()).collect()
    }

    pub fn to_labeled(&self) -> Result<LabeledImages> {
        let classes = (0..self.num_classes())
            .map(|c| self.class_images(c).into_iter().map(<[f64]>::to_vec).collect())
            .collect();
        LabeledImages::from_classes(self.shape, classes)
    }

    pub fn write(&self, images: &Path, labels: &Path) -> Result<()> {
        self.to_labeled()?.write(images, labels)
    }

    /// 8-bit preview grid, one row per class with a 1-pixel gap.
    /// Returns `(width, height, channels, pixels)` in row-major interleaved order.
    pub fn preview_grid(&self) -> (usize, usize, usize, Vec<u8>) {
        let (ch, h, w) = self.shape;
        let out_ch = if ch == 1 { 1 } else { 3 };
        let m = self.images_per_class;
        let gw = m * (w + 1) + 1;
        let gh = self.num_classes() * (h + 1) + 1;
        let mut buf = vec![255u8; gw * gh * out_ch];
        for c in 0..self.num_classes() {
            for (j, img) in self.class_images(c).into_iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        let (gy, gx) = (c * (h + 1) + 1 + y, j * (w + 1) + 1 + x);
                        for k in 0..out_ch {
                            let v = img[(k.min(ch - 1) * h + y) * w + x];
                            buf[(gy * gw + gx) * out_ch + k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                    }
                }
            }
        }
        (gw, gh, out_ch, buf)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub synthetic: SyntheticSet,
    /// Matching loss averaged over classes, one entry per iteration.
    pub loss_trace: Vec<f64>,
}

/// The synthetic signal `P^T (1/M) sum_j F(z_j)` under a record's seeds.
pub fn synth_signal(spec: &SignalSpec, images: &[&[f64]], record: &SignalRecord) -> Result<Vec<f64>> {
    ensure!(!images.is_empty(), "need at least one synthetic image");
    let f = spec.signal_fn(record.extractor_seed, record.aug_seed)?;
    f.aggregate(images, images.len() as f64, record.projection.as_ref())
}

pub(super) struct Picker {
    pub(super) mode: Selection,
    pub(super) n: usize,
    pub(super) rng: rand_chacha::ChaCha20Rng,
    pub(super) order: Vec<usize>,
    pub(super) t: usize,
}

impl Picker {
    pub(super) fn next(&mut self) -> usize {
        let k = match self.mode {
            Selection::Uniform => self.rng.random_range(0..self.n),
            Selection::InOrder => self.t % self.n,
            Selection::ShuffledEpochs => {
                if self.t % self.n == 0 {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                }
                self.order[self.t % self.n]
            }
        };
        self.t += 1;
        k
    }
}

/// Distills `M` images per class by matching the stored noisy signals.
///
/// Takes only the store: no private data is reachable from here.
pub fn optimize_stage(store: &SignalStore, cfg: &OptimizeConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::State("signal store has no records".into()));
    }
    let spec = store.signal_spec()?;
    let root = RngStream::new(cfg.seed);
    let mut set = SyntheticSet::init(
        spec.input_shape(),
        store.num_classes(),
        cfg.images_per_class,
        cfg.init_std,
        &root.derive(Purpose::SyntheticInit, &[]),
    );
    let len = set.image_len();
    let mut trace = vec![0.0; cfg.iterations];
    for c in 0..store.num_classes() {
        let records = store.class_records(c);
        let mut picker = Picker {
            mode: cfg.selection,
            n: records.len(),
            rng: root.derive(Purpose::RecordSelect, &[c as u64]).rng(),
            order: Vec::new(),
            t: 0,
        };
        for (t, slot) in trace.iter_mut().enumerate() {
            let rec = records[picker.next()];
            let f = spec.signal_fn(rec.extractor_seed, rec.aug_seed)?;
            let imgs = set.class_images(c);
            let (loss, grads) = f.matching_loss_grad(&imgs, &rec.noisy_mean, rec.projection.as_ref())?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "matching loss diverged at iteration {t}, class {c} (record {})",
                    rec.iteration
                )));
            }
            *slot += loss / store.num_classes() as f64;
            let z = &mut set.images[c];
            let v = &mut set.second_moments[c];
            let bias = 1.0 - cfg.beta.powi(t as i32 + 1);
            let lr = cfg.schedule.rate(cfg.learning_rate, t, cfg.iterations);
            for (j, g) in grads.iter().enumerate() {
                for k in 0..len {
                    let idx = j * len + k;
                    let step = match cfg.optimizer {
                        OptimizerKind::Sgd => g[k],
                        OptimizerKind::Adaptive => {
                            v[idx] = cfg.beta * v[idx] + (1.0 - cfg.beta) * g[k] * g[k];
                            g[k] / ((v[idx] / bias).sqrt() + 1e-12)
                        }
                    };
                    z[idx] = (z[idx] - lr * step).clamp(0.0, 1.0);
                }
            }
        }
    }
    set.step = cfg.iterations as u64;
    Ok(OptimizeOutcome {
        synthetic: set,
        loss_trace: trace,
    })
}
