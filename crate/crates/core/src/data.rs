//! Labeled image collections, their on-disk format, and seeded
//! class-conditional Gaussian-mixture image generators.
//!
//! Images are stored as a `DSRT` tensor of shape `(N, C, H, W)` with a
//! sidecar holding one label byte per image.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::augment::ImageShape;
use crate::error::{ensure, Error, Result};
use crate::numerics::{standard_normal, RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    shape: ImageShape,
    pixels: Vec<f64>,
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabeledImages {
    pub fn new(shape: ImageShape, pixels: Vec<f64>, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        let per = shape.0 * shape.1 * shape.2;
        ensure!(per > 0, "image shape must be positive");
        ensure!(
            pixels.len() == per * labels.len(),
            "{} pixels do not fill {} images of shape {:?}",
            pixels.len(),
            labels.len(),
            shape
        );
        ensure!(num_classes > 0 && num_classes <= 256, "class count must be in 1..=256");
        ensure!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label out of range for {num_classes} classes"
        );
        ensure!(pixels.iter().all(|v| v.is_finite()), "pixels must be finite");
        Ok(Self {
            shape,
            pixels,
            labels,
            num_classes,
        })
    }

    /// Builds a set from per-class image lists (class `c` gets label `c`).
    pub fn from_classes(shape: ImageShape, classes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let num_classes = classes.len();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (c, imgs) in classes.into_iter().enumerate() {
            for img in imgs {
                pixels.extend(img);
                labels.push(c as u8);
            }
        }
        Self::new(shape, pixels, labels, num_classes)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] as usize == c).collect()
    }

    pub fn class_images(&self, c: usize) -> Vec<&[f64]> {
        self.class_indices(c).into_iter().map(|i| self.image(i)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let (c, h, w) = self.shape;
        Tensor::new(vec![self.len(), c, h, w], self.pixels.clone())
    }

    pub fn write(&self, images: &Path, labels: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(images)?);
        self.to_tensor()?.write_to(&mut w)?;
        w.flush()?;
        std::fs::write(labels, &self.labels)?;
        Ok(())
    }

    /// Reads the tensor and label sidecar; the class count is one more than the largest label.
    pub fn read(images: &Path, labels: &Path) -> Result<Self> {
        let t = Tensor::read_from(BufReader::new(File::open(images)?))?;
        let mut lab = Vec::new();
        File::open(labels)?.read_to_end(&mut lab)?;
        Self::from_tensor(&t, lab, None)
    }

    pub fn from_tensor(t: &Tensor, labels: Vec<u8>, num_classes: Option<usize>) -> Result<Self> {
        let shape = match *t.shape() {
            [n, c, h, w] => {
                if n != labels.len() {
                    return Err(Error::Format(format!(
                        "{n} images but {} labels",
                        labels.len()
                    )));
                }
                (c, h, w)
            }
            _ => {
                return Err(Error::Format(format!(
                    "image tensor must have shape (N, C, H, W), got {:?}",
                    t.shape()
                )))
            }
        };
        let classes = num_classes.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1));
        Self::new(shape, t.data().to_vec(), labels, classes)
    }
}

/// One Gaussian component: a mean image with isotropic pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMixture {
    pub components: Vec<MixtureComponent>,
}

/// Per-class Gaussian mixtures over images, clipped to `[0, 1]` on sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub shape: ImageShape,
    pub classes: Vec<ClassMixture>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.shape.0 * self.shape.1 * self.shape.2;
        ensure!(n > 0, "mixture image shape must be positive");
        ensure!(!self.classes.is_empty(), "mixture needs at least one class");
        for (c, cm) in self.classes.iter().enumerate() {
            ensure!(!cm.components.is_empty(), "class {c} has no mixture components");
            for comp in &cm.components {
                ensure!(
                    comp.weight > 0.0 && comp.weight.is_finite(),
                    "class {c}: component weights must be positive"
                );
                ensure!(comp.std >= 0.0 && comp.std.is_finite(), "class {c}: std must be >= 0");
                ensure!(comp.mean.len() == n, "class {c}: component mean has wrong size");
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `n` images of class `c`, deterministic in `stream`.
    pub fn sample_class(&self, c: usize, n: usize, stream: &RngStream) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        ensure!(c < self.classes.len(), "class {c} out of range");
        let comps = &self.classes[c].components;
        let total: f64 = comps.iter().map(|k| k.weight).sum();
        let mut rng = stream.rng();
        Ok((0..n)
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                let mut pick = comps.len() - 1;
                for (k, comp) in comps.iter().enumerate() {
                    if u < comp.weight {
                        pick = k;
                        break;
                    }
                    u -= comp.weight;
                }
                let comp = &comps[pick];
                comp.mean
                    .iter()
                    .map(|&m| {
                        let v = if comp.std > 0.0 {
                            m + comp.std * standard_normal(&mut rng)
                        } else {
                            m
                        };
                        v.clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect())
    }

    /// `n_per_class` images for every class, each class on its own sub-stream.
    pub fn sample(&self, n_per_class: usize, stream: &RngStream) -> Result<LabeledImages> {
        let classes = (0..self.num_classes())
            .map(|c| self.sample_class(c, n_per_class, &stream.child(c as u64)))
            .collect::<Result<Vec<_>>>()?;
        LabeledImages::from_classes(self.shape, classes)
    }
}
