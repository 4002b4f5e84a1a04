//! Counter-based random streams keyed by `(master_seed, path)`.
//!
//! A stream is a pure value. Materializing it as a generator always yields
//! the same sequence, so anything derived from randomness (augmentation
//! parameters, extractor weights, noise) can be stored as a single integer
//! and regenerated later.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{ensure, Result};

/// Purpose tags used as the first element of a stream path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Augment = 1,
    Extractor = 2,
    PoissonSample = 3,
    Noise = 4,
    SyntheticInit = 5,
    RecordSelect = 6,
    Auxiliary = 7,
    Task = 8,
    Classifier = 9,
    MonteCarlo = 10,
    Model = 11,
    Support = 12,
    Misc = 99,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
        }
    }

    pub fn with_path(master_seed: u64, path: &[u64]) -> Self {
        Self {
            master_seed,
            path: path.to_vec(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream with one more path component.
    pub fn child(&self, component: u64) -> Self {
        let mut path = self.path.clone();
        path.push(component);
        Self {
            master_seed: self.master_seed,
            path,
        }
    }

    /// Child stream for `(purpose, components...)`.
    pub fn derive(&self, purpose: Purpose, components: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.push(purpose as u64);
        path.extend_from_slice(components);
        Self {
            master_seed: self.master_seed,
            path,
        }
    }

    fn key_words(&self) -> [u64; 4] {
        // Length-prefixed so that paths [a] and [a, 0] never collide.
        let mut h = splitmix64(self.master_seed ^ 0x5DEE_CE66_D1CE_4E5B);
        h = splitmix64(h ^ self.path.len() as u64);
        for &p in &self.path {
            h = splitmix64(h ^ splitmix64(p));
        }
        let mut words = [0u64; 4];
        for (k, w) in words.iter_mut().enumerate() {
            h = splitmix64(h.wrapping_add(k as u64));
            *w = h;
        }
        words
    }

    /// A single integer summarizing the stream, suitable for storing as a seed.
    pub fn seed_u64(&self) -> u64 {
        self.key_words()[0]
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(self.key_words()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha20Rng::from_seed(seed)
    }
}

/// Tensor of i.i.d. `N(0, sigma^2)` draws from `stream`.
pub fn gaussian_noise(stream: &RngStream, shape: &[usize], sigma: f64) -> Result<Tensor> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        "noise scale must be a finite non-negative number, got {sigma}"
    );
    let n: usize = shape.iter().product();
    if sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let mut rng = stream.rng();
    let data = (0..n)
        .map(|_| sigma * standard_normal(&mut rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data)
}

#[inline]
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Fills `out` with standard normal draws.
pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = standard_normal(rng);
    }
}
