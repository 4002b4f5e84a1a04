use crate::error::{ensure, Result};
use crate::numerics::norm;

/// Clipping bound `K` on per-example signal norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    bound: f64,
}

impl ClipConfig {
    pub fn new(bound: f64) -> Result<Self> {
        ensure!(
            bound > 0.0 && bound.is_finite(),
            "clip bound must be positive and finite, got {bound}"
        );
        Ok(Self { bound })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `v * min(1, K / ||v||)`; the zero vector maps to itself.
    pub fn clip(&self, v: &[f64]) -> Vec<f64> {
        let s = self.scale(norm(v));
        v.iter().map(|x| x * s).collect()
    }

    fn scale(&self, n: f64) -> f64 {
        if n > self.bound {
            self.bound / n
        } else {
            1.0
        }
    }

    /// Vector-Jacobian product of [`ClipConfig::clip`] at `v`.
    ///
    /// Inside the ball clipping is the identity. Outside it is
    /// `K v / ||v||`, whose Jacobian is `(K/||v||)(I - v v^T / ||v||^2)`.
    pub fn clip_vjp(&self, v: &[f64], upstream: &[f64]) -> Vec<f64> {
        let n = norm(v);
        if n <= self.bound {
            return upstream.to_vec();
        }
        let s = self.bound / n;
        let proj = crate::numerics::dot(v, upstream) / (n * n);
        v.iter()
            .zip(upstream)
            .map(|(vi, ui)| s * (ui - vi * proj))
            .collect()
    }
}

/// Free-function form of [`ClipConfig::clip`].
pub fn clip(v: &[f64], bound: f64) -> Result<Vec<f64>> {
    Ok(ClipConfig::new(bound)?.clip(v))
}
