//! Rényi-DP of the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `z`, the per-step RDP at order
//! `alpha` is `log(A_alpha) / (alpha - 1)` with
//!
//! ```text
//! A_alpha = E_{x ~ N(0, z^2)} [ ((1 - q) + q * exp((2x - 1) / (2 z^2)))^alpha ]
//! ```
//!
//! Integer orders use the exact binomial expansion of that expectation;
//! fractional orders integrate it numerically.

use crate::error::{ensure, Result};

/// Default order grid: `1.25, 1.5, ..., 63.5` followed by `64, 128, 256`.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=254).map(|k| k as f64 * 0.25).collect();
    orders.extend([64.0, 128.0, 256.0]);
    orders
}

pub(crate) fn validate_orders(orders: &[f64]) -> Result<()> {
    ensure!(!orders.is_empty(), "order grid must not be empty");
    ensure!(
        orders.iter().all(|&a| a > 1.0 && a.is_finite()),
        "Rényi orders must be finite and > 1"
    );
    ensure!(
        orders.windows(2).all(|w| w[0] < w[1]),
        "Rényi orders must be strictly increasing"
    );
    Ok(())
}

/// Per-step RDP of the subsampled Gaussian mechanism at each order.
pub fn rdp_step(q: f64, noise_multiplier: f64, orders: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        q > 0.0 && q <= 1.0,
        "sampling rate must lie in (0, 1], got {q}"
    );
    ensure!(
        noise_multiplier > 0.0 && noise_multiplier.is_finite(),
        "noise multiplier must be positive and finite, got {noise_multiplier}"
    );
    validate_orders(orders)?;
    Ok(orders
        .iter()
        .map(|&a| rdp_single(q, noise_multiplier, a))
        .collect())
}

fn rdp_single(q: f64, z: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * z * z);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_integer(q, z, alpha as u64)
    } else {
        log_a_quadrature(q, z, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Exact `log A_alpha` for integer `alpha` via the binomial expansion
/// `sum_k C(alpha, k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 z^2))`.
pub(crate) fn log_a_integer(q: f64, z: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1q = (-q).ln_1p();
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom
            + (alpha - k) as f64 * log_1q
            + kf * log_q
            + (kf * kf - kf) / (2.0 * z * z);
        acc = log_add_exp(acc, term);
    }
    acc
}

/// `log A_alpha` by trapezoidal quadrature on a uniform grid.
///
/// The integrand is smooth and decays like a Gaussian in both tails, so the
/// trapezoid rule converges geometrically once the step resolves both the
/// noise scale `z` and the `z^2` width of the mixture transition.
pub(crate) fn log_a_quadrature(q: f64, z: f64, alpha: f64) -> f64 {
    let z2 = z * z;
    let log_q = q.ln();
    let log_1q = (-q).ln_1p();
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * z2).ln();
    let log_f = |x: f64| {
        let mix = log_add_exp(log_1q, log_q + (2.0 * x - 1.0) / (2.0 * z2));
        log_norm - x * x / (2.0 * z2) + alpha * mix
    };

    // Mass concentrates between the null mode at 0 and the shifted mode
    // near alpha (reached when the q-branch dominates).
    let lo = -40.0 * z - 1.0;
    let hi = alpha + 40.0 * z + 1.0;
    let h = (z / 16.0).min(z2 / 8.0).max(1e-5);
    let n = ((hi - lo) / h).ceil() as usize + 1;

    let mut max_l = f64::NEG_INFINITY;
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let l = log_f(lo + i as f64 * h);
            max_l = max_l.max(l);
            l
        })
        .collect();
    let sum: f64 = values.iter().map(|l| (l - max_l).exp()).sum();
    max_l + sum.ln() + h.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_closed_form() {
        let r = rdp_step(1.0, 1.0, &[2.0]).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        let r = rdp_step(1.0, 2.0, &[3.0]).unwrap();
        assert!((r[0] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn full_batch_binomial_and_quadrature_agree_with_closed_form() {
        // At q = 1 the binomial sum collapses to its last term and the
        // integral becomes a Gaussian moment generating function.
        for &(z, alpha) in &[(1.0, 2u64), (2.0, 3), (0.7, 10)] {
            let closed = alpha as f64 * (alpha as f64 - 1.0) / (2.0 * z * z);
            let quad = log_a_quadrature(1.0 - 1e-15, z, alpha as f64);
            assert!((quad - closed).abs() < 1e-8 * closed.max(1.0), "{quad} vs {closed}");
        }
    }

    #[test]
    fn quadrature_matches_binomial_at_integer_orders() {
        for &q in &[0.01, 0.1, 0.5] {
            for &z in &[0.6, 1.0, 3.0] {
                for alpha in [2u64, 3, 5, 8, 16, 32] {
                    let exact = log_a_integer(q, z, alpha) / (alpha as f64 - 1.0);
                    let quad = log_a_quadrature(q, z, alpha as f64) / (alpha as f64 - 1.0);
                    assert!(
                        (exact - quad).abs() < 1e-8,
                        "q={q} z={z} alpha={alpha}: {exact} vs {quad}"
                    );
                }
            }
        }
    }

    #[test]
    fn vanishing_rate_shrinks_increments() {
        let orders = default_orders();
        let mut prev: Option<Vec<f64>> = None;
        for q in [1e-1, 1e-2, 1e-3, 1e-4] {
            let cur = rdp_step(q, 1.0, &orders).unwrap();
            if let Some(p) = prev {
                for (a, b) in p.iter().zip(&cur) {
                    assert!(b <= a, "rdp grew when q shrank");
                }
            }
            prev = Some(cur);
        }
        let last = prev.unwrap();
        assert!(last[0] < 1e-6);
    }

    #[test]
    fn monotone_in_rate_and_noise() {
        let orders = default_orders();
        let a = rdp_step(0.05, 1.2, &orders).unwrap();
        let b = rdp_step(0.1, 1.2, &orders).unwrap();
        let c = rdp_step(0.1, 0.9, &orders).unwrap();
        for i in 0..orders.len() {
            assert!(a[i] <= b[i] && b[i] <= c[i]);
        }
    }

    #[test]
    fn invalid_inputs() {
        let o = default_orders();
        assert!(rdp_step(0.0, 1.0, &o).is_err());
        assert!(rdp_step(1.5, 1.0, &o).is_err());
        assert!(rdp_step(0.5, 0.0, &o).is_err());
        assert!(rdp_step(0.5, 1.0, &[2.0, 1.5]).is_err());
        assert!(rdp_step(0.5, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let o = default_orders();
        assert_eq!(o.first(), Some(&1.25));
        assert!(o.contains(&63.5));
        assert_eq!(&o[o.len() - 3..], &[64.0, 128.0, 256.0]);
        validate_orders(&o).unwrap();
    }
}
