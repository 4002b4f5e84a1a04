use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// An `(epsilon, delta)` differential-privacy budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        ensure!(
            epsilon > 0.0 && epsilon.is_finite(),
            "epsilon must be positive and finite, got {epsilon}"
        );
        ensure!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1), got {delta}");
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// A fraction `num / den` strictly between 0 and 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetFraction {
    num: u64,
    den: u64,
}

impl BudgetFraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        ensure!(
            den > 0 && num > 0 && num < den,
            "budget fraction {num}/{den} must lie strictly inside (0, 1)"
        );
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// Nearest fraction with denominator `10^6`, reduced.
    pub fn from_f64(f: f64) -> Result<Self> {
        ensure!(f > 0.0 && f < 1.0, "budget fraction must lie in (0, 1), got {f}");
        let den = 1_000_000u64;
        let num = (f * den as f64).round() as u64;
        Self::new(num.clamp(1, den - 1), den)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `value * num / den`, with the remainder chosen so the two parts add
    /// back to `value` exactly in floating point.
    fn split(&self, value: f64) -> (f64, f64) {
        let first = value * self.num as f64 / self.den as f64;
        let second = value - first;
        // The remainder is within a few ulps of a representable exact complement.
        let nudge = |x: f64, k: i64| f64::from_bits((x.to_bits() as i64 + k) as u64);
        for k in 0..=16i64 {
            for cand in [nudge(second, k), nudge(second, -k)] {
                if first + cand == value && cand > 0.0 {
                    return (first, cand);
                }
            }
        }
        for k in 1..=16i64 {
            for a in [nudge(first, k), nudge(first, -k)] {
                let b = value - a;
                if a + b == value && a > 0.0 && b > 0.0 {
                    return (a, b);
                }
            }
        }
        (first, second)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Splits `total` into `(f * total, (1 - f) * total)` such that the parts
/// sum back to the total in floating point.
pub fn split_budget(total: PrivacyBudget, f: BudgetFraction) -> Result<(PrivacyBudget, PrivacyBudget)> {
    let (e1, e2) = f.split(total.epsilon);
    let (d1, d2) = f.split(total.delta);
    Ok((PrivacyBudget::new(e1, d1)?, PrivacyBudget::new(e2, d2)?))
}
