//! Clipping, Gaussian noise calibration and Rényi-DP accounting for the
//! Poisson-subsampled Gaussian mechanism.

mod accountant;
mod budget;
mod clip;
mod rdp;

pub use accountant::{
    calibrate_noise_multiplier, calibrate_sigma, convert_to_dp, epsilon_for, AccountantState,
};
pub use budget::{split_budget, BudgetFraction, PrivacyBudget};
pub use clip::{clip, ClipConfig};
pub use rdp::{default_orders, rdp_step};
