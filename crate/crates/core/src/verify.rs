//! The property suite behind `dpdistill verify`: accountant oracles, the
//! noise-ratio rule for projected signals, numerical hygiene, the
//! Monte-Carlo check of the error decomposition and the sweep regimes.
//!
//! [`Faults`] injects known defects so negative controls can show the
//! checks actually bite.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::analysis::{
    analytic_terms, estimate_rho, fixed_sweep_model, monte_carlo_mse, random_model, sweep, McMode, Regime,
    SweepTable,
};
use crate::augment::AugmentPolicy;
use crate::config::{SweepSection, TheoremSection};
use crate::dos::SignalSpec;
use crate::error::Result;
use crate::extractor::{materialize, ExtractorParams, ExtractorSpec};
use crate::numerics::{dot, standard_normal, sym_eig, Purpose, RngStream, Tensor};
use crate::privacy::{
    calibrate_noise_multiplier, convert_to_dp, default_orders, epsilon_for, rdp_step, AccountantState, ClipConfig,
    PrivacyBudget,
};
use crate::ser::{discover_subspace, Projection};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// Deliberate defects for negative controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Faults {
    /// Multiplies every calibrated noise scale before it is re-accounted.
    pub sigma_scale: f64,
    /// Skews the projections handed to the subspace checks.
    pub skew_projection: bool,
}

impl Default for Faults {
    fn default() -> Self {
        Self {
            sigma_scale: 1.0,
            skew_projection: false,
        }
    }
}

/// A column-orthonormal matrix with its first column tilted towards the second.
fn skewed(p: &Projection) -> Result<Projection> {
    let m = p.matrix();
    let mut data = m.data().to_vec();
    if m.cols() >= 2 {
        for r in 0..m.rows() {
            data[r * m.cols()] += 0.1 * m.at(r, 1);
        }
    } else {
        data[0] += 0.1;
    }
    Ok(Projection::new_unchecked(Tensor::new(vec![m.rows(), m.cols()], data)?))
}

const ROUND_TRIP_CASES: [(f64, f64, f64, u64); 5] = [
    (1.0, 1e-5, 0.01, 200),
    (1.0, 1e-5, 0.1, 200),
    (1.0, 1e-5, 1.0, 1),
    (0.5, 1e-6, 0.05, 1000),
    (4.0, 1e-5, 0.2, 50),
];

/// `min_alpha T alpha / (2 z^2) + log(1/delta) / (alpha - 1)` over a
/// 1e-3-spaced grid on `(1, 400)`.
fn dense_grid_gaussian_epsilon(z: f64, steps: f64, delta: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut a: f64 = 1.0005;
    while a < 400.0 {
        best = best.min(steps * a / (2.0 * z * z) + (1.0 / delta).ln() / (a - 1.0));
        a += 1e-3;
    }
    best
}

/// Closed form at full sampling, conversion against a dense grid, and the
/// calibrate-then-account round trip.
pub fn accountant_checks(faults: Faults) -> Result<Vec<Check>> {
    let orders = default_orders();
    let mut worst: f64 = 0.0;
    for z in [0.5, 0.8, 1.0, 2.5, 10.0] {
        let rdp = rdp_step(1.0, z, &orders)?;
        for (a, r) in orders.iter().zip(&rdp) {
            worst = worst.max((r - a / (2.0 * z * z)).abs());
        }
    }
    let closed = Check::new(
        "accountant.full_rate_closed_form",
        worst <= 1e-10,
        format!("max |rdp - alpha/(2 z^2)| = {worst:.3e} (tol 1e-10)"),
    );

    let mut worst: f64 = 0.0;
    for (z, steps, delta) in [(1.0, 1u64, 1e-5), (2.0, 10, 1e-5), (5.0, 100, 1e-6), (3.0, 4, 1e-3), (20.0, 1000, 1e-5)] {
        let mut st = AccountantState::new(1.0, z)?;
        st.compose(steps);
        let (eps, _) = convert_to_dp(&st, delta)?;
        worst = worst.max((eps - dense_grid_gaussian_epsilon(z, steps as f64, delta)).abs());
    }
    let conversion = Check::new(
        "accountant.conversion_dense_grid",
        worst <= 1e-3,
        format!("max |eps - dense-grid eps| = {worst:.3e} (tol 1e-3)"),
    );

    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for (eps, delta, q, steps) in ROUND_TRIP_CASES {
        let nm = calibrate_noise_multiplier(PrivacyBudget::new(eps, delta)?, q, steps)?;
        let got = epsilon_for(q, nm * faults.sigma_scale, steps, delta)? / eps;
        lo = lo.min(got);
        hi = hi.max(got);
    }
    let round_trip = Check::new(
        "accountant.round_trip",
        lo >= 0.999 && hi <= 1.0,
        format!("eps'/eps in [{lo:.6}, {hi:.6}] (want [0.999, 1])"),
    );
    Ok(vec![closed, conversion, round_trip])
}

/// Noise scaled to the projected sensitivity keeps the multiplier, hence the
/// whole curve and the budget, unchanged.
pub fn lemma_checks(faults: Faults) -> Result<Vec<Check>> {
    let (model, aux) = fixed_sweep_model(64, 100, &RngStream::new(3))?;
    let (feats, _) = aux.sampler()?.support(500, &RngStream::new(4))?;
    let p = discover_subspace(&Tensor::new(vec![feats.len(), model.dim()], feats.concat())?, 8)?;
    let rho = estimate_rho(&model, &p, 2000, &RngStream::new(5))?;
    let l = model.group_size() as f64;
    let (sens_orig, sens_proj) = (rho.max_norm / l, rho.max_proj_norm / l);

    let orders = default_orders();
    let mut gap: f64 = 0.0;
    for (q, nm) in [(0.01, 1.1), (0.1, 7.0), (1.0, 3.0)] {
        // Same multiplier through two sensitivity scales.
        let a = rdp_step(q, (nm * sens_orig) / sens_orig, &orders)?;
        let b = rdp_step(q, (nm * sens_proj) / sens_proj, &orders)?;
        let c = rdp_step(q, nm, &orders)?;
        // sigma / sensitivity round-trips the multiplier only to an ulp.
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            gap = gap.max((x - z).abs().max((y - z).abs()) / z.abs().max(f64::MIN_POSITIVE));
        }
    }
    let curves = Check::new(
        "noise_ratio.equal_multiplier_curves",
        gap <= 1e-9,
        format!("sensitivities {sens_orig:.4e} and {sens_proj:.4e}, max relative curve gap {gap:.1e} (tol 1e-9)"),
    );

    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for (eps, delta, q, steps) in ROUND_TRIP_CASES {
        let budget = PrivacyBudget::new(eps, delta)?;
        let sigma_orig = calibrate_noise_multiplier(budget, q, steps)? * sens_orig;
        let sigma_proj = sigma_orig * (sens_proj / sens_orig) * faults.sigma_scale;
        worst_ratio = worst_ratio.max(((sigma_orig / sigma_proj) / (sens_orig / sens_proj) - 1.0).abs());
        let got = epsilon_for(q, sigma_proj / sens_proj, steps, delta)? / eps;
        lo = lo.min(got);
        hi = hi.max(got);
    }
    let ratio = Check::new(
        "noise_ratio.sensitivity_ratio_round_trip",
        lo >= 0.999 && hi <= 1.0 && worst_ratio < 1e-12,
        format!("rho {:.4}, noise/sensitivity ratio gap {worst_ratio:.1e}, eps'/eps in [{lo:.6}, {hi:.6}]", rho.rho),
    );
    Ok(vec![curves, ratio])
}

fn random_matrix(rows: usize, cols: usize, stream: &RngStream) -> Result<Tensor> {
    let mut rng = stream.rng();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| standard_normal(&mut rng)).collect())
}

fn max_rel_gradient_error(spec: &SignalSpec, seeds: u64) -> Result<f64> {
    let len = spec.extractor.input_len();
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let root = RngStream::new(100 + s);
        let f = spec.signal_fn(root.child(0).seed_u64(), root.child(1).seed_u64())?;
        let mut rng = root.child(2).rng();
        let imgs: Vec<Vec<f64>> = (0..2).map(|_| (0..len).map(|_| rng.random::<f64>()).collect()).collect();
        let target: Vec<f64> = (0..spec.feature_dim()).map(|_| 0.1 * standard_normal(&mut rng)).collect();
        let loss = |z: &[Vec<f64>]| -> Result<f64> {
            let r: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
            Ok(f.matching_loss_grad(&r, &target, None)?.0)
        };
        let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
        let (_, grads) = f.matching_loss_grad(&refs, &target, None)?;
        // Entries are compared against the largest gradient entry, since
        // tiny entries carry finite-difference roundoff well above 1e-4.
        let scale = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
        let h = 1e-6;
        for j in 0..imgs.len() {
            for k in (0..len).step_by(7) {
                let mut plus = imgs.clone();
                plus[j][k] += h;
                let mut minus = imgs.clone();
                minus[j][k] -= h;
                let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
                worst = worst.max((fd - grads[j][k]).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Clip invariants, projection orthonormality, the Pythagoras identity,
/// gradient checks and eigendecomposition residuals.
pub fn hygiene_checks(faults: Faults) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let root = RngStream::new(2024);

    let mut rng = root.derive(Purpose::Misc, &[0]).rng();
    let mut norm_gap: f64 = 0.0;
    let mut idem_gap: f64 = 0.0;
    for t in 0..1000 {
        let k = 0.1 + 3.0 * rng.random::<f64>();
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let v: Vec<f64> = (0..1 + t % 64).map(|_| scale * standard_normal(&mut rng)).collect();
        let clip = ClipConfig::new(k)?;
        let once = clip.clip(&v);
        let twice = clip.clip(&once);
        norm_gap = norm_gap.max(dot(&once, &once).sqrt() / k - 1.0);
        idem_gap = idem_gap.max(once.iter().zip(&twice).map(|(a, b)| (a - b).abs() / k).fold(0.0, f64::max));
    }
    checks.push(Check::new(
        "hygiene.clip",
        norm_gap <= 1e-12 && idem_gap <= 1e-12,
        format!("max ||clip(v)||/K - 1 = {norm_gap:.1e}, idempotence gap {idem_gap:.1e} (tol 1e-12)"),
    ));

    let mut ortho: f64 = 0.0;
    let mut pyth: f64 = 0.0;
    for (k, &(n, dim, d)) in [(40usize, 128usize, 16usize), (500, 64, 8), (10, 32, 10), (200, 128, 64)].iter().enumerate() {
        let s = root.derive(Purpose::Misc, &[1, k as u64]);
        let mut p = discover_subspace(&random_matrix(n, dim, &s.child(0))?, d)?;
        if faults.skew_projection {
            p = skewed(&p)?;
        }
        ortho = ortho.max(p.orthonormality_error());
        let mut rng = s.child(1).rng();
        for _ in 0..50 {
            let v: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
            let u = p.project(&v)?;
            let r = p.residual(&v)?;
            let vv = dot(&v, &v);
            pyth = pyth.max((vv - dot(&u, &u) - dot(&r, &r)).abs() / vv);
        }
    }
    checks.push(Check::new(
        "hygiene.projection_orthonormality",
        ortho < 1e-8,
        format!("max |P^T P - I| = {ortho:.2e} (tol 1e-8)"),
    ));
    checks.push(Check::new(
        "hygiene.pythagoras",
        pyth < 1e-10,
        format!("max relative gap {pyth:.2e} (tol 1e-10)"),
    ));

    let desk = SignalSpec {
        extractor: ExtractorSpec::desk_default(1),
        init_scale: 1.0,
        augment: AugmentPolicy::parse("crop:1.5,flip:0.5,brightness:0.8:1.2,cutout:4")?,
        clip: ClipConfig::new(0.5)?,
    };
    let ext = max_rel_gradient_error(&desk, 3)?;
    checks.push(Check::new(
        "hygiene.signal_gradient",
        ext < 1e-4,
        format!("max error vs central differences, relative to the largest entry, {ext:.2e} (tol 1e-4)"),
    ));

    let net = materialize(
        &ExtractorSpec::desk_default(1),
        ExtractorParams {
            seed: 11,
            init_scale: 1.0,
        },
    )?;
    let mut rng = root.derive(Purpose::Misc, &[2]).rng();
    let x: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
    let u: Vec<f64> = (0..net.feature_dim()).map(|_| standard_normal(&mut rng)).collect();
    let g = net.input_gradient(&x, &u)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in (0..x.len()).step_by(3) {
        let mut xp = x.clone();
        xp[k] += h;
        let mut xm = x.clone();
        xm[k] -= h;
        let fd = (dot(&net.forward(&xp)?, &u) - dot(&net.forward(&xm)?, &u)) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6));
    }
    checks.push(Check::new(
        "hygiene.extractor_gradient",
        worst < 1e-4,
        format!("max relative error vs central differences {worst:.2e} (tol 1e-4)"),
    ));

    let mut resid: f64 = 0.0;
    for (k, &n) in [5usize, 32, 128].iter().enumerate() {
        let a = random_matrix(n, n, &root.derive(Purpose::Misc, &[3, k as u64]))?;
        let sym = a.matmul(&a.transpose()?)?.scale(1.0 / n as f64);
        let eig = sym_eig(&sym)?;
        let av = sym.matmul(&eig.vectors)?;
        for i in 0..n {
            for j in 0..n {
                resid = resid.max((av.at(i, j) - eig.vectors.at(i, j) * eig.values[j]).abs());
            }
        }
    }
    checks.push(Check::new(
        "hygiene.eigen_residual",
        resid < 1e-8,
        format!("max |A V - V diag(l)| = {resid:.2e} (tol 1e-8)"),
    ));
    Ok(checks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremRow {
    pub model: usize,
    pub dim: usize,
    pub subspace_dim: usize,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub mc_diff: f64,
    /// `sqrt(se_orig^2 + se_back^2)`.
    pub combined_se: f64,
    /// Standard error of the paired difference, usually much smaller.
    pub paired_se: f64,
}

impl TheoremRow {
    pub fn z_score(&self) -> f64 {
        (self.delta - self.mc_diff).abs() / self.combined_se
    }
}

pub const THEOREM_CSV_HEADER: &str = "model_id,D,d,noise_multiplier,analytic_delta,mc_diff,combined_se,paired_se,z";

/// Analytic `MSE_orig - MSE_back` against Monte Carlo on random models.
pub fn theorem_rows(cfg: &TheoremSection, faults: Faults) -> Result<Vec<TheoremRow>> {
    let root = RngStream::new(cfg.seed);
    (0..cfg.models).into_par_iter().map(|m| theorem_row(cfg, faults, &root, m)).collect()
}

fn theorem_row(cfg: &TheoremSection, faults: Faults, root: &RngStream, m: usize) -> Result<TheoremRow> {
    let s = root.child(m as u64);
    let mut rng = s.derive(Purpose::Misc, &[]).rng();
    let dim = rng.random_range(8..=cfg.max_dim);
    let d = rng.random_range(1..=cfg.max_subspace_dim.min(dim - 1));
    let nm = rng.random_range(0.5..5.0);
    let model = random_model(dim, cfg.group_size, &s)?;
    let (support, _) = model.sampler()?.support(cfg.support.max(d), &s.derive(Purpose::Auxiliary, &[]))?;
    let mut p = discover_subspace(&Tensor::new(vec![support.len(), dim], support.concat())?, d)?;
    if faults.skew_projection {
        p = skewed(&p)?;
    }
    let rho = estimate_rho(&model, &p, cfg.support, &s.derive(Purpose::Support, &[]))?;
    let sigma_proj = nm * rho.max_proj_norm / cfg.group_size as f64 * faults.sigma_scale;
    let terms = analytic_terms(&model, &p, sigma_proj, rho.rho)?;
    let mc = monte_carlo_mse(
        &model,
        &p,
        rho.rho * sigma_proj,
        sigma_proj,
        cfg.trials,
        McMode::Aggregated,
        &s.derive(Purpose::MonteCarlo, &[]),
    )?;
    Ok(TheoremRow {
        model: m,
        dim,
        subspace_dim: d,
        noise_multiplier: nm,
        delta: terms.delta,
        mc_diff: mc.diff.mean,
        combined_se: (mc.mse_orig.std_err.powi(2) + mc.mse_back.std_err.powi(2)).sqrt(),
        paired_se: mc.diff.std_err,
    })
}

pub fn theorem_csv(rows: &[TheoremRow]) -> String {
    let mut out = format!("{THEOREM_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.9e},{:.9e},{:.3e},{:.3e},{:.3}\n",
            r.model,
            r.dim,
            r.subspace_dim,
            r.noise_multiplier,
            r.delta,
            r.mc_diff,
            r.combined_se,
            r.paired_se,
            r.z_score()
        ));
    }
    out
}

pub fn theorem_check(cfg: &TheoremSection, rows: &[TheoremRow]) -> Check {
    let worst = rows.iter().map(TheoremRow::z_score).fold(0.0, f64::max);
    let failing = rows.iter().filter(|r| r.z_score() > cfg.tolerance_se).count();
    Check::new(
        "mse.decomposition",
        failing == 0 && !rows.is_empty(),
        format!(
            "{} models, {} trials each: worst |delta - mc| = {worst:.2} combined SE, {failing} above {}",
            rows.len(),
            cfg.trials,
            cfg.tolerance_se
        ),
    )
}

pub fn run_sweep(cfg: &SweepSection) -> Result<SweepTable> {
    let (model, aux) = fixed_sweep_model(cfg.dim, cfg.group_size, &RngStream::new(cfg.model_seed))?;
    sweep(
        &model,
        &aux,
        "fixed",
        &cfg.dims,
        &cfg.noise_multipliers,
        cfg.trials,
        cfg.support,
        &RngStream::new(cfg.seed),
    )
}

/// Low noise: decreasing in `d`; middle noise: interior minimum; high noise:
/// projecting helps for every `d <= D/4`.
pub fn sweep_checks(table: &SweepTable) -> Vec<Check> {
    let n = table.noise_multipliers.len();
    let back = |k: usize| -> Vec<f64> { table.column(k).iter().map(|r| r.terms.mse_back).collect() };
    let low = back(0);
    let decreasing = low.windows(2).all(|w| w[1] <= w[0]);
    let mid = n / 2;
    let high = table.column(n - 1);
    let dim = high.first().map_or(0, |r| r.dim);
    let small: Vec<_> = high.iter().filter(|r| 4 * r.subspace_dim <= dim).collect();
    let helps = !small.is_empty() && small.iter().all(|r| r.terms.mse_back < r.terms.mse_orig);
    vec![
        Check::new(
            "sweep.low_noise_decreasing",
            decreasing,
            format!("nm {}: regime {}", table.noise_multipliers[0], table.regimes[0].name()),
        ),
        Check::new(
            "sweep.middle_noise_interior_minimum",
            table.regimes[mid] == Regime::Intermediate,
            format!("nm {}: regime {}", table.noise_multipliers[mid], table.regimes[mid].name()),
        ),
        Check::new(
            "sweep.high_noise_projection_helps",
            helps,
            format!(
                "nm {}: mse_back < mse_orig for {}/{} dims <= D/4",
                table.noise_multipliers[n - 1],
                small.iter().filter(|r| r.terms.mse_back < r.terms.mse_orig).count(),
                small.len()
            ),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suites_pass() {
        for c in accountant_checks(Faults::default())
            .unwrap()
            .into_iter()
            .chain(lemma_checks(Faults::default()).unwrap())
            .chain(hygiene_checks(Faults::default()).unwrap())
        {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn halved_sigma_is_caught() {
        let faults = Faults {
            sigma_scale: 0.5,
            ..Faults::default()
        };
        let acc = accountant_checks(faults).unwrap();
        assert!(!acc.iter().find(|c| c.name == "accountant.round_trip").unwrap().passed);
        assert!(!all_passed(&lemma_checks(faults).unwrap()));
    }

    #[test]
    fn skewed_projection_is_caught() {
        let faults = Faults {
            skew_projection: true,
            ..Faults::default()
        };
        let h = hygiene_checks(faults).unwrap();
        let ortho = h.iter().find(|c| c.name == "hygiene.projection_orthonormality").unwrap();
        assert!(!ortho.passed, "{ortho}");
    }

    #[test]
    fn small_theorem_run_passes() {
        let cfg = TheoremSection {
            models: 3,
            max_dim: 24,
            max_subspace_dim: 6,
            trials: 20_000,
            support: 500,
            ..TheoremSection::default()
        };
        let rows = theorem_rows(&cfg, Faults::default()).unwrap();
        assert!(theorem_check(&cfg, &rows).passed, "{}", theorem_csv(&rows));
        assert_eq!(rows, theorem_rows(&cfg, Faults::default()).unwrap());
    }
}
