//! Volumes `v_B(phi) = lim n!/m^n int_B B_{m phi} e^{-2 m phi}` from ladders of spectra,
//! the Monge-Ampere targets they converge to, and the exact per-`m` comparisons behind the
//! invariance of the volume under fractional log shifts.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::bergman::{bergman_diag, build_norm_table, Layout, NormTable, TableConfig};
use crate::error::{Error, Result};
use crate::quadrature::{integrate_log_cube, ln_add, moment_1d, MomentEngine, QuadConfig};
use crate::toeplitz::{axis_trace, diagonal_spectrum_with, Spectrum};
use crate::weights::{determinant, PolydiscPair, RadialProfile, ReinhardtWeight};

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Relative size below which a Monge-Ampere density is treated as zero.
const DEGENERATE_REL: f64 = 1e-12;

/// `n! (2/pi)^n int_B det(d dbar phi)` by tensor quadrature in polar coordinates.
///
/// Returns the value and the quadrature's relative error estimate.
pub fn ma_target(w: &ReinhardtWeight, pair: &PolydiscPair, cfg: &QuadConfig) -> Result<(f64, f64)> {
    if w.dim != pair.dim() {
        return Err(Error::InvalidDomain("polydisc and weight dimensions differ".into()));
    }
    if w.profiles.iter().all(|p| p.is_flat()) {
        // Pure log weights: the isotropic Hessian has rank n - 1, so the density vanishes.
        return Ok((0.0, 0.0));
    }
    let n = w.dim;
    let radii = pair.inner.clone();
    let ln_jac: f64 = radii.iter().map(|r| (2.0 * PI * r).ln()).sum();
    let lf = |u: &[f64]| -> f64 {
        let x: Vec<f64> = u.iter().zip(&radii).map(|(t, r)| t * r).collect();
        let z: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        // Underflowed nodes can land on the polar set, which has measure zero.
        let Ok(h) = w.complex_hessian(&z) else { return f64::NEG_INFINITY };
        let d = determinant(&h).re;
        // Hadamard: 0 <= det <= prod H_ii for a positive semidefinite Hessian.  Values at
        // rounding level of that bound come from a singular matrix and count as zero.
        let hadamard: f64 = (0..n).map(|i| h[i][i].re).product();
        if d > DEGENERATE_REL * hadamard {
            d.ln() + x.iter().map(|v| v.ln()).sum::<f64>() + ln_jac
        } else {
            f64::NEG_INFINITY
        }
    };
    let q = integrate_log_cube(&lf, n, cfg);
    let scale = factorial(n) * (2.0 / PI).powi(n as i32);
    Ok((scale * q.value(), q.rel_err))
}

#[derive(Clone, Debug, Serialize)]
pub struct LadderPoint {
    pub m: u32,
    /// `n! trace / m^n`.
    pub scaled_trace: f64,
    pub trace: f64,
    pub trace2: f64,
    #[serde(rename = "N_m")]
    pub n_m: usize,
    pub tail_estimate: f64,
    pub clamp_events: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct VolumeEstimate {
    pub weight_hash: String,
    pub ladder: Vec<LadderPoint>,
    /// Intercept of the least-squares fit `scaled_trace = a + b/m`.
    pub extrapolated: f64,
    pub slope: f64,
    pub target: f64,
    pub rel_gap: f64,
}

impl VolumeEstimate {
    pub fn csv(&self) -> String {
        let mut s = String::from("m,scaled_trace,trace,trace2,N_m\n");
        for p in &self.ladder {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{}", p.m, p.scaled_trace, p.trace, p.trace2, p.n_m);
        }
        s
    }

    /// Finiteness check on the ladder: every scaled trace is at most `2 target + 0.5`.
    pub fn ladder_bounded(&self) -> bool {
        self.ladder.iter().all(|p| p.scaled_trace <= 2.0 * self.target + 0.5)
    }

    /// Whether `N_m <= v/(1 - eps) m^n/n! (1 + slack)` at every ladder point.
    pub fn number_estimate_holds(&self, dim: usize, eps: f64, slack: f64) -> bool {
        self.ladder.iter().all(|p| {
            let bound = self.extrapolated / (1.0 - eps) * (p.m as f64).powi(dim as i32) / factorial(dim);
            p.n_m as f64 <= bound * (1.0 + slack)
        })
    }
}

/// Least-squares fit of `y = a + b x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Spectrum of `T_{B,m}` for each `m`, computed in parallel.
pub fn spectrum_ladder(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    pair: &PolydiscPair,
    ladder: &[u32],
    eps: f64,
    cfg: &TableConfig,
) -> Result<Vec<Spectrum>> {
    ladder
        .par_iter()
        .map(|&m| {
            let t = build_norm_table(engine, w, m, pair, cfg)?;
            diagonal_spectrum_with(&t, eps, cfg)
        })
        .collect()
}

pub fn estimate_volume(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    pair: &PolydiscPair,
    ladder: &[u32],
    eps: f64,
    cfg: &TableConfig,
) -> Result<VolumeEstimate> {
    if ladder.len() < 3 {
        return Err(Error::Config("the m-ladder needs at least 3 points".into()));
    }
    if ladder.windows(2).any(|p| p[0] >= p[1]) || ladder[0] == 0 {
        return Err(Error::Config("the m-ladder must be positive and increasing".into()));
    }
    let n = w.dim;
    let spectra = spectrum_ladder(engine, w, pair, ladder, eps, cfg)?;
    let points: Vec<LadderPoint> = spectra
        .iter()
        .map(|s| LadderPoint {
            m: s.m,
            scaled_trace: factorial(n) * s.trace_total() / (s.m as f64).powi(n as i32),
            trace: s.trace_total(),
            trace2: s.trace2_total(),
            n_m: s.n_m,
            tail_estimate: s.tail_estimate,
            clamp_events: s.clamp_events,
        })
        .collect();
    let x: Vec<f64> = points.iter().map(|p| 1.0 / p.m as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.scaled_trace).collect();
    let (extrapolated, slope) = linear_fit(&x, &y);
    let (target, _) = ma_target(w, pair, &engine.cfg)?;
    let rel_gap = if target > 0.0 { (extrapolated - target).abs() / target } else { extrapolated.abs() };
    Ok(VolumeEstimate { weight_hash: w.canonical_hash(), ladder: points, extrapolated, slope, target, rel_gap })
}

/// Per-`m` comparison of a tensor weight `phi = psi + sum c_j log|z_j|` with its smooth part.
#[derive(Clone, Debug, Serialize)]
pub struct SandwichReport {
    pub m: u32,
    pub trace_phi: f64,
    pub trace_psi: f64,
    /// Trace for `psi + sum_j log|z_j|`, equal to `trace_psi` by the factorization.
    pub trace_shifted: f64,
    /// `prod_j (T_j(phi) - lambda_j(phi)_first)`.
    pub lower_bound: f64,
    /// `prod_j (T_j(phi) - 1)`.
    pub crude_lower_bound: f64,
    /// `trace(phi) >= trace(psi)`.
    pub holds_i: bool,
    /// `trace(psi + sum log|z_j|) >= prod_j (T_j(phi) - lambda_j(phi)_first)`.
    pub holds_ii: bool,
}

fn axes(t: &NormTable) -> Result<&[crate::bergman::AxisTable]> {
    match &t.layout {
        Layout::Product(a) => Ok(a),
        Layout::Shells { .. } => Err(Error::InvalidWeight("a tensor weight is required".into())),
    }
}

/// Relative tolerance applied to the exact inequalities to absorb quadrature error.
pub const INEQUALITY_TOL: f64 = 1e-9;

pub fn sandwich_inequalities_check(
    engine: &MomentEngine,
    phi: &ReinhardtWeight,
    m: u32,
    pair: &PolydiscPair,
    cfg: &TableConfig,
) -> Result<SandwichReport> {
    if !phi.is_tensor() {
        return Err(Error::InvalidWeight("the comparison needs a tensor weight".into()));
    }
    let psi = phi.smooth_part();
    let mut shifted = psi.clone();
    for p in &mut shifted.profiles {
        p.int_log = 1;
    }
    let t_phi = build_norm_table(engine, phi, m, pair, cfg)?;
    let t_psi = build_norm_table(engine, &psi, m, pair, cfg)?;
    let t_shift = build_norm_table(engine, &shifted, m, pair, cfg)?;
    let mut trace_phi = 1.0;
    let mut trace_psi = 1.0;
    let mut trace_shifted = 1.0;
    let mut lower = 1.0;
    let mut crude = 1.0;
    for ((a, b), c) in axes(&t_phi)?.iter().zip(axes(&t_psi)?).zip(axes(&t_shift)?) {
        let tp = axis_trace(a)?.0;
        trace_phi *= tp;
        trace_psi *= axis_trace(b)?.0;
        trace_shifted *= axis_trace(c)?.0;
        lower *= tp - a.eigen(0).ratio;
        crude *= tp - 1.0;
    }
    Ok(SandwichReport {
        m,
        trace_phi,
        trace_psi,
        trace_shifted,
        lower_bound: lower,
        crude_lower_bound: crude,
        holds_i: trace_phi >= trace_psi * (1.0 - INEQUALITY_TOL),
        holds_ii: trace_shifted >= lower * (1.0 - INEQUALITY_TOL),
    })
}

/// `(m, B_{m phi}(z) e^{-2 m phi(z)} / m^n)` along the ladder together with the limit
/// `(2/pi)^n det(d dbar phi)(z)`.
#[derive(Clone, Debug, Serialize)]
pub struct PointwiseLadder {
    pub values: Vec<(u32, f64)>,
    pub limit: f64,
}

pub fn pointwise_limit_check(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    pair: &PolydiscPair,
    z: &[Complex64],
    ladder: &[u32],
    cfg: &TableConfig,
) -> Result<PointwiseLadder> {
    if w.is_singular(z) {
        return Err(Error::SingularPoint);
    }
    let n = w.dim as i32;
    let values = ladder
        .par_iter()
        .map(|&m| {
            let t = build_norm_table(engine, w, m, pair, cfg)?;
            let b = bergman_diag(&t, z)?;
            let v = (b.ln_value - 2.0 * m as f64 * w.eval_phi(z)).exp() / (m as f64).powi(n);
            Ok((m, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let limit = (2.0 / PI).powi(n) * w.ma_density(z)?;
    Ok(PointwiseLadder { values, limit })
}

/// One instance of the one-variable inequality
/// `int_0^r x^(2k+1-2c) u / int_0^R x^(2k+1-2c) u >= int_0^r x^(2k+1) u / int_0^R x^(2k+1) u`
/// with `u = e^{-2 m h(x^2)}`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FractionComparison {
    pub k: u32,
    pub c: f64,
    pub ln_shifted: f64,
    pub ln_unshifted: f64,
    pub holds: bool,
}

fn ln_ratio(k: u32, a: f64, profile: &RadialProfile, m: f64, r: f64, big: f64, cfg: &QuadConfig) -> Result<f64> {
    let i = moment_1d(k, a, profile, m, 0.0, r, cfg)?;
    let o = moment_1d(k, a, profile, m, r, big, cfg)?;
    Ok(i.ln_value - ln_add(i.ln_value, o.ln_value))
}

pub fn fraction_comparison(
    profile: &RadialProfile,
    m: f64,
    k: u32,
    c: f64,
    r: f64,
    big: f64,
    cfg: &QuadConfig,
) -> Result<FractionComparison> {
    let ln_shifted = ln_ratio(k, c, profile, m, r, big, cfg)?;
    let ln_unshifted = ln_ratio(k, 0.0, profile, m, r, big, cfg)?;
    Ok(FractionComparison { k, c, ln_shifted, ln_unshifted, holds: ln_shifted >= ln_unshifted - INEQUALITY_TOL })
}

/// All `(k, c)` pairs with `k <= k_max`; returns the violations.
pub fn fraction_comparison_sweep(
    profile: &RadialProfile,
    m: f64,
    k_max: u32,
    cs: &[f64],
    r: f64,
    big: f64,
    cfg: &QuadConfig,
) -> Result<(usize, Vec<FractionComparison>)> {
    let cases: Vec<(u32, f64)> = (0..=k_max).flat_map(|k| cs.iter().map(move |&c| (k, c))).collect();
    let results = cases
        .par_iter()
        .map(|&(k, c)| fraction_comparison(profile, m, k, c, r, big, cfg))
        .collect::<Result<Vec<_>>>()?;
    let total = results.len();
    Ok((total, results.into_iter().filter(|f| !f.holds).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> MomentEngine {
        MomentEngine::new(QuadConfig::default())
    }

    #[test]
    fn fock_target_is_two() {
        let (t, _) = ma_target(&ReinhardtWeight::fock(1), &PolydiscPair::uniform(1, 2.0, 1.0), &QuadConfig::default()).unwrap();
        assert!((t - 2.0).abs() < 1e-8, "{t}");
        let (t2, _) = ma_target(&ReinhardtWeight::fock(2), &PolydiscPair::uniform(2, 2.0, 1.0), &QuadConfig::default()).unwrap();
        assert!((t2 - 8.0).abs() < 1e-8, "{t2}");
    }

    #[test]
    fn log_terms_do_not_change_the_target() {
        let w = ReinhardtWeight::tensor(vec![RadialProfile::gaussian().with_logs(0, 0.5)]);
        let (t, _) = ma_target(&w, &PolydiscPair::uniform(1, 2.0, 1.0), &QuadConfig::default()).unwrap();
        assert!((t - 2.0).abs() < 1e-8);
        let iso = ReinhardtWeight::isotropic(2, 2.0);
        let (z, _) = ma_target(&iso, &PolydiscPair::uniform(2, 1.0, 0.5), &QuadConfig::default()).unwrap();
        assert!(z.abs() < 1e-12, "{z}");
    }

    #[test]
    fn richardson_fit_recovers_the_model() {
        let x = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a - 2.0).abs() < 1e-14 && (b + 3.0).abs() < 1e-13);
    }

    #[test]
    fn integer_log_leaves_the_ladder_unchanged() {
        let pair = PolydiscPair::uniform(1, 2.0, 1.0);
        let cfg = TableConfig::default();
        let a = estimate_volume(&engine(), &ReinhardtWeight::fock(1), &pair, &[8, 16, 32], 0.1, &cfg).unwrap();
        let mut w = ReinhardtWeight::fock(1);
        w.profiles[0].int_log = 1;
        let b = estimate_volume(&engine(), &w, &pair, &[8, 16, 32], 0.1, &cfg).unwrap();
        for (p, q) in a.ladder.iter().zip(&b.ladder) {
            assert!((p.scaled_trace - q.scaled_trace).abs() < 1e-12 * p.scaled_trace);
        }
        assert!(a.rel_gap < 0.03, "{a:?}");
    }

    #[test]
    fn sandwich_is_tight_without_fractional_part() {
        let w = ReinhardtWeight::fock(1);
        let r = sandwich_inequalities_check(&engine(), &w, 8, &PolydiscPair::uniform(1, 1.0, 0.5), &TableConfig::default()).unwrap();
        assert!(r.holds_i && r.holds_ii);
        assert!((r.trace_phi / r.trace_psi - 1.0).abs() < 1e-14);
        assert!((r.trace_shifted / r.trace_psi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sandwich_holds_for_fractional_logs() {
        let pair = PolydiscPair::uniform(2, 1.0, 0.6);
        let w = ReinhardtWeight::tensor(vec![
            RadialProfile::gaussian().with_logs(0, 0.3),
            RadialProfile::gaussian().with_logs(0, 0.7),
        ]);
        let r = sandwich_inequalities_check(&engine(), &w, 8, &pair, &TableConfig::default()).unwrap();
        assert!(r.holds_i && r.holds_ii, "{r:?}");
        assert!(r.trace_phi > r.trace_psi);
    }

    #[test]
    fn pointwise_fock_limit() {
        let pair = PolydiscPair::uniform(1, 2.0, 1.0);
        let z = [Complex64::new(0.0, 0.0)];
        let l = pointwise_limit_check(&engine(), &ReinhardtWeight::fock(1), &pair, &z, &[8, 16, 32, 64], &TableConfig::default()).unwrap();
        assert!((l.limit - 2.0 / PI).abs() < 1e-14);
        let last = l.values.last().unwrap().1;
        assert!((last / l.limit - 1.0).abs() < 0.05, "{l:?}");
    }

    #[test]
    fn fraction_comparison_on_a_few_cases() {
        let cfg = QuadConfig::default();
        for p in [RadialProfile::flat(), RadialProfile::gaussian()] {
            let (total, bad) = fraction_comparison_sweep(&p, 8.0, 30, &[0.1, 0.5, 0.9], 0.5, 1.0, &cfg).unwrap();
            assert_eq!(total, 93);
            assert!(bad.is_empty(), "{bad:?}");
        }
    }

    #[test]
    fn unweighted_fraction_ratio_is_closed_form() {
        // int_0^r x^(2k+1-2c) / int_0^1 = r^(2k+2-2c)
        let f = fraction_comparison(&RadialProfile::flat(), 1.0, 3, 0.5, 0.5, 1.0, &QuadConfig::default()).unwrap();
        assert!((f.ln_shifted - 7.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((f.ln_unshifted - 8.0 * 0.5f64.ln()).abs() < 1e-12);
    }
}
