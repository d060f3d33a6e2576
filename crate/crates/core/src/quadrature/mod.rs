//! Weighted monomial moments `||z^alpha||^2` on centered polydiscs.
//!
//! Tensor weights factor into one-dimensional radial integrals.  Weights with an isotropic log
//! term are handled by splitting the radial box into pyramids (one per dominant coordinate)
//! and pulling the corner singularity out as a power of the pyramid's scale variable.

pub mod cache;
pub mod de;

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::weights::{RadialProfile, ReinhardtWeight};

pub use cache::MomentCache;
pub use de::{integrate_log, integrate_log_cube, ln_add, tanh_sinh_rule, LogQuad, LogSum, QuadConfig};

/// Integrals whose power exponent lies this close to `-1` are treated as divergent.
pub const INTEGRABILITY_MARGIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentResult {
    pub ln_value: f64,
    pub rel_err: f64,
    pub evaluations: usize,
    /// False when the quadrature stopped short of the requested tolerance.
    pub precision_reached: bool,
}

impl MomentResult {
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    fn from_quad(q: LogQuad, shift: f64) -> Self {
        MomentResult {
            ln_value: q.ln_value + shift,
            rel_err: q.rel_err,
            evaluations: q.evaluations,
            precision_reached: q.converged,
        }
    }
}

/// `int_lo^hi x^(2k+1-2a) exp(-2 m h(x^2)) dx`.
///
/// `a` is the total log shift `m (p + c)` of the axis; the log terms stored in `profile`
/// are ignored here.  With `lo = 0` the integral needs `2k + 1 - 2a > -1`.
pub fn moment_1d(
    k: u32,
    a: f64,
    profile: &RadialProfile,
    m: f64,
    lo: f64,
    hi: f64,
    cfg: &QuadConfig,
) -> Result<MomentResult> {
    let exponent = 2.0 * k as f64 + 1.0 - 2.0 * a;
    if lo == 0.0 && exponent <= -1.0 + INTEGRABILITY_MARGIN {
        return Err(Error::NonIntegrable { exponent });
    }
    if !(hi > lo && lo >= 0.0) {
        return Err(Error::InvalidDomain(format!("bad interval [{lo}, {hi}]")));
    }
    let lf = |x: f64| exponent * x.ln() - 2.0 * m * profile.h(x * x);
    let q = integrate_log(lf, lo, hi, cfg);
    Ok(MomentResult::from_quad(q, 0.0))
}

/// Radial exponent `2 alpha_j + 1 - 2 m (p_j + c_j)` of one axis.
pub fn axis_exponent(w: &ReinhardtWeight, m: u32, alpha_j: u32, j: usize) -> f64 {
    2.0 * alpha_j as f64 + 1.0 - 2.0 * m as f64 * w.axis_log(j)
}

/// Whether `z^alpha` has finite `e^{-2m phi}`-norm near the origin.
pub fn is_integrable(w: &ReinhardtWeight, m: u32, alpha: &[u32]) -> bool {
    let mut total = 0.0;
    for (j, &a) in alpha.iter().enumerate() {
        let e = axis_exponent(w, m, a, j);
        if e <= -1.0 + INTEGRABILITY_MARGIN {
            return false;
        }
        total += e + 1.0;
    }
    if w.iso_log > 0.0 {
        // Corner condition: sum_j (E_j + 1) - 2 m c > 0.
        total - 2.0 * m as f64 * w.iso_log > INTEGRABILITY_MARGIN
    } else {
        true
    }
}

/// Computes moments, optionally memoised in a persistent cache.
#[derive(Clone, Default)]
pub struct MomentEngine {
    pub cfg: QuadConfig,
    pub cache: Option<Arc<MomentCache>>,
}

impl MomentEngine {
    pub fn new(cfg: QuadConfig) -> Self {
        MomentEngine { cfg, cache: None }
    }

    pub fn with_cache(cfg: QuadConfig, cache: Arc<MomentCache>) -> Self {
        MomentEngine { cfg, cache: Some(cache) }
    }

    /// Radial integral `int_box prod_j x_j^(2 alpha_j + 1) e^{-2 m phi(x)} dx` over
    /// `prod_j [lower_j, upper_j]`, without the `(2 pi)^n` angular factor.
    pub fn radial(
        &self,
        w: &ReinhardtWeight,
        m: u32,
        alpha: &[u32],
        lower: &[f64],
        upper: &[f64],
    ) -> Result<MomentResult> {
        if let Some(cache) = &self.cache {
            let key = cache::MomentKey::new(w, m, alpha, lower, upper);
            if let Some(hit) = cache.get(&key) {
                return Ok(hit);
            }
            let r = radial_uncached(w, m, alpha, lower, upper, &self.cfg)?;
            cache.insert(key, w, r);
            Ok(r)
        } else {
            radial_uncached(w, m, alpha, lower, upper, &self.cfg)
        }
    }

    /// `||z^alpha||^2` over the polydisc of the given radii.
    pub fn moment_nd(&self, w: &ReinhardtWeight, m: u32, alpha: &[u32], radii: &[f64]) -> Result<MomentResult> {
        let lower = vec![0.0; radii.len()];
        let r = self.radial(w, m, alpha, &lower, radii)?;
        Ok(MomentResult { ln_value: r.ln_value + radii.len() as f64 * (2.0 * PI).ln(), ..r })
    }

    /// One-axis factor `2 pi int_lo^hi x^(2k+1) e^{-2 m phi_j(x)} dx` of a tensor weight.
    pub fn axis_moment(&self, w: &ReinhardtWeight, j: usize, m: u32, k: u32, lo: f64, hi: f64) -> Result<MomentResult> {
        let axis = ReinhardtWeight::tensor(vec![w.profiles[j].clone()]);
        let r = self.radial(&axis, m, &[k], &[lo], &[hi])?;
        Ok(MomentResult { ln_value: r.ln_value + (2.0 * PI).ln(), ..r })
    }
}

/// Dispatches between the tensor factorisation and the pyramid decomposition.
pub fn radial_uncached(
    w: &ReinhardtWeight,
    m: u32,
    alpha: &[u32],
    lower: &[f64],
    upper: &[f64],
    cfg: &QuadConfig,
) -> Result<MomentResult> {
    let n = w.dim;
    if alpha.len() != n || lower.len() != n || upper.len() != n {
        return Err(Error::InvalidDomain("moment arguments have mismatched dimensions".into()));
    }
    if w.is_tensor() {
        let mut out = MomentResult { ln_value: 0.0, rel_err: 0.0, evaluations: 0, precision_reached: true };
        for j in 0..n {
            let a = m as f64 * w.axis_log(j);
            let r = moment_1d(alpha[j], a, &w.profiles[j], m as f64, lower[j], upper[j], cfg)?;
            out.ln_value += r.ln_value;
            out.rel_err += r.rel_err;
            out.evaluations += r.evaluations;
            out.precision_reached &= r.precision_reached;
        }
        return Ok(out);
    }
    if lower.iter().any(|&l| l != 0.0) {
        return Err(Error::InvalidDomain(
            "isotropic weights only support full polydiscs centered at the origin".into(),
        ));
    }
    pyramid_moment(w, m, alpha, upper, cfg)
}

/// Moment over the full radial box `prod [0, R_j]` via the pyramid decomposition.
///
/// On the pyramid where `x_j / R_j` is largest put `x_j = R_j s`, `x_i = R_i s t_i`.  The
/// integrand becomes `s^E_s prod_i t_i^E_i` times a factor that is smooth up to the boundary,
/// which tanh-sinh handles to full precision.  This path also serves tensor weights, giving
/// an independent route to the factorised moments.
pub fn pyramid_moment(
    w: &ReinhardtWeight,
    m: u32,
    alpha: &[u32],
    radii: &[f64],
    cfg: &QuadConfig,
) -> Result<MomentResult> {
    let n = w.dim;
    let mf = m as f64;
    let exps: Vec<f64> = (0..n).map(|j| axis_exponent(w, m, alpha[j], j)).collect();
    if !is_integrable(w, m, alpha) {
        let worst = exps.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::NonIntegrable { exponent: worst });
    }
    let e_s: f64 = exps.iter().sum::<f64>() + (n as f64 - 1.0) - 2.0 * mf * w.iso_log;
    let ln_r: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ln_prefactor: f64 = (0..n).map(|i| (exps[i] + 1.0) * ln_r[i]).sum();
    let flat = w.profiles.iter().all(|p| p.is_flat());
    let h0: f64 = w.profiles.iter().map(|p| p.h(0.0)).sum();
    let mc = mf * w.iso_log;

    let mut total = LogSum::default();
    let mut rel_err: f64 = 0.0;
    let mut evaluations = 0;
    let mut ok = true;
    for j in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
        let q = if flat {
            // The s integral is exactly 1 / (E_s + 1); only the t cube remains.
            let lf = |t: &[f64]| {
                let mut v = 0.0;
                let mut s2 = radii[j] * radii[j];
                for (k, &i) in others.iter().enumerate() {
                    v += exps[i] * t[k].ln();
                    s2 += radii[i] * radii[i] * t[k] * t[k];
                }
                if mc > 0.0 {
                    v -= mc * s2.ln();
                }
                v
            };
            let t_part = if others.is_empty() {
                LogQuad { ln_value: -2.0 * mc * ln_r[j], rel_err: 0.0, evaluations: 0, converged: true, level: 0 }
            } else {
                integrate_log_cube(&lf, others.len(), cfg)
            };
            LogQuad { ln_value: t_part.ln_value - (e_s + 1.0).ln() - 2.0 * mf * h0, ..t_part }
        } else {
            let lf = |u: &[f64]| {
                let s = u[0];
                let ln_s = s.ln();
                let xj = radii[j] * s;
                let mut v = e_s * ln_s - 2.0 * mf * w.profiles[j].h(xj * xj);
                let mut s2 = radii[j] * radii[j];
                for (k, &i) in others.iter().enumerate() {
                    let t = u[k + 1];
                    let xi = radii[i] * s * t;
                    v += exps[i] * t.ln() - 2.0 * mf * w.profiles[i].h(xi * xi);
                    s2 += radii[i] * radii[i] * t * t;
                }
                if mc > 0.0 {
                    v -= mc * s2.ln();
                }
                v
            };
            integrate_log_cube(&lf, n, cfg)
        };
        total.add(q.ln_value);
        rel_err = rel_err.max(q.rel_err);
        evaluations += q.evaluations;
        ok &= q.converged;
    }
    Ok(MomentResult { ln_value: total.ln() + ln_prefactor, rel_err, evaluations, precision_reached: ok })
}

/// Eigenvalue `||z^alpha||_B^2 / ||z^alpha||_Omega^2` of the centered Toeplitz operator,
/// returned together with its complement `1 - ratio`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioResult {
    pub ratio: f64,
    pub complement: f64,
    /// Set when rounding pushed the ratio onto the closed interval and it was pulled back.
    pub clamped: bool,
}

/// Largest double strictly below one.
pub const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

impl RatioResult {
    /// From `ln(inner)` and `ln(outer)` where `inner + outer` is the full norm.
    pub fn from_split(ln_inner: f64, ln_outer: f64) -> Self {
        // ratio = 1 / (1 + e^d), complement = 1 / (1 + e^-d)
        let d = ln_outer - ln_inner;
        let ratio = 1.0 / (1.0 + d.exp());
        let complement = 1.0 / (1.0 + (-d).exp());
        Self::guarded(ratio, complement)
    }

    /// From `ln(inner)` and `ln(full)`.
    pub fn from_full(ln_inner: f64, ln_full: f64) -> Self {
        let d = ln_inner - ln_full;
        Self::guarded(d.exp(), -d.exp_m1())
    }

    fn guarded(ratio: f64, complement: f64) -> Self {
        let mut clamped = false;
        let mut r = ratio;
        if !(r < 1.0) {
            r = BELOW_ONE;
            clamped = true;
        }
        if !(r > 0.0) {
            r = f64::MIN_POSITIVE;
            clamped = true;
        }
        if clamped {
            log::debug!("eigenvalue clamped into (0,1): raw {ratio:e}, complement {complement:e}");
        }
        RatioResult { ratio: r, complement: complement.max(0.0), clamped }
    }
}

/// `||z^alpha||^2_B / ||z^alpha||^2_Omega` for the centered pair of polydiscs.
pub fn partial_over_full_ratio(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    m: u32,
    alpha: &[u32],
    inner: &[f64],
    outer: &[f64],
) -> Result<RatioResult> {
    if w.is_tensor() {
        let mut ln_ratio = 0.0;
        for j in 0..w.dim {
            let i = engine.axis_moment(w, j, m, alpha[j], 0.0, inner[j])?;
            let o = engine.axis_moment(w, j, m, alpha[j], inner[j], outer[j])?;
            let r = RatioResult::from_split(i.ln_value, o.ln_value);
            ln_ratio += (-r.complement).ln_1p();
        }
        Ok(RatioResult::guarded(ln_ratio.exp(), -ln_ratio.exp_m1()))
    } else {
        let i = engine.moment_nd(w, m, alpha, inner)?;
        let f = engine.moment_nd(w, m, alpha, outer)?;
        Ok(RatioResult::from_full(i.ln_value, f.ln_value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QuadConfig {
        QuadConfig::default()
    }

    #[test]
    fn moment_1d_examples() {
        let flat = RadialProfile::flat();
        let r = moment_1d(0, 0.0, &flat, 1.0, 0.0, 1.0, &cfg()).unwrap();
        assert!((r.value() - 0.5).abs() < 1e-14);
        let r = moment_1d(0, 0.5, &flat, 1.0, 0.0, 1.0, &cfg()).unwrap();
        assert!((r.value() - 1.0).abs() < 1e-13);
        let g = RadialProfile::gaussian();
        let r = moment_1d(3, 0.0, &g, 2.0, 0.0, 12.0, &cfg()).unwrap();
        assert!((r.value() / (3.0 / 256.0) - 1.0).abs() < 1e-12, "{}", r.value());
        assert!(r.rel_err <= 1e-12);
    }

    #[test]
    fn non_integrable_is_rejected() {
        let flat = RadialProfile::flat();
        assert!(matches!(
            moment_1d(0, 1.0, &flat, 1.0, 0.0, 1.0, &cfg()),
            Err(Error::NonIntegrable { .. })
        ));
        // Away from the origin the same exponent is harmless.
        assert!(moment_1d(0, 1.0, &flat, 1.0, 0.5, 1.0, &cfg()).is_ok());
    }

    #[test]
    fn moment_nd_examples() {
        let e = MomentEngine::new(cfg());
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat(); 2]);
        let r = e.moment_nd(&w, 1, &[0, 0], &[1.0, 1.0]).unwrap();
        assert!((r.value() / (PI * PI) - 1.0).abs() < 1e-13);
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(1, 0.0)]);
        let r = e.moment_nd(&w, 1, &[1], &[1.0]).unwrap();
        assert!((r.value() / PI - 1.0).abs() < 1e-13);
    }

    #[test]
    fn isotropic_moment_matches_polar_oracle() {
        // n = 2, c = 1 on the unit bidisc, alpha = (1, 0), m = 1, in polar coordinates:
        // int_0^{pi/2} cos^3 sin rho^4 / 4 dtheta with rho = 1 / max(cos, sin),
        // evaluated by a fine midpoint rule.
        let w = ReinhardtWeight::isotropic(2, 1.0);
        let e = MomentEngine::new(cfg());
        let got = e.moment_nd(&w, 1, &[1, 0], &[1.0, 1.0]).unwrap();
        let n = 400_000;
        let mut acc = 0.0;
        for i in 0..n {
            let th = (i as f64 + 0.5) / n as f64 * PI / 2.0;
            let (c, s) = (th.cos(), th.sin());
            let rho = 1.0 / c.max(s);
            // x1^3 x2 / (x1^2 + x2^2) r dr = r^3 cos^3 sin dr
            acc += c.powi(3) * s * rho.powi(4) / 4.0;
        }
        let oracle = acc * PI / 2.0 / n as f64 * (2.0 * PI).powi(2);
        assert!((got.value() / oracle - 1.0).abs() < 1e-9, "{} vs {}", got.value(), oracle);
    }

    #[test]
    fn ratio_examples() {
        let e = MomentEngine::new(cfg());
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat()]);
        let r = partial_over_full_ratio(&e, &w, 1, &[1], &[0.5], &[1.0]).unwrap();
        assert!((r.ratio - 0.0625).abs() < 1e-14);
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, 0.5)]);
        let r = partial_over_full_ratio(&e, &w, 1, &[0], &[0.5], &[1.0]).unwrap();
        assert!((r.ratio - 0.5).abs() < 1e-13);
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat(); 2]);
        let r = partial_over_full_ratio(&e, &w, 1, &[1, 0], &[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert!((r.ratio - 0.015625).abs() < 1e-14);
    }

    fn profile() -> impl Strategy<Value = RadialProfile> {
        (prop::collection::vec(0.0..1.5f64, 0..4), 0.0..0.95f64)
            .prop_map(|(coeffs, frac)| RadialProfile::smooth(coeffs).with_logs(0, frac))
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn halving_the_step_stays_within_reported_error(
            k in 0u32..200,
            m in 1u32..64,
            p in profile(),
        ) {
            let c = cfg();
            let a = p.frac_log;
            let e = 2.0 * k as f64 + 1.0 - 2.0 * a;
            let lf = |x: f64| e * x.ln() - 2.0 * m as f64 * p.h(x * x);
            let base = integrate_log(lf, 0.0, 1.0, &c);
            prop_assert!(base.converged);
            let finer = QuadConfig { min_level: base.level + 1, max_level: base.level + 1, ..c };
            let refined = integrate_log(lf, 0.0, 1.0, &finer);
            let diff = (refined.ln_value - base.ln_value).exp_m1().abs();
            prop_assert!(diff <= 10.0 * base.rel_err, "diff {diff:e} vs rel_err {:e}", base.rel_err);
        }

        #[test]
        fn tensor_moment_equals_pyramid_route(
            profiles in prop::collection::vec(profile(), 2),
            alpha in prop::collection::vec(0u32..12, 2),
            m in 1u32..8,
            radii in prop::collection::vec(0.5..1.5f64, 2),
        ) {
            let w = ReinhardtWeight::tensor(profiles);
            prop_assume!(is_integrable(&w, m, &alpha));
            let product = radial_uncached(&w, m, &alpha, &[0.0, 0.0], &radii, &cfg()).unwrap();
            let pyramid = pyramid_moment(&w, m, &alpha, &radii, &QuadConfig::with_tol(1e-11)).unwrap();
            let diff = (product.ln_value - pyramid.ln_value).exp_m1().abs();
            prop_assert!(diff < 1e-9, "diff {diff:e}");
        }

        #[test]
        fn ratio_decreases_when_the_inner_disc_shrinks(
            p in profile(),
            k in 0u32..60,
            m in 1u32..32,
            r in 0.1..0.9f64,
            shrink in 0.5..0.99f64,
        ) {
            let e = MomentEngine::new(cfg());
            let w = ReinhardtWeight::tensor(vec![p]);
            prop_assume!(is_integrable(&w, m, &[k]));
            let big = partial_over_full_ratio(&e, &w, m, &[k], &[r], &[1.0]).unwrap();
            let small = partial_over_full_ratio(&e, &w, m, &[k], &[r * shrink], &[1.0]).unwrap();
            prop_assert!(big.ratio > 0.0 && big.ratio < 1.0);
            prop_assert!(small.ratio > 0.0 && small.ratio < 1.0);
            prop_assert!(small.ratio < big.ratio || (small.clamped && big.clamped));
        }

        #[test]
        fn negative_power_raises_the_inner_share(
            coeffs in prop::collection::vec(0.0..1.5f64, 0..4),
            c in 0.0..0.99f64,
            k in 0u32..200,
            m in 1u32..32,
            r in 0.2..0.95f64,
        ) {
            let e = MomentEngine::new(cfg());
            let plain = ReinhardtWeight::tensor(vec![RadialProfile::smooth(coeffs.clone())]);
            // Shifting the exponent by -2c is the same as a log term c / m.
            let shifted = ReinhardtWeight::tensor(vec![RadialProfile::smooth(coeffs).with_logs(0, c / m as f64)]);
            let a = partial_over_full_ratio(&e, &shifted, m, &[k], &[r], &[1.0]).unwrap();
            let b = partial_over_full_ratio(&e, &plain, m, &[k], &[r], &[1.0]).unwrap();
            prop_assert!(a.ratio.ln() >= b.ratio.ln() - 1e-9, "{} < {}", a.ratio, b.ratio);
        }
    }
}
