//! Tanh-sinh (double-exponential) quadrature carried out in log space.
//!
//! Integrands are supplied as `ln f(x)` so that moments such as `x^(2k+1) exp(-2m h(x^2))`
//! with large `k` and `m` never overflow or underflow.  The interval is first split around
//! the dominant peak of `ln f`; each piece is then integrated by level halving.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, LN_2};

/// Tuning knobs shared by every quadrature in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    /// Target relative error.
    pub rel_tol: f64,
    /// Deepest level; level `l` uses step `2^-l`.
    pub max_level: u32,
    /// Levels below this never count as converged.
    pub min_level: u32,
    /// Number of samples used to locate the peak of the integrand.
    pub scan_points: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig { rel_tol: 1e-12, max_level: 12, min_level: 3, scan_points: 96 }
    }
}

impl QuadConfig {
    pub fn with_tol(rel_tol: f64) -> Self {
        QuadConfig { rel_tol, ..Self::default() }
    }
}

/// Result of a log-space quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogQuad {
    /// Natural log of the integral; `-inf` for a vanishing integral.
    pub ln_value: f64,
    pub rel_err: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Deepest level used by any piece.
    pub level: u32,
}

impl LogQuad {
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    pub(crate) fn zero() -> Self {
        LogQuad { ln_value: f64::NEG_INFINITY, rel_err: 0.0, evaluations: 0, converged: true, level: 0 }
    }
}

/// Smallest relative error ever reported; summation in double precision cannot do better.
pub const REL_ERR_FLOOR: f64 = 1e-15;

/// Error floor for a value stored as its logarithm: `exp` amplifies the rounding of `ln`.
pub fn rel_err_floor(ln_value: f64) -> f64 {
    if ln_value.is_finite() {
        REL_ERR_FLOOR.max(4.0 * f64::EPSILON * ln_value.abs())
    } else {
        REL_ERR_FLOOR
    }
}

/// Accumulates `sum exp(l_i)` without leaving floating-point range.
#[derive(Clone, Copy, Debug)]
pub struct LogSum {
    max: f64,
    sum: f64,
}

impl Default for LogSum {
    fn default() -> Self {
        LogSum { max: f64::NEG_INFINITY, sum: 0.0 }
    }
}

impl LogSum {
    pub fn add(&mut self, l: f64) {
        if l == f64::NEG_INFINITY || l.is_nan() {
            return;
        }
        if l > self.max {
            self.sum = self.sum * (self.max - l).exp() + 1.0;
            self.max = l;
        } else {
            self.sum += (l - self.max).exp();
        }
    }

    pub fn merge(&mut self, other: &LogSum) {
        if other.sum == 0.0 {
            return;
        }
        if other.max > self.max {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    pub fn ln(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sum == 0.0
    }
}

/// `ln(exp(a) + exp(b))`.
pub fn ln_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// Abscissa and log-weight of the node at parameter `t` on `[a, b]`.
///
/// The abscissa is formed from its distance to the nearer endpoint, which keeps points next
/// to `a = 0` accurate down to the underflow threshold.
fn node(t: f64, a: f64, b: f64, ln_half: f64) -> (f64, f64) {
    let u = FRAC_PI_2 * t.sinh();
    let x = if u < 0.0 {
        a + (b - a) / (1.0 + (-2.0 * u).exp())
    } else {
        b - (b - a) / (1.0 + (2.0 * u).exp())
    };
    let ln_w = ln_half + (FRAC_PI_2 * t.cosh()).ln() - 2.0 * ln_cosh(u);
    (x, ln_w)
}

/// Terms this far below the running maximum are dropped.
const LOG_CUTOFF: f64 = 60.0;
const T_MAX: f64 = 8.0;

/// Plain tanh-sinh on `[a, b]` without splitting.
pub fn tanh_sinh_log<F: Fn(f64) -> f64>(lf: &F, a: f64, b: f64, cfg: &QuadConfig) -> LogQuad {
    if !(b > a) {
        return LogQuad::zero();
    }
    let ln_half = (0.5 * (b - a)).ln();
    let mut evaluations = 0usize;
    let mut eval = |t: f64| -> Option<f64> {
        let (x, ln_w) = node(t, a, b, ln_half);
        if !(x > a && x < b) {
            return None;
        }
        evaluations += 1;
        Some(ln_w + lf(x))
    };

    // Level 0 fixes the truncation of the t axis.
    let mut total = LogSum::default();
    let mut running_max = f64::NEG_INFINITY;
    let centre = eval(0.0).unwrap_or(f64::NEG_INFINITY);
    total.add(centre);
    running_max = running_max.max(centre);
    let mut t_hi = 0.0;
    let mut t_lo = 0.0;
    for dir in [1.0f64, -1.0] {
        let mut k = 1.0;
        loop {
            let t = dir * k;
            if k > T_MAX {
                break;
            }
            match eval(t) {
                None => break,
                Some(v) => {
                    total.add(v);
                    running_max = running_max.max(v);
                    if dir > 0.0 {
                        t_hi = t;
                    } else {
                        t_lo = t;
                    }
                    if k >= 2.0 && v < running_max - LOG_CUTOFF {
                        break;
                    }
                }
            }
            k += 1.0;
        }
    }
    // Allow the finer levels to probe slightly beyond the last coarse node.
    let t_hi = (t_hi + 1.0).min(T_MAX);
    let t_lo = (t_lo - 1.0).max(-T_MAX);

    let mut prev = total.ln(); // h = 1
    let mut rel_err = f64::INFINITY;
    let mut converged = false;
    let mut current = prev;
    let mut last_level = 0;
    for level in 1..=cfg.max_level {
        last_level = level;
        let h = 0.5f64.powi(level as i32);
        let mut fresh = LogSum::default();
        let mut t = t_lo + h;
        // Odd multiples of h inside [t_lo, t_hi]; t_lo is an integer so t_lo + h is odd.
        while t < t_hi {
            if let Some(v) = eval(t) {
                if v > running_max - LOG_CUTOFF - 10.0 {
                    fresh.add(v);
                }
            }
            t += 2.0 * h;
        }
        total.merge(&fresh);
        current = total.ln() + h.ln();
        rel_err = if current == f64::NEG_INFINITY && prev == f64::NEG_INFINITY {
            0.0
        } else {
            let d = (current - prev).exp_m1().abs();
            if d.is_nan() { f64::INFINITY } else { d }
        };
        prev = current;
        if level >= cfg.min_level && rel_err <= cfg.rel_tol.max(rel_err_floor(current)) {
            converged = true;
            break;
        }
    }
    LogQuad {
        ln_value: current,
        rel_err: if converged { rel_err.max(rel_err_floor(current)) } else { rel_err },
        evaluations,
        converged,
        level: last_level,
    }
}

/// Fixed tanh-sinh rule on `[a, b]` with step `2^-level` and `|t| <= t_max`, as
/// `(abscissa, weight)` pairs.  Nodes whose weight underflows are dropped.
pub fn tanh_sinh_rule(a: f64, b: f64, level: u32, t_max: f64) -> Vec<(f64, f64)> {
    let ln_half = (0.5 * (b - a)).ln();
    let h = 0.5f64.powi(level as i32);
    let steps = (t_max / h).floor() as i64;
    (-steps..=steps)
        .filter_map(|i| {
            let t = i as f64 * h;
            let (x, ln_w) = node(t, a, b, ln_half);
            let w = (ln_w + h.ln()).exp();
            (x > a && x < b && w > 0.0).then_some((x, w))
        })
        .collect()
}

/// Break points that isolate the dominant peak of `lf` on `(a, b)`.
fn peak_breaks<F: Fn(f64) -> f64>(lf: &F, a: f64, b: f64, scan: usize) -> (Vec<f64>, usize) {
    let n = scan.max(8);
    let width = b - a;
    let xs: Vec<f64> = (0..n).map(|i| a + width * (i as f64 + 0.5) / n as f64).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| lf(x)).collect();
    let mut evals = n;
    let (imax, vmax) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if vmax == f64::NEG_INFINITY || !vmax.is_finite() {
        return (vec![], evals);
    }
    let spacing = width / n as f64;

    // Golden-section refinement of the maximum inside the neighbouring cells.
    let mut lo = (xs[imax] - spacing).max(a);
    let mut hi = (xs[imax] + spacing).min(b);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = lf(x1);
    let mut f2 = lf(x2);
    evals += 2;
    for _ in 0..40 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = lf(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = lf(x1);
        }
        evals += 1;
        if hi - lo < 1e-13 * width {
            break;
        }
    }
    let xstar = 0.5 * (lo + hi);
    let fstar = lf(xstar);
    evals += 1;

    // Scale of the peak from the curvature of ln f, or from the slope at an endpoint maximum.
    let d = (spacing * 0.25).min(0.25 * (xstar - a).max(b - xstar)).max(1e-9 * width);
    let left = if xstar - d > a { lf(xstar - d) } else { f64::NAN };
    let right = if xstar + d < b { lf(xstar + d) } else { f64::NAN };
    evals += 2;
    let sigma = if left.is_finite() && right.is_finite() {
        let curv = -(left - 2.0 * fstar + right) / (d * d);
        if curv > 0.0 {
            1.0 / curv.sqrt()
        } else {
            spacing
        }
    } else {
        let slope = if left.is_finite() {
            (fstar - left) / d
        } else if right.is_finite() {
            (right - fstar) / d
        } else {
            0.0
        };
        if slope.abs() > 0.0 {
            1.0 / slope.abs()
        } else {
            spacing
        }
    };
    if !(sigma.is_finite() && sigma > 0.0) || sigma > 0.25 * width {
        return (vec![], evals);
    }

    let mut breaks = Vec::new();
    for mult in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        for sign in [-1.0, 1.0] {
            let x = xstar + sign * mult * sigma;
            if x > a + 1e-9 * width && x < b - 1e-9 * width {
                breaks.push(x);
            }
        }
    }
    breaks.sort_by(|p, q| p.total_cmp(q));
    breaks.dedup_by(|p, q| (*p - *q).abs() <= 1e-12 * width);
    (breaks, evals)
}

/// `ln` of the integral of `exp(lf(x))` over `[a, b]`, splitting at the dominant peak.
pub fn integrate_log<F: Fn(f64) -> f64>(lf: F, a: f64, b: f64, cfg: &QuadConfig) -> LogQuad {
    if !(b > a) {
        return LogQuad::zero();
    }
    let (breaks, scan_evals) = peak_breaks(&lf, a, b, cfg.scan_points);
    let mut pts = Vec::with_capacity(breaks.len() + 2);
    pts.push(a);
    pts.extend(breaks);
    pts.push(b);

    let mut acc = LogSum::default();
    let mut abs_err = LogSum::default();
    let mut evaluations = scan_evals;
    let mut converged = true;
    let mut level = 0;
    for w in pts.windows(2) {
        let piece = tanh_sinh_log(&lf, w[0], w[1], cfg);
        level = level.max(piece.level);
        evaluations += piece.evaluations;
        converged &= piece.converged;
        acc.add(piece.ln_value);
        if piece.rel_err > 0.0 {
            abs_err.add(piece.ln_value + piece.rel_err.ln());
        }
    }
    let ln_value = acc.ln();
    let rel_err = if ln_value == f64::NEG_INFINITY {
        0.0
    } else {
        (abs_err.ln() - ln_value).exp().max(rel_err_floor(ln_value))
    };
    LogQuad { ln_value, rel_err, evaluations, converged: converged && rel_err <= cfg.rel_tol.max(rel_err_floor(ln_value)), level }
}

/// Iterated integral of `exp(lf(u))` over the unit cube `[0,1]^d`, `d >= 1`.
///
/// The first coordinate is the outermost variable.
pub fn integrate_log_cube(lf: &dyn Fn(&[f64]) -> f64, d: usize, cfg: &QuadConfig) -> LogQuad {
    fn rec(lf: &dyn Fn(&[f64]) -> f64, prefix: &mut Vec<f64>, d: usize, cfg: &QuadConfig) -> LogQuad {
        let depth = prefix.len();
        if depth + 1 == d {
            let outer = |u: f64| {
                let mut p = prefix.clone();
                p.push(u);
                lf(&p)
            };
            return integrate_log(outer, 0.0, 1.0, cfg);
        }
        let inner_err = std::cell::Cell::new(0.0f64);
        let inner_evals = std::cell::Cell::new(0usize);
        let inner_ok = std::cell::Cell::new(true);
        let base = prefix.clone();
        let outer = |u: f64| {
            let mut p = base.clone();
            p.push(u);
            let r = rec(lf, &mut p, d, cfg);
            inner_err.set(inner_err.get().max(r.rel_err));
            inner_evals.set(inner_evals.get() + r.evaluations);
            inner_ok.set(inner_ok.get() && r.converged);
            r.ln_value
        };
        let r = integrate_log(outer, 0.0, 1.0, cfg);
        LogQuad {
            ln_value: r.ln_value,
            rel_err: r.rel_err + inner_err.get(),
            evaluations: inner_evals.get(),
            converged: r.converged && inner_ok.get(),
            level: r.level,
        }
    }
    let mut prefix = Vec::with_capacity(d);
    rec(lf, &mut prefix, d, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_on_unit_interval() {
        let r = integrate_log(|x: f64| 3.0 * x.ln(), 0.0, 1.0, &QuadConfig::default());
        assert!(r.converged);
        assert!((r.value() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn endpoint_singularity() {
        // int_0^1 x^(-0.8) dx = 5
        let r = integrate_log(|x: f64| -0.8 * x.ln(), 0.0, 1.0, &QuadConfig::default());
        assert!(r.converged, "{r:?}");
        assert!((r.value() / 5.0 - 1.0).abs() < 1e-12, "{}", r.value());
    }

    #[test]
    fn narrow_interior_peak() {
        // Gaussian of width 1e-3 centred at 0.3.
        let s = 1e-3;
        let lf = |x: f64| -0.5 * ((x - 0.3) / s).powi(2);
        let r = integrate_log(lf, 0.0, 1.0, &QuadConfig::default());
        let exact = s * (2.0 * std::f64::consts::PI).sqrt();
        assert!((r.value() / exact - 1.0).abs() < 1e-12, "{}", r.value() / exact);
    }

    #[test]
    fn huge_exponents_stay_in_range() {
        // int_0^inf x^1001 exp(-2 m x^2) dx with m = 256, truncated at 10.
        let m = 256.0;
        let lf = |x: f64| 1001.0 * x.ln() - 2.0 * m * x * x;
        let r = integrate_log(lf, 0.0, 10.0, &QuadConfig::default());
        // Gamma(501) / (2 (2m)^501)
        let exact = ln_gamma(501.0) - LN_2 - 501.0 * (2.0 * m).ln();
        assert!((r.ln_value - exact).abs() < 1e-11, "{} vs {}", r.ln_value, exact);
    }

    #[test]
    fn unit_square_product() {
        let lf = |u: &[f64]| u[0].ln() + 2.0 * u[1].ln();
        let r = integrate_log_cube(&lf, 2, &QuadConfig::default());
        assert!((r.value() - 1.0 / 6.0).abs() < 1e-13);
    }

    /// Lanczos approximation, adequate for test oracles.
    fn ln_gamma(x: f64) -> f64 {
        let g = 7.0;
        let c = [
            0.999_999_999_999_809_9,
            676.5203681218851,
            -1259.1392167224028,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507343278686905,
            -0.13857109526572012,
            9.984_369_578_019_572e-6,
            1.5056327351493116e-7,
        ];
        let x = x - 1.0;
        let mut a = c[0];
        let t = x + g + 0.5;
        for (i, &ci) in c.iter().enumerate().skip(1) {
            a += ci / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}
