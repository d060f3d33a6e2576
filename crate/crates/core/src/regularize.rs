//! Demailly approximants `phi_m = (1/2m) log B_{m phi}` and monomial multiplier ideals.
//!
//! The approximants are evaluated from norm tables.  The ideals of the log families are
//! monomial, so they are stored as staircases (antichains of minimal exponents) and compared
//! exactly with rational arithmetic.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use num_rational::Ratio;
use num_traits::ToPrimitive;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bergman::{bergman_diag, build_norm_table, compositions, NormTable, TableConfig};
use crate::error::{Error, Result};
use crate::quadrature::{integrate_log, integrate_log_cube, LogSum, MomentEngine, QuadConfig};
use crate::weights::{PolydiscPair, ReinhardtWeight};

pub type Q = Ratio<i64>;

/// `phi_m(z)` together with the relative tail bound of the kernel it came from.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PhiValue {
    pub value: f64,
    /// Bound on `|phi_m - truncated phi_m|`.
    pub slack: f64,
}

pub fn phi_m(table: &NormTable, z: &[Complex64]) -> Result<PhiValue> {
    let k = bergman_diag(table, z)?;
    let two_m = 2.0 * table.m as f64;
    Ok(PhiValue { value: k.ln_value / two_m, slack: k.rel_tail.ln_1p() / two_m })
}

/// `log|z| + (1/2m) log(1 / (pi (1 - |z|^2)^2))`, the approximant of `log|z|` on the unit disc.
pub fn phi_m_log_disc(z: Complex64, m: u32) -> f64 {
    let t = z.norm_sqr();
    z.norm().ln() - (PI * (1.0 - t) * (1.0 - t)).ln() / (2.0 * m as f64)
}

/// Largest `(1/m) log|f(z)| - phi_m(z)` over random unit vectors `f` in the truncated space.
///
/// Each `f = sum c_alpha sigma_alpha` with `sum |c|^2 = 1`, so Cauchy-Schwarz keeps the result
/// below the kernel's tail slack.
pub fn sup_crosscheck(table: &NormTable, z: &[Complex64], samples: usize, seed: u64) -> Result<f64> {
    let phi = phi_m(table, z)?.value;
    let idx = table.indices();
    let terms: Vec<Complex64> = idx
        .iter()
        .map(|a| {
            let ln_n = table.ln_norm(a).unwrap();
            let ln_m: f64 = z.iter().zip(a).map(|(w, &e)| if e == 0 { 0.0 } else { e as f64 * w.norm().ln() }).sum();
            let phase: f64 = z.iter().zip(a).map(|(w, &e)| e as f64 * w.arg()).sum();
            Complex64::from_polar((ln_m - 0.5 * ln_n).exp(), phase)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for s in 0..samples {
        // Alternate between the aligned vector (attains the sup) and random directions.
        let c: Vec<Complex64> = if s == 0 {
            terms.iter().map(|t| t.conj()).collect()
        } else {
            terms
                .iter()
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        };
        let norm = c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let f: Complex64 = c.iter().zip(&terms).map(|(a, t)| a * t).sum::<Complex64>() / norm;
        worst = worst.max(f.norm().ln() / table.m as f64 - phi);
    }
    Ok(worst)
}

/// Points of the polydisc with moduli `R_j * frac * (k + 1) / per_axis`, `k < per_axis`, and
/// golden-angle phases.  No coordinate vanishes.
pub fn polydisc_grid(radii: &[f64], per_axis: usize, frac: f64) -> Vec<Vec<Complex64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<Vec<Complex64>> = vec![vec![]];
    for (j, &r) in radii.iter().enumerate() {
        let axis: Vec<Complex64> = (0..per_axis)
            .map(|k| {
                let rho = r * frac * (k + 1) as f64 / per_axis as f64;
                Complex64::from_polar(rho, golden * (k + 3 * j) as f64)
            })
            .collect();
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |z| {
                    let mut q = p.clone();
                    q.push(*z);
                    q
                })
            })
            .collect();
    }
    pts
}

#[derive(Clone, Debug, Serialize)]
pub struct LadderRow {
    pub m: u32,
    pub values: Vec<f64>,
    pub slack: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularizationLadder {
    pub weight: ReinhardtWeight,
    pub pair: PolydiscPair,
    pub grid: Vec<Vec<Complex64>>,
    pub rows: Vec<LadderRow>,
}

pub fn regularization_ladder(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    pair: &PolydiscPair,
    ms: &[u32],
    grid: Vec<Vec<Complex64>>,
    cfg: &TableConfig,
) -> Result<RegularizationLadder> {
    if grid.iter().any(|z| w.is_singular(z)) {
        return Err(Error::InvalidDomain("grid points must avoid the poles of the weight".into()));
    }
    let rows = ms
        .iter()
        .map(|&m| {
            let table = build_norm_table(engine, w, m, pair, cfg)?;
            let vals = grid.par_iter().map(|z| phi_m(&table, z)).collect::<Result<Vec<_>>>()?;
            if vals.iter().any(|v| !v.value.is_finite()) {
                return Err(Error::InvalidDomain(format!("phi_{m} is not finite on the grid")));
            }
            Ok(LadderRow { m, values: vals.iter().map(|v| v.value).collect(), slack: vals.iter().map(|v| v.slack).collect() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegularizationLadder { weight: w.clone(), pair: pair.clone(), grid, rows })
}

/// Supremum of `phi` over the Euclidean ball of radius `r` around a point with moduli `x`.
///
/// Reinhardt psh weights are nondecreasing in every modulus, so the sup sits where each
/// modulus grows by `t_j` with `sum t_j^2 = r^2`.  Exact for `n = 1`; a search over the
/// sphere of directions otherwise, which can only underestimate.
pub fn ball_sup(w: &ReinhardtWeight, x: &[f64], r: f64) -> f64 {
    let n = x.len();
    let eval = |t: &[f64]| {
        let y: Vec<f64> = x.iter().zip(t).map(|(a, b)| a + b).collect();
        w.eval_phi_radii(&y)
    };
    match n {
        1 => eval(&[r]),
        2 => (0..=256)
            .map(|k| {
                let a = 0.5 * PI * k as f64 / 256.0;
                eval(&[r * a.cos(), r * a.sin()])
            })
            .fold(f64::NEG_INFINITY, f64::max),
        _ => {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=48 {
                for k in 0..=48 {
                    let a = 0.5 * PI * i as f64 / 48.0;
                    let b = 0.5 * PI * k as f64 / 48.0;
                    let mut t = vec![r * a.cos(), r * a.sin() * b.cos(), r * a.sin() * b.sin()];
                    t.resize(n, 0.0);
                    best = best.max(eval(&t));
                }
            }
            best
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SandwichConstants {
    /// `m max_z (phi - phi_m)` per ladder entry.
    pub c1_ladder: Vec<f64>,
    pub c1: f64,
    /// `max_z r^n exp(m (phi_m - sup_{ball(z, r)} phi))` per ladder entry.
    pub c2_ladder: Vec<f64>,
    pub c2: f64,
    /// `max_z |phi_m - phi|` per ladder entry.
    pub sup_deviation: Vec<f64>,
    pub non_exploding: bool,
}

/// Empirical constants of the two-sided estimate
/// `phi - C1/m <= phi_m <= sup_{B(z,r)} phi + (1/m) log(C2 / r^n)`, with `r` half the distance
/// to the boundary of `Omega`.
pub fn sandwich_check(ladder: &RegularizationLadder) -> Result<SandwichConstants> {
    if ladder.rows.len() < 3 {
        return Err(Error::Config("the sandwich check needs at least three ladder entries".into()));
    }
    let n = ladder.pair.dim() as i32;
    let phi: Vec<f64> = ladder.grid.iter().map(|z| ladder.weight.eval_phi(z)).collect();
    let upper: Vec<(f64, f64)> = ladder
        .grid
        .iter()
        .map(|z| {
            let x: Vec<f64> = z.iter().map(|w| w.norm()).collect();
            let dist = x.iter().zip(&ladder.pair.outer).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
            let r = 0.5 * dist;
            (r, ball_sup(&ladder.weight, &x, r))
        })
        .collect();
    let mut c1_ladder = vec![];
    let mut c2_ladder = vec![];
    let mut sup_deviation = vec![];
    for row in &ladder.rows {
        let m = row.m as f64;
        let mut c1 = f64::NEG_INFINITY;
        let mut c2 = f64::NEG_INFINITY;
        let mut dev: f64 = 0.0;
        for (i, &v) in row.values.iter().enumerate() {
            c1 = c1.max(m * (phi[i] - v));
            let (r, sup) = upper[i];
            c2 = c2.max(n as f64 * r.ln() + m * (v - sup));
            dev = dev.max((v - phi[i]).abs());
        }
        c1_ladder.push(c1);
        c2_ladder.push(c2.exp());
        sup_deviation.push(dev);
    }
    let mut sorted = c1_ladder.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let last = *c1_ladder.last().unwrap();
    let non_exploding = last.is_finite() && last <= median + 0.2 * median.abs();
    Ok(SandwichConstants {
        c1: sorted.last().copied().unwrap(),
        c2: c2_ladder.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        c1_ladder,
        c2_ladder,
        sup_deviation,
        non_exploding,
    })
}

/// How a log family is written as `(c/2) log sum |g_i|^2 + v`.
#[derive(Clone, Debug, Serialize)]
pub struct AnalyticForm {
    pub c: f64,
    /// `A = max(sup_{Omega''} sqrt(sum |g_i|^2), 1)`.
    pub a: f64,
    pub generators: String,
}

/// Isotropic weights use `g = (z_1, ..., z_n)`; tensor weights with a common log coefficient use
/// `g = z_1 ... z_n`.  The sup over a centered polydisc is attained at the corner.
pub fn analytic_form(w: &ReinhardtWeight, middle: &[f64]) -> Result<AnalyticForm> {
    let logs: Vec<f64> = (0..w.dim).map(|j| w.axis_log(j)).collect();
    if w.iso_log > 0.0 {
        if logs.iter().any(|&c| c != 0.0) {
            return Err(Error::InvalidWeight("mixed isotropic and axis logs have no closed-form A".into()));
        }
        let sup = middle.iter().map(|r| r * r).sum::<f64>().sqrt();
        return Ok(AnalyticForm { c: w.iso_log, a: sup.max(1.0), generators: "z_1, ..., z_n".into() });
    }
    let c = logs[0];
    if c <= 0.0 || logs.iter().any(|&l| l != c) {
        return Err(Error::InvalidWeight("tensor weights need one common positive log coefficient".into()));
    }
    let sup: f64 = middle.iter().product();
    Ok(AnalyticForm { c, a: sup.max(1.0), generators: "z_1 ... z_n".into() })
}

/// `(n + 2) / (c delta)`, the smallest admissible `m`.
pub fn threshold(n: usize, c: f64, delta: f64) -> f64 {
    (n as f64 + 2.0) / (c * delta)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcessRow {
    pub m: u32,
    pub excess: f64,
    /// `m excess - log(m c - n)`.
    pub normalized: f64,
    pub below_threshold: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct UpperBoundReport {
    pub form: AnalyticForm,
    pub delta: f64,
    pub smooth_correction: f64,
    pub rows: Vec<ExcessRow>,
    /// `first + 2 log(last m c - n)`.
    pub allowed_max: f64,
    pub bounded: bool,
    pub hypothesis_violated: bool,
}

/// Excess of `phi_m` over `(1 - delta) phi + c delta log A` on a grid of `Omega'`.
///
/// The pair's `inner` radii are `Omega'`, `middle` is `Omega''` and `outer` is `Omega`.  A smooth
/// part `v` is handled by subtracting `sup_{Omega''} v - (1 - delta) inf_{Omega''} v`.
pub fn upper_bound_check(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    pair: &PolydiscPair,
    delta: f64,
    ladder: &[u32],
    per_axis: usize,
    cfg: &TableConfig,
) -> Result<UpperBoundReport> {
    let middle = pair.middle.clone().ok_or_else(|| Error::InvalidDomain("the check needs a middle polydisc".into()))?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if ladder.is_empty() {
        return Err(Error::Config("empty ladder".into()));
    }
    let n = w.dim;
    let form = analytic_form(w, &middle)?;
    let smooth = w.smooth_part();
    let smooth_correction = if smooth.profiles.iter().all(|p| p.is_flat()) {
        0.0
    } else {
        // Smooth parts are radial and nondecreasing, so the extremes sit at the center and the corner.
        smooth.eval_phi_radii(&middle) - (1.0 - delta) * smooth.eval_phi_radii(&vec![0.0; n])
    };
    let grid = polydisc_grid(&pair.inner, per_axis, 1.0);
    // Only Omega' is evaluated, and the eigenvalue stopping rule is irrelevant here.
    let reach = pair.inner.iter().zip(&pair.outer).map(|(a, b)| a / b).fold(0.0, f64::max);
    let cfg = TableConfig { eval_fraction: reach.max(cfg.eval_fraction.min(reach + 0.05)), spectrum: false, ..*cfg };
    let thr = threshold(n, form.c, delta);
    let mut rows = vec![];
    for &m in ladder {
        let below = (m as f64) < thr;
        if below {
            log::warn!("m = {m} is below the threshold {thr:.3}; computing anyway");
        }
        let table = build_norm_table(engine, w, m, pair, &cfg)?;
        let excess = grid
            .par_iter()
            .map(|z| -> Result<f64> {
                let v = phi_m(&table, z)?.value;
                Ok(v - (1.0 - delta) * w.eval_phi(z) - form.c * delta * form.a.ln() - smooth_correction)
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let mc_n = m as f64 * form.c - n as f64;
        let normalized = if mc_n > 0.0 { m as f64 * excess - mc_n.ln() } else { f64::INFINITY };
        rows.push(ExcessRow { m, excess, normalized, below_threshold: below });
    }
    let last_mc_n = ladder.last().copied().unwrap() as f64 * form.c - n as f64;
    let allowed_max = rows[0].normalized + 2.0 * last_mc_n.ln();
    let bounded = rows.iter().all(|r| r.normalized <= allowed_max);
    let hypothesis_violated = rows.iter().any(|r| r.below_threshold);
    Ok(UpperBoundReport { form, delta, smooth_correction, rows, allowed_max, bounded, hypothesis_violated })
}

/// Exact rational form of a coefficient; refuses anything that is not a short fraction.
pub fn exact(x: f64) -> Result<Q> {
    let r = Ratio::<i64>::approximate_float(x).ok_or(Error::IrrationalCoefficient(x))?;
    if *r.denom() > 10_000 || r.to_f64() != Some(x) {
        return Err(Error::IrrationalCoefficient(x));
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// `sum_j c_j log|z_j|`; membership `alpha_j - m c_j > -1` for every `j`.
    TensorLog { c: Vec<(i64, i64)> },
    /// `c log|z|`; membership `|alpha| + n > m c`.
    IsotropicLog { c: (i64, i64) },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StairIdeal {
    pub n: usize,
    /// The multiple of the weight, `m` possibly fractional.
    pub m: (i64, i64),
    pub family: Family,
    pub minimal_gens: Vec<Vec<u32>>,
}

fn pair_of(q: Q) -> (i64, i64) {
    (*q.numer(), *q.denom())
}

fn leq(a: &[u32], b: &[u32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Minimal elements of a set of lattice points.
pub fn antichain(points: impl IntoIterator<Item = Vec<u32>>) -> Vec<Vec<u32>> {
    let set: BTreeSet<Vec<u32>> = points.into_iter().collect();
    set.iter().filter(|a| !set.iter().any(|b| b != *a && leq(b, a))).cloned().collect()
}

/// Smallest integer `k >= 0` with `k > x`.
fn first_above(x: Q) -> u32 {
    (x.floor().to_integer() + 1).max(0) as u32
}

/// The exact log coefficients of a pure log family; smooth parts are ignored because they are
/// bounded on compacts.
fn family_of(w: &ReinhardtWeight) -> Result<Family> {
    let axis: Vec<Q> = w
        .profiles
        .iter()
        .map(|p| Ok(Q::from_integer(p.int_log as i64) + exact(p.frac_log)?))
        .collect::<Result<_>>()?;
    if w.iso_log > 0.0 {
        if axis.iter().any(|c| *c != Q::from_integer(0)) {
            return Err(Error::InvalidWeight("staircases need a pure tensor-log or pure isotropic-log weight".into()));
        }
        return Ok(Family::IsotropicLog { c: pair_of(exact(w.iso_log)?) });
    }
    Ok(Family::TensorLog { c: axis.into_iter().map(pair_of).collect() })
}

fn q(p: (i64, i64)) -> Q {
    Q::new(p.0, p.1)
}

impl StairIdeal {
    /// Membership from the defining inequality, independent of the generators.
    pub fn criterion(&self, alpha: &[u32]) -> bool {
        self.slack(alpha) > Q::from_integer(0)
    }

    /// Left side minus right side of the membership inequality (the smallest one for tensors).
    pub fn slack(&self, alpha: &[u32]) -> Q {
        let m = q(self.m);
        match &self.family {
            Family::TensorLog { c } => alpha
                .iter()
                .zip(c)
                .map(|(&a, &cj)| Q::from_integer(a as i64) - m * q(cj) + Q::from_integer(1))
                .min()
                .unwrap(),
            Family::IsotropicLog { c } => {
                Q::from_integer(alpha.iter().map(|&a| a as i64).sum::<i64>() + self.n as i64) - m * q(*c)
            }
        }
    }

    pub fn contains(&self, alpha: &[u32]) -> bool {
        self.minimal_gens.iter().any(|g| leq(g, alpha))
    }

    /// Generators of the `p`-fold power (Minkowski sum of the staircases).
    pub fn power_gens(&self, p: u32) -> Vec<Vec<u32>> {
        let mut acc = vec![vec![0; self.n]];
        for _ in 0..p {
            let next = acc
                .iter()
                .flat_map(|a| self.minimal_gens.iter().map(move |g| a.iter().zip(g).map(|(x, y)| x + y).collect()))
                .collect::<Vec<Vec<u32>>>();
            acc = antichain(next);
        }
        acc
    }

    /// The same family at another multiple.
    pub fn at(&self, m: Q) -> StairIdeal {
        build_stair(self.n, m, self.family.clone())
    }
}

fn build_stair(n: usize, m: Q, family: Family) -> StairIdeal {
    let gens = match &family {
        Family::TensorLog { c } => vec![c.iter().map(|&cj| first_above(m * q(cj) - Q::from_integer(1))).collect()],
        Family::IsotropicLog { c } => {
            let d = first_above(m * q(*c) - Q::from_integer(n as i64));
            compositions(n, d)
        }
    };
    StairIdeal { n, m: pair_of(m), family, minimal_gens: antichain(gens) }
}

/// `I(m phi)` for a pure log weight.
pub fn stair_ideal(w: &ReinhardtWeight, m: Q) -> Result<StairIdeal> {
    w.validate()?;
    Ok(build_stair(w.dim, m, family_of(w)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct InclusionReport {
    pub holds: bool,
    /// A generator of the left ideal outside the right one.
    pub witness: Option<Vec<u32>>,
    /// A generator of the right ideal outside the left one.
    pub strict_witness: Option<Vec<u32>>,
    /// Smallest lattice distance from a left generator down to the right staircase.
    pub margin: i64,
}

fn inclusion(left: &[Vec<u32>], right: &StairIdeal) -> InclusionReport {
    let witness = left.iter().find(|a| !right.contains(a)).cloned();
    let strict_witness = right.minimal_gens.iter().find(|g| !left.iter().any(|a| leq(a, g))).cloned();
    let margin = left
        .iter()
        .map(|a| {
            right
                .minimal_gens
                .iter()
                .filter(|g| leq(g, a))
                .map(|g| match right.family {
                    Family::TensorLog { ref c } => a
                        .iter()
                        .zip(g)
                        .zip(c)
                        .filter(|(_, cj)| cj.0 != 0)
                        .map(|((x, y), _)| *x as i64 - *y as i64)
                        .min()
                        .unwrap_or(0),
                    Family::IsotropicLog { .. } => a.iter().zip(g).map(|(x, y)| *x as i64 - *y as i64).sum(),
                })
                .max()
                .unwrap_or(-1)
        })
        .min()
        .unwrap_or(0);
    InclusionReport { holds: witness.is_none(), witness, strict_witness, margin }
}

/// `I(m phi) subset I(phi)^m`.
pub fn subadditivity_check(w: &ReinhardtWeight, m: u32) -> Result<InclusionReport> {
    let big = stair_ideal(w, Q::from_integer(m as i64))?;
    let base = stair_ideal(w, Q::from_integer(1))?;
    let power = StairIdeal { minimal_gens: base.power_gens(m), ..base };
    Ok(inclusion(&big.minimal_gens, &power))
}

#[derive(Clone, Debug, Serialize)]
pub struct SuperadditivityReport {
    pub m: u32,
    pub p: u32,
    pub delta: (i64, i64),
    pub inclusion: InclusionReport,
    pub below_threshold: bool,
}

/// Common log coefficient used in the threshold `(n + 2) / (c delta)`; the smallest positive one
/// for tensor weights.
pub fn log_coefficient(w: &ReinhardtWeight) -> Result<f64> {
    if w.iso_log > 0.0 {
        return Ok(w.iso_log);
    }
    let c = (0..w.dim).map(|j| w.axis_log(j)).fold(f64::INFINITY, f64::min);
    if c > 0.0 {
        Ok(c)
    } else {
        Err(Error::InvalidWeight("every axis needs a positive log coefficient".into()))
    }
}

/// `I(m phi)^p subset I(m p (1 - delta) phi)`.
pub fn superadditivity_check(w: &ReinhardtWeight, m: u32, p: u32, delta: Q) -> Result<SuperadditivityReport> {
    let c = log_coefficient(w)?;
    let base = stair_ideal(w, Q::from_integer(m as i64))?;
    let target = base.at(Q::from_integer((m * p) as i64) * (Q::from_integer(1) - delta));
    let below = (m as f64) < threshold(w.dim, c, delta.to_f64().unwrap());
    let inclusion = inclusion(&base.power_gens(p), &target);
    Ok(SuperadditivityReport { m, p, delta: pair_of(delta), inclusion, below_threshold: below })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub checks: usize,
    pub violations: usize,
    pub min_margin: i64,
    pub certificates: Vec<SuperadditivityReport>,
}

/// `m` from the threshold to threshold + `extra`, `p` in `1..=max_p`.
pub fn superadditivity_sweep(w: &ReinhardtWeight, delta: Q, extra: u32, max_p: u32) -> Result<SweepReport> {
    let c = log_coefficient(w)?;
    let start = threshold(w.dim, c, delta.to_f64().unwrap()).ceil() as u32;
    let mut certificates = vec![];
    for m in start..=start + extra {
        for p in 1..=max_p {
            certificates.push(superadditivity_check(w, m, p, delta)?);
        }
    }
    let violations = certificates.iter().filter(|r| !r.inclusion.holds).count();
    let min_margin = certificates.iter().map(|r| r.inclusion.margin).min().unwrap_or(0);
    Ok(SweepReport { checks: certificates.len(), violations, min_margin, certificates })
}

/// Numerical integrability of `|z^alpha|^2 e^{-2 m phi}` near the origin.
///
/// Integrates over the unit polydisc with the cube `max_j |z_j| < eps` (tensor: each `|z_j| < eps`)
/// removed, for `eps = 1e-10` and `1e-20`.  A relative growth above `1e-2` between the two
/// means divergence.  Smooth parts are dropped, as in the exact criteria.
pub fn integrability_probe(w: &ReinhardtWeight, m: Q, alpha: &[u32]) -> Result<bool> {
    let mf = m.to_f64().unwrap();
    let qcfg = QuadConfig::with_tol(1e-10);
    let n = w.dim;
    let value = |eps: f64| -> f64 {
        if w.iso_log > 0.0 {
            // Pyramid where x_j is largest: x_j = s, x_i = s t_i.
            let mc = mf * w.iso_log;
            let mut total = LogSum::default();
            for j in 0..n {
                let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
                let e_s: f64 = alpha.iter().map(|&a| 2.0 * a as f64 + 1.0).sum::<f64>() + (n as f64 - 1.0) - 2.0 * mc;
                let s_part = integrate_log(|s: f64| e_s * s.ln(), eps, 1.0, &qcfg).ln_value;
                let t_part = if others.is_empty() {
                    0.0
                } else {
                    let lf = |t: &[f64]| {
                        let mut v = 0.0;
                        let mut s2 = 1.0;
                        for (k, &i) in others.iter().enumerate() {
                            v += (2.0 * alpha[i] as f64 + 1.0) * t[k].ln();
                            s2 += t[k] * t[k];
                        }
                        v - mc * s2.ln()
                    };
                    integrate_log_cube(&lf, others.len(), &qcfg).ln_value
                };
                total.add(s_part + t_part);
            }
            total.ln()
        } else {
            (0..n)
                .map(|j| {
                    let e = 2.0 * alpha[j] as f64 + 1.0 - 2.0 * mf * w.axis_log(j);
                    integrate_log(|x: f64| e * x.ln(), eps, 1.0, &qcfg).ln_value
                })
                .sum()
        }
    };
    let coarse = value(1e-10);
    let fine = value(1e-20);
    Ok((fine - coarse).exp_m1() < 1e-2)
}

/// The Step-1 shift: `phi_m(phi + p log|z_1|) - phi_m(phi) - p log|z_1|` at `z`.
pub fn log_shift_defect(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    p: u32,
    m: u32,
    pair: &PolydiscPair,
    z: &[Complex64],
    cfg: &TableConfig,
) -> Result<f64> {
    let mut shifted = w.clone();
    shifted.profiles[0].int_log += p;
    let a = phi_m(&build_norm_table(engine, &shifted, m, pair, cfg)?, z)?.value;
    let b = phi_m(&build_norm_table(engine, w, m, pair, cfg)?, z)?.value;
    Ok(a - b - p as f64 * z[0].norm().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::RadialProfile;
    use proptest::prelude::*;

    fn engine() -> MomentEngine {
        MomentEngine::new(QuadConfig::default())
    }

    fn log_disc() -> ReinhardtWeight {
        ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(1, 0.0)])
    }

    fn gens(s: &StairIdeal) -> Vec<Vec<u32>> {
        s.minimal_gens.clone()
    }

    #[test]
    fn log_disc_matches_the_geometric_series() {
        let pair = PolydiscPair::uniform(1, 1.0, 0.5);
        for m in [1u32, 4, 9] {
            let t = build_norm_table(&engine(), &log_disc(), m, &pair, &TableConfig::default()).unwrap();
            for k in 0..8 {
                let z = Complex64::from_polar(0.1 + 0.1 * k as f64, k as f64);
                let got = phi_m(&t, &[z]).unwrap().value;
                assert!((got - phi_m_log_disc(z, m)).abs() < 1e-10, "m={m} z={z}");
            }
        }
        let z = Complex64::new(0.5, 0.0);
        let expected = 0.5f64.ln() + (1.0 / (PI * 0.5625)).ln() / 8.0;
        assert!((phi_m_log_disc(z, 4) - expected).abs() < 1e-15);
    }

    #[test]
    fn random_unit_vectors_stay_below_phi_m() {
        let pair = PolydiscPair::uniform(1, 1.0, 0.5);
        let t = build_norm_table(&engine(), &ReinhardtWeight::fock(1), 8, &pair, &TableConfig::default()).unwrap();
        let z = [Complex64::new(0.3, 0.4)];
        let gap = sup_crosscheck(&t, &z, 50, 1).unwrap();
        let slack = phi_m(&t, &z).unwrap().slack;
        assert!(gap <= slack + 1e-12, "{gap}");
        // The aligned vector attains the sup.
        assert!(gap > -1e-12);
    }

    #[test]
    fn log_shift_is_exact() {
        let pair = PolydiscPair::uniform(2, 1.0, 0.5);
        let w = ReinhardtWeight::fock(2);
        let z = [Complex64::new(0.3, 0.1), Complex64::new(-0.2, 0.5)];
        let d = log_shift_defect(&engine(), &w, 2, 4, &pair, &z, &TableConfig::default()).unwrap();
        assert!(d.abs() < 1e-12, "{d}");
    }

    #[test]
    fn approximant_is_minus_infinity_only_where_every_generator_vanishes() {
        let pair = PolydiscPair::uniform(2, 1.0, 0.5);
        let w = ReinhardtWeight::tensor(vec![RadialProfile::gaussian().with_logs(1, 0.0), RadialProfile::gaussian()]);
        let t = build_norm_table(&engine(), &w, 2, &pair, &TableConfig::default()).unwrap();
        let on_pole = phi_m(&t, &[Complex64::new(0.0, 0.0), Complex64::new(0.5, 0.0)]).unwrap();
        assert_eq!(on_pole.value, f64::NEG_INFINITY);
        let off = phi_m(&t, &[Complex64::new(0.1, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        assert!(off.value.is_finite());
    }

    #[test]
    fn sandwich_on_log_disc_is_flat_in_m() {
        let pair = PolydiscPair::uniform(1, 1.0, 0.5);
        let grid = polydisc_grid(&[1.0], 10, 0.9);
        let ladder = regularization_ladder(&engine(), &log_disc(), &pair, &[4, 8, 16], grid.clone(), &TableConfig::default()).unwrap();
        let s = sandwich_check(&ladder).unwrap();
        // m (phi - phi_m) = (1/2) log(pi (1 - |z|^2)^2), largest at the smallest modulus.
        let x = grid[0][0].norm();
        let expected = 0.5 * (PI * (1.0 - x * x).powi(2)).ln();
        for c in &s.c1_ladder {
            assert!((c - expected).abs() < 1e-8);
        }
        assert!(s.non_exploding);
    }

    #[test]
    fn sandwich_on_fock_improves_with_m() {
        let pair = PolydiscPair::uniform(1, 1.0, 0.5);
        let grid = polydisc_grid(&[1.0], 8, 0.8);
        let ladder =
            regularization_ladder(&engine(), &ReinhardtWeight::fock(1), &pair, &[4, 8, 16, 32], grid, &TableConfig::default())
                .unwrap();
        let s = sandwich_check(&ladder).unwrap();
        assert!(s.c1.is_finite() && s.c2.is_finite());
        assert!(s.sup_deviation.windows(2).all(|w| w[1] < w[0]), "{:?}", s.sup_deviation);
        assert!(s.non_exploding);
    }

    #[test]
    fn upper_bound_log_disc_is_bounded() {
        let pair = PolydiscPair { outer: vec![1.0], inner: vec![0.5], middle: Some(vec![0.75]) };
        let rep = upper_bound_check(&engine(), &log_disc(), &pair, 0.5, &[6, 12, 24], 8, &TableConfig::default()).unwrap();
        assert!(rep.bounded && !rep.hypothesis_violated);
        // Closed form: the excess is largest on the outer circle of the grid.
        for row in &rep.rows {
            let z = Complex64::new(0.5, 0.0);
            let expected = phi_m_log_disc(z, row.m) - 0.5 * z.norm().ln();
            assert!((row.excess - expected).abs() < 1e-9, "{} {}", row.excess, expected);
        }
    }

    #[test]
    fn upper_bound_flags_small_m() {
        let pair = PolydiscPair { outer: vec![1.0], inner: vec![0.5], middle: Some(vec![0.75]) };
        let rep = upper_bound_check(&engine(), &log_disc(), &pair, 0.5, &[2, 12], 4, &TableConfig::default()).unwrap();
        assert!(rep.hypothesis_violated);
        assert!(rep.rows[0].below_threshold && !rep.rows[1].below_threshold);
    }

    #[test]
    fn staircase_examples() {
        let s = stair_ideal(&log_disc(), Q::from_integer(3)).unwrap();
        assert_eq!(gens(&s), vec![vec![3]]);

        let iso = ReinhardtWeight::isotropic(2, 2.0);
        let s = stair_ideal(&iso, Q::from_integer(3)).unwrap();
        let mut expected = compositions(2, 5);
        expected.sort();
        assert_eq!(gens(&s), expected);
        assert!(s.minimal_gens.iter().all(|g| g.iter().sum::<u32>() == 5));

        // m c - 1 = 0 exactly: the boundary exponent diverges.
        let half = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, 0.5)]);
        let s = stair_ideal(&half, Q::from_integer(2)).unwrap();
        assert_eq!(gens(&s), vec![vec![1]]);
        assert!(!s.contains(&[0]));
    }

    #[test]
    fn irrational_coefficients_are_refused() {
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, 1.0 / PI)]);
        assert!(matches!(stair_ideal(&w, Q::from_integer(1)), Err(Error::IrrationalCoefficient(_))));
    }

    #[test]
    fn subadditivity_examples() {
        let iso = ReinhardtWeight::isotropic(2, 2.0);
        let r = subadditivity_check(&iso, 2).unwrap();
        assert!(r.holds);
        assert!(r.strict_witness.is_some());

        let half = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, 0.5)]);
        let r = subadditivity_check(&half, 4).unwrap();
        assert!(r.holds);
        assert_eq!(stair_ideal(&half, Q::from_integer(4)).unwrap().minimal_gens, vec![vec![2]]);

        let r = subadditivity_check(&iso, 1).unwrap();
        assert!(r.holds && r.strict_witness.is_none());
    }

    #[test]
    fn superadditivity_example() {
        let iso = ReinhardtWeight::isotropic(2, 2.0);
        let half = Q::new(1, 2);
        assert_eq!(threshold(2, 2.0, 0.5), 4.0);
        let r = superadditivity_check(&iso, 4, 2, half).unwrap();
        assert!(r.inclusion.holds && !r.below_threshold);
        assert_eq!(r.inclusion.margin, 7);
        let r = superadditivity_check(&iso, 5, 1, Q::new(1, 3)).unwrap();
        assert!(r.inclusion.holds);
    }

    #[test]
    fn sweeps_have_no_violations() {
        let tensor = ReinhardtWeight::tensor(vec![
            RadialProfile::flat().with_logs(0, 0.5),
            RadialProfile::flat().with_logs(1, 0.25),
        ]);
        for w in [ReinhardtWeight::isotropic(2, 2.0), ReinhardtWeight::isotropic(3, 1.5), tensor] {
            let r = superadditivity_sweep(&w, Q::new(1, 2), 8, 4).unwrap();
            assert_eq!(r.violations, 0);
            assert!(r.min_margin > 0);
        }
    }

    #[test]
    fn probe_agrees_with_the_criteria() {
        let iso = ReinhardtWeight::isotropic(2, 2.0);
        let tensor = ReinhardtWeight::tensor(vec![
            RadialProfile::flat().with_logs(0, 0.5),
            RadialProfile::flat().with_logs(1, 0.0),
        ]);
        for w in [iso, tensor] {
            let s = stair_ideal(&w, Q::from_integer(3)).unwrap();
            for a in 0..5u32 {
                for b in 0..4u32 {
                    let alpha = [a, b];
                    let probe = integrability_probe(&w, Q::from_integer(3), &alpha).unwrap();
                    assert_eq!(probe, s.criterion(&alpha), "{alpha:?}");
                    assert_eq!(s.contains(&alpha), s.criterion(&alpha), "{alpha:?}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generators_match_the_criterion(num in 1i64..12, den in 1i64..6, m in 1i64..9, a in 0u32..20, b in 0u32..20) {
            let c = num as f64 / den as f64;
            for w in [
                ReinhardtWeight::isotropic(2, c),
                ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, (num % den) as f64 / den as f64); 2]),
            ] {
                let s = stair_ideal(&w, Q::from_integer(m)).unwrap();
                prop_assert_eq!(s.contains(&[a, b]), s.criterion(&[a, b]));
                prop_assert_eq!(antichain(s.minimal_gens.clone()), s.minimal_gens.clone());
            }
        }

        #[test]
        fn ideals_shrink_with_m(num in 1i64..12, den in 1i64..6, m in 1i64..9, a in 0u32..30, b in 0u32..30) {
            let w = ReinhardtWeight::isotropic(2, num as f64 / den as f64);
            let s = stair_ideal(&w, Q::from_integer(m)).unwrap();
            let t = stair_ideal(&w, Q::from_integer(m + 1)).unwrap();
            prop_assert!(!t.contains(&[a, b]) || s.contains(&[a, b]));
        }

        #[test]
        fn subadditivity_never_fails(num in 1i64..12, den in 1i64..6, m in 1u32..6) {
            let c = num as f64 / den as f64;
            let w = ReinhardtWeight::isotropic(2, c);
            prop_assert!(subadditivity_check(&w, m).unwrap().holds);
            let t = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, (num % den) as f64 / den as f64); 2]);
            prop_assert!(subadditivity_check(&t, m).unwrap().holds);
        }
    }
}
