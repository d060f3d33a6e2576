//! Local generation of `H_B(m phi)` by the concentrated monomials.
//!
//! In the Reinhardt model the eigenvectors of `T_{B,m}` are the normalized monomials
//! `sigma_alpha = z^alpha / ||z^alpha||_Omega`, so the concentrated set
//! `S = {alpha : lambda_alpha >= 1 - eps}` is explicit.  [`decompose`] writes a function on `B`
//! as `sum_{alpha in S} b_alpha sigma_alpha` by alternating an orthogonal projection onto
//! `span S` with division of the leftover monomials by coordinates.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bergman::{bergman_diag, NormTable};
use crate::error::{Error, Result};
use crate::quadrature::LogSum;

/// Which norm a [`SeriesFunction`] is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Domain {
    B,
    Omega,
}

/// `f(z) = sum_alpha a_alpha z^alpha`, plus a certified bound on the norm of whatever was cut off.
#[derive(Clone, Debug, Serialize)]
pub struct SeriesFunction {
    pub coeffs: BTreeMap<Vec<u32>, Complex64>,
    pub tail_norm2: f64,
    pub domain: Domain,
}

impl SeriesFunction {
    pub fn new(coeffs: BTreeMap<Vec<u32>, Complex64>, domain: Domain) -> Self {
        SeriesFunction { coeffs, tail_norm2: 0.0, domain }
    }

    pub fn monomial(alpha: Vec<u32>, c: Complex64, domain: Domain) -> Self {
        Self::new(BTreeMap::from([(alpha, c)]), domain)
    }

    /// `sum_alpha c_alpha sigma_alpha` with `sigma_alpha` normalized in `Omega`.
    pub fn from_orthonormal(table: &NormTable, coeffs: &[(Vec<u32>, Complex64)], domain: Domain) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (a, c) in coeffs {
            let ln_n = table.ln_norm(a).ok_or_else(|| missing(a))?;
            *out.entry(a.clone()).or_insert(Complex64::new(0.0, 0.0)) += c * (-0.5 * ln_n).exp();
        }
        Ok(Self::new(out, domain))
    }

    pub fn eval(&self, z: &[Complex64]) -> Complex64 {
        self.coeffs.iter().map(|(a, c)| c * monomial(z, a)).sum()
    }

    pub fn max_degree(&self) -> u32 {
        self.coeffs.keys().map(|a| a.iter().sum()).max().unwrap_or(0)
    }

    fn truncated(&self, degree: u32) -> Self {
        let coeffs = self.coeffs.iter().filter(|(a, _)| a.iter().sum::<u32>() <= degree).map(|(a, c)| (a.clone(), *c)).collect();
        Self::new(coeffs, self.domain)
    }

    /// `ln ||f||^2` on `B` (`inner = true`) or `Omega`.
    pub fn ln_norm2(&self, table: &NormTable, inner: bool) -> Result<f64> {
        let mut acc = LogSum::default();
        for (a, c) in &self.coeffs {
            let ln_n = if inner { table.ln_inner_norm(a) } else { table.ln_norm(a) }.ok_or_else(|| missing(a))?;
            acc.add(c.norm_sqr().ln() + ln_n);
        }
        Ok(acc.ln())
    }

    pub fn norm2(&self, table: &NormTable, inner: bool) -> Result<f64> {
        Ok(self.ln_norm2(table, inner)?.exp() + self.tail_norm2)
    }
}

fn missing(a: &[u32]) -> Error {
    Error::InvalidDomain(format!("monomial {a:?} is not in the norm table"))
}

fn monomial(z: &[Complex64], a: &[u32]) -> Complex64 {
    z.iter().zip(a).map(|(w, &k)| w.powu(k)).product()
}

/// `||f||^2_B / ||f||^2_Omega`; cross terms vanish because monomials stay orthogonal on both.
pub fn concentration_ratio(f: &SeriesFunction, table: &NormTable) -> Result<f64> {
    let inner = f.ln_norm2(table, true)?;
    let full = f.ln_norm2(table, false)?;
    if full == f64::NEG_INFINITY {
        return Err(Error::ZeroFunction);
    }
    Ok((inner - full).exp())
}

/// Indices with `lambda_alpha >= 1 - eps` among those in the table.
/// Sorted, so callers can binary search it.
pub fn concentrated_set(table: &NormTable, eps: f64) -> Vec<Vec<u32>> {
    let mut s: Vec<Vec<u32>> =
        table.indices().into_iter().filter(|a| table.eigen(a).is_some_and(|r| r.complement <= eps)).collect();
    s.sort();
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct TailProjection {
    /// Orthogonal projection onto `span {sigma_alpha : alpha in S}`.
    pub projection: SeriesFunction,
    /// `sum_{alpha not in S} |<f, sigma_alpha>|^2`.
    pub tail_mass: f64,
    /// `||f||^2_Omega`.
    pub norm2: f64,
}

pub fn tail_projection(f: &SeriesFunction, table: &NormTable, s: &[Vec<u32>], eps: f64) -> Result<TailProjection> {
    let ratio = concentration_ratio(f, table)?;
    let required = 1.0 - eps * eps;
    if ratio < required {
        return Err(Error::NotConcentratedEnough { ratio, required });
    }
    let in_s = |a: &Vec<u32>| s.binary_search(a).is_ok();
    let mut proj = BTreeMap::new();
    let mut tail = LogSum::default();
    for (a, c) in &f.coeffs {
        if in_s(a) {
            proj.insert(a.clone(), *c);
        } else {
            tail.add(c.norm_sqr().ln() + table.ln_norm(a).ok_or_else(|| missing(a))?);
        }
    }
    Ok(TailProjection {
        projection: SeriesFunction::new(proj, Domain::Omega),
        tail_mass: tail.ln().exp(),
        norm2: f.norm2(table, false)?,
    })
}

/// Componentwise-maximal element of `s` below `beta`; among several maximal ones the one with
/// the largest total degree, then the lexicographically largest.
pub fn dominated_generator(s: &[Vec<u32>], beta: &[u32]) -> Option<Vec<u32>> {
    let below: Vec<&Vec<u32>> = s.iter().filter(|a| a.iter().zip(beta).all(|(x, y)| x <= y)).collect();
    let maximal = below
        .iter()
        .filter(|a| !below.iter().any(|b| b != *a && a.iter().zip(b.iter()).all(|(x, y)| x <= y)));
    maximal.max_by(|a, b| a.iter().sum::<u32>().cmp(&b.iter().sum::<u32>()).then_with(|| a.cmp(b))).map(|a| (*a).clone())
}

#[derive(Clone, Copy, Debug, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub eps: f64,
    /// `kappa` in `r0 = kappa / sqrt(n C_init)`; `None` means `r / diameter(Omega)`.
    pub kappa: Option<f64>,
    pub max_iterations: usize,
    /// Drop the remainder once the residual is below this multiple of `||g||^2_B` and it is
    /// negligible on `B_0` as well.
    pub residual_floor: f64,
    /// Grid points per axis for the sup bound on `B_0`.
    pub grid: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig { eps: 0.1, kappa: None, max_iterations: 60, residual_floor: 1e-8, grid: 17 }
    }
}

/// `r0 = kappa / sqrt(n C_init)`, never more than `0.9 r`.
pub fn shrink_radius(r: f64, diameter: f64, n: usize, c_init: f64, kappa: Option<f64>) -> f64 {
    let kappa = kappa.unwrap_or(r / diameter);
    (kappa / (n as f64 * c_init).sqrt()).min(0.9 * r)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    pub concentrated: Vec<Vec<u32>>,
    /// `b_alpha` as polynomials `exponent -> coefficient`.
    pub coefficients: BTreeMap<Vec<u32>, BTreeMap<Vec<u32>, Complex64>>,
    /// `||g||^2_B`.
    pub c_g: f64,
    /// `sum_L r0^{2|L|} ||q_L||^2_B` over the quotients still to be decomposed after each pass.
    pub residuals: Vec<f64>,
    /// Largest ratio of successive nonzero residuals (`0` if one pass sufficed).
    pub contraction: f64,
    pub r0: f64,
    pub sup_bound: f64,
    pub c_measured: f64,
    /// `max |g - sum b_alpha sigma_alpha|` over the grid on `B_0`.
    pub reconstruction_error: f64,
    pub grid_points: usize,
    /// Monomials that had no element of `S` below them and were added as generators.
    pub staircase_gaps: Vec<Vec<u32>>,
}

impl DecompositionReport {
    pub fn n_m(&self) -> usize {
        self.concentrated.len()
    }
}

/// 17 points per axis spread over the disc of radius `r0`: radii `r0 k / (len-1)` with
/// golden-angle phases.  The product grid has `len^n` points.
pub fn disc_grid(r0: f64, n: usize, len: usize) -> Vec<Vec<Complex64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let axis: Vec<Complex64> =
        (0..len).map(|k| Complex64::from_polar(r0 * k as f64 / (len - 1).max(1) as f64, golden * k as f64)).collect();
    let mut pts = vec![vec![]];
    for _ in 0..n {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<Complex64>| {
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

/// Pointwise reconstruction tolerance relative to `||g||_B + 1`.
pub const RECONSTRUCTION_TOL: f64 = 1e-7;

/// Bound on `sup_{B0} |sum_L z^L q_L|` from the moduli of the coefficients.
fn remainder_sup(pieces: &BTreeMap<Vec<u32>, SeriesFunction>, r0: f64) -> f64 {
    pieces
        .iter()
        .flat_map(|(mult, q)| {
            q.coeffs.iter().map(move |(beta, c)| c.norm() * r0.powi((beta.iter().sum::<u32>() + mult.iter().sum::<u32>()) as i32))
        })
        .sum()
}

fn add(map: &mut BTreeMap<Vec<u32>, Complex64>, key: Vec<u32>, c: Complex64) {
    *map.entry(key).or_insert(Complex64::new(0.0, 0.0)) += c;
}

/// Decomposes `g` (given on `B`) as `sum_{alpha in S} b_alpha sigma_alpha`.
///
/// Each pass works on quotients `q_L` with `R = sum_L z^L q_L`:
/// the largest degree truncation `F` of `q_L` that is `eps^2`-concentrated is projected onto
/// `span S`, contributing `z^L` times constants to the `b_alpha`; every other monomial
/// `z^beta` of `q_L` is divided by one coordinate `z_l` in which it exceeds its dominated
/// generator, and `z^{beta - e_l}` joins `q_{L + e_l}` for the next pass.
pub fn decompose(g: &SeriesFunction, table: &NormTable, c_init: f64, cfg: &DecomposeConfig) -> Result<DecompositionReport> {
    let n = table.dim();
    let s = concentrated_set(table, cfg.eps);
    if s.is_empty() {
        return Err(Error::InvalidDomain("no eigenvalue reaches 1 - eps".into()));
    }
    let c_g = g.norm2(table, true)?;
    if c_g == 0.0 {
        return Err(Error::ZeroFunction);
    }
    let ln_norm_s: BTreeMap<Vec<u32>, f64> = s.iter().map(|a| (a.clone(), table.ln_norm(a).unwrap())).collect();
    let mut b: BTreeMap<Vec<u32>, BTreeMap<Vec<u32>, Complex64>> = BTreeMap::new();
    let mut gaps = vec![];
    let mut pieces: BTreeMap<Vec<u32>, SeriesFunction> = BTreeMap::from([(vec![0; n], g.clone())]);
    let mut residuals = vec![];
    let mut contraction: f64 = 0.0;
    let r = table.pair.inner.iter().cloned().fold(f64::INFINITY, f64::min);
    let r0 = shrink_radius(r, table.pair.diameter(), n, c_init, cfg.kappa);
    let ln_r0 = r0.ln();
    let remainder_floor = 1e-3 * RECONSTRUCTION_TOL * (c_g.sqrt() + 1.0);

    for _ in 0..cfg.max_iterations {
        let mut next: BTreeMap<Vec<u32>, BTreeMap<Vec<u32>, Complex64>> = BTreeMap::new();
        for (mult, q) in &pieces {
            // Largest concentrated truncation.
            let mut degree = q.max_degree();
            let f = loop {
                let f = q.truncated(degree);
                if !f.coeffs.is_empty() && concentration_ratio(&f, table)? >= 1.0 - cfg.eps * cfg.eps {
                    break Some(f);
                }
                if degree == 0 {
                    break None;
                }
                degree -= 1;
            };
            let projected = match &f {
                Some(f) => tail_projection(f, table, &s, cfg.eps)?.projection.coeffs,
                None => BTreeMap::new(),
            };
            for (beta, c) in &q.coeffs {
                let alpha = if projected.contains_key(beta) { Some(beta.clone()) } else { dominated_generator(&s, beta) };
                let alpha = match alpha {
                    Some(a) => a,
                    None => {
                        log::error!("monomial {beta:?} has no concentrated monomial below it; adding it as a generator");
                        gaps.push(beta.clone());
                        beta.clone()
                    }
                };
                if &alpha == beta {
                    // z^L c z^alpha = (c ||z^alpha|| z^L) sigma_alpha
                    let scale = ln_norm_s.get(beta).copied().or_else(|| table.ln_norm(beta)).ok_or_else(|| missing(beta))?;
                    add(b.entry(alpha).or_default(), mult.clone(), c * (0.5 * scale).exp());
                } else {
                    let l = (0..n).find(|&l| beta[l] > alpha[l]).expect("beta strictly dominates alpha");
                    let mut quotient = beta.clone();
                    quotient[l] -= 1;
                    let mut new_mult = mult.clone();
                    new_mult[l] += 1;
                    add(next.entry(new_mult).or_default(), quotient, *c);
                }
            }
        }
        pieces = next.into_iter().map(|(k, v)| (k, SeriesFunction::new(v, Domain::B))).collect();
        // sup_{B0} |z^L|^2 ||q_L||^2_B: the mass that still has to reach the b_alpha.
        let mut acc = LogSum::default();
        for (mult, q) in &pieces {
            acc.add(2.0 * ln_r0 * mult.iter().sum::<u32>() as f64 + q.ln_norm2(table, true)?);
        }
        let residual = acc.ln().exp();
        if let Some(&prev) = residuals.last() {
            if prev > 0.0 {
                let ratio = residual / prev;
                contraction = contraction.max(ratio);
                if ratio >= 1.0 {
                    return Err(Error::ContractionFailure(ratio));
                }
            }
        }
        residuals.push(residual);
        // A remainder that is negligible in the B norm can still be visible on B0, so both
        // have to be small before the rest is dropped.
        if pieces.is_empty() || (residual <= cfg.residual_floor * c_g && remainder_sup(&pieces, r0) <= remainder_floor) {
            break;
        }
    }
    if !pieces.is_empty() && *residuals.last().unwrap() > cfg.residual_floor * c_g {
        return Err(Error::ContractionFailure(contraction.max(1.0)));
    }
    if !gaps.is_empty() {
        return Err(Error::StaircaseGap(gaps.concat()));
    }

    let grid = disc_grid(r0, n, cfg.grid);
    let eval_b = |z: &[Complex64]| -> (f64, Complex64) {
        let mut sup = 0.0;
        let mut recon = Complex64::new(0.0, 0.0);
        for (alpha, poly) in &b {
            let v: Complex64 = poly.iter().map(|(e, c)| c * monomial(z, e)).sum();
            sup += v.norm_sqr();
            let ln_n = ln_norm_s.get(alpha).copied().or_else(|| table.ln_norm(alpha)).unwrap();
            recon += v * monomial(z, alpha) * (-0.5 * ln_n).exp();
        }
        (sup, recon)
    };
    let (sup_bound, reconstruction_error) = grid
        .par_iter()
        .map(|z| {
            let (sup, recon) = eval_b(z);
            (sup, (g.eval(z) - recon).norm())
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let c_measured = sup_bound / (s.len() as f64 * c_g);
    Ok(DecompositionReport {
        concentrated: s,
        coefficients: b,
        c_g,
        residuals,
        contraction,
        r0,
        sup_bound,
        c_measured,
        reconstruction_error,
        grid_points: grid.len(),
        staircase_gaps: gaps,
    })
}

/// `max B_{m phi}(z) / sum_{alpha in S} |sigma_alpha(z)|^2` over the grid.
pub fn bergman_domination_check(table: &NormTable, s: &[Vec<u32>], grid: &[Vec<Complex64>]) -> Result<f64> {
    let ratios = grid
        .par_iter()
        .map(|z| -> Result<f64> {
            let k = bergman_diag(table, z)?;
            let mut acc = LogSum::default();
            for a in s {
                let ln_n = table.ln_norm(a).ok_or_else(|| missing(a))?;
                let ln_m: f64 = z.iter().zip(a).map(|(w, &e)| if e == 0 { 0.0 } else { 2.0 * e as f64 * w.norm().ln() }).sum();
                acc.add(ln_m - ln_n);
            }
            let ln_s = acc.ln();
            if ln_s == f64::NEG_INFINITY {
                if k.ln_value == f64::NEG_INFINITY || table.weight.is_singular(z) {
                    return Ok(1.0);
                }
                return Err(Error::DivisionByZero);
            }
            Ok((k.ln_value - ln_s).exp())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize)]
pub struct TailTrial {
    pub trials: usize,
    /// Trials with `tail_mass < eps ||f||^2`.
    pub passed: usize,
    /// Largest `tail_mass / (eps ||f||^2)`.
    pub worst: f64,
}

/// Random `eps^2`-concentrated functions and their tail mass.
///
/// Coefficients on the monomials with `lambda >= 1 - eps^2 / 2` carry the bulk; the rest of
/// `S` and a few monomials outside it get a common weight that is halved until the function is
/// concentrated enough.
pub fn tail_trial(table: &NormTable, eps: f64, trials: usize, seed: u64) -> Result<TailTrial> {
    let s = concentrated_set(table, eps);
    let deep: Vec<Vec<u32>> =
        s.iter().filter(|a| table.eigen(a).is_some_and(|r| r.complement <= 0.5 * eps * eps)).cloned().collect();
    if deep.is_empty() {
        return Err(Error::InvalidDomain("no eigenvalue reaches 1 - eps^2 / 2".into()));
    }
    let outside: Vec<Vec<u32>> = table.indices().into_iter().filter(|a| s.binary_search(a).is_err()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let bulk: Vec<(Vec<u32>, Complex64)> = deep.iter().map(|a| (a.clone(), draw(&mut rng))).collect();
        let mut rest: Vec<(Vec<u32>, Complex64)> =
            s.iter().filter(|a| deep.binary_search(a).is_err()).map(|a| (a.clone(), draw(&mut rng))).collect();
        for _ in 0..5.min(outside.len()) {
            let a = outside[rng.random_range(0..outside.len())].clone();
            rest.push((a, draw(&mut rng)));
        }
        let mut t = 1.0;
        let f = loop {
            let mut coeffs = bulk.clone();
            coeffs.extend(rest.iter().map(|(a, c)| (a.clone(), c * t)));
            let f = SeriesFunction::from_orthonormal(table, &coeffs, Domain::Omega)?;
            if concentration_ratio(&f, table)? >= 1.0 - eps * eps {
                break f;
            }
            t *= 0.5;
        };
        let p = tail_projection(&f, table, &s, eps)?;
        let r = p.tail_mass / (eps * p.norm2);
        worst = worst.max(r);
        if r < 1.0 {
            passed += 1;
        }
    }
    Ok(TailTrial { trials, passed, worst })
}

/// Polynomial in one block of variables with random coefficients of modulus in `[0.5, 1.5]`
/// and uniform phase, all monomials of total degree `<= degree`.
pub fn random_polynomial(n: usize, degree: u32, seed: u64) -> SeriesFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coeffs = BTreeMap::new();
    for d in 0..=degree {
        for a in crate::bergman::compositions(n, d) {
            let modulus = rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            coeffs.insert(a, Complex64::from_polar(modulus, phase));
        }
    }
    SeriesFunction::new(coeffs, Domain::B)
}
