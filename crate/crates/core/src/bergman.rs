//! Truncated monomial expansions of weighted Bergman kernels.
//!
//! For a Reinhardt weight on a centered polydisc the monomials are orthogonal, so
//!
//! ```text
//! B(z) = sum_alpha |z^alpha|^2 / ||z^alpha||^2,   K(z, w) = sum_alpha z^alpha conj(w^alpha) / ||z^alpha||^2.
//! ```
//!
//! A [`NormTable`] stores the norms on both the outer polydisc `Omega` and the inner polydisc
//! `B`, truncated once the kernel tail on the evaluation region is certified small and (when
//! requested) the Toeplitz eigenvalues have dropped below a floor.  Tensor weights keep one
//! table per axis; weights with an isotropic term are enumerated by total degree.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{is_integrable, LogSum, MomentEngine, RatioResult, INTEGRABILITY_MARGIN};
use crate::weights::{PolydiscPair, ReinhardtWeight};

/// Truncation policy for [`build_norm_table`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableConfig {
    /// Certified relative kernel tail on the evaluation region.
    pub tail_tol: f64,
    /// Evaluation region is `|z_j| <= eval_fraction * R_j`.
    pub eval_fraction: f64,
    /// Keep going until this many consecutive eigenvalues fall below `eig_floor`.
    pub eig_run: usize,
    pub eig_floor: f64,
    /// Apply the eigenvalue stopping rule.
    pub spectrum: bool,
    /// Largest admissible per-axis cutoff (or total degree).
    pub max_cutoff: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            tail_tol: 1e-13,
            eval_fraction: 0.95,
            eig_run: 5,
            eig_floor: 1e-14,
            spectrum: true,
            max_cutoff: 20_000,
        }
    }
}

/// Safety factor applied to geometric tail majorants.
pub const TAIL_SAFETY: f64 = 2.0;

/// Norms of `z^k` along one axis of a tensor weight, `k = k_min ..= k_min + len - 1`.
#[derive(Clone, Debug)]
pub struct AxisTable {
    pub k_min: u32,
    pub ln_inner: Vec<f64>,
    pub ln_outer: Vec<f64>,
    pub ln_full: Vec<f64>,
    pub rel_err: Vec<f64>,
}

impl AxisTable {
    pub fn len(&self) -> usize {
        self.ln_full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_full.is_empty()
    }

    pub fn cutoff(&self) -> u32 {
        self.k_min + self.len() as u32 - 1
    }

    fn index(&self, k: u32) -> Option<usize> {
        if k < self.k_min {
            return None;
        }
        let i = (k - self.k_min) as usize;
        (i < self.len()).then_some(i)
    }

    pub fn eigen(&self, i: usize) -> RatioResult {
        RatioResult::from_split(self.ln_inner[i], self.ln_outer[i])
    }

    /// Truncated sum `sum_k x^(2k) / N_k` in log form with a certified relative tail;
    /// `ln_x2` is `ln(x^2)`.
    fn diag(&self, ln_x2: f64) -> Result<(f64, f64)> {
        let mut acc = LogSum::default();
        let mut last = f64::NEG_INFINITY;
        let mut prev = f64::NEG_INFINITY;
        for (i, &ln_n) in self.ln_full.iter().enumerate() {
            let k = self.k_min + i as u32;
            let t = pow_ln(ln_x2, k) - ln_n;
            acc.add(t);
            prev = last;
            last = t;
        }
        let total = acc.ln();
        if last == f64::NEG_INFINITY || total == f64::NEG_INFINITY {
            return Ok((total, 0.0));
        }
        let q = (last - prev).exp();
        if !(q < 1.0) {
            return Err(Error::TailNotCertified);
        }
        let rel = TAIL_SAFETY * (last - total).exp() * q / (1.0 - q);
        Ok((total, rel))
    }

    /// `sum_k u^k / N_k` for complex `u`, returned as `(ln_scale, mantissa)`.
    fn offdiag(&self, u: Complex64) -> (f64, Complex64) {
        let r = u.norm();
        if r == 0.0 {
            return if self.k_min == 0 {
                (-self.ln_full[0], Complex64::new(1.0, 0.0))
            } else {
                (0.0, Complex64::new(0.0, 0.0))
            };
        }
        let ln_r = r.ln();
        let theta = u.arg();
        let logs: Vec<f64> = self
            .ln_full
            .iter()
            .enumerate()
            .map(|(i, &n)| (self.k_min + i as u32) as f64 * ln_r - n)
            .collect();
        let scale = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = Complex64::new(0.0, 0.0);
        for (i, &l) in logs.iter().enumerate() {
            let k = (self.k_min + i as u32) as f64;
            sum += Complex64::from_polar((l - scale).exp(), k * theta);
        }
        (scale, sum)
    }
}

/// `k * ln_x` with the convention `0 * (-inf) = 0`.
fn pow_ln(ln_x: f64, k: u32) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * ln_x
    }
}

fn multi_pow_ln(ln_x: &[f64], alpha: &[u32]) -> f64 {
    alpha.iter().zip(ln_x).map(|(&a, &l)| pow_ln(l, a)).sum()
}

/// Norms of a non-tensor weight, keyed by multi-index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormEntry {
    pub ln_full: f64,
    pub ln_inner: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub enum Layout {
    Product(Vec<AxisTable>),
    Shells {
        entries: BTreeMap<Vec<u32>, NormEntry>,
        /// Smallest and largest total degree present.
        degree_range: (u32, u32),
    },
}

#[derive(Clone, Debug)]
pub struct NormTable {
    pub weight: ReinhardtWeight,
    pub m: u32,
    pub pair: PolydiscPair,
    pub eval_radii: Vec<f64>,
    pub layout: Layout,
    /// Number of eigenvalues that had to be pulled back into `(0,1)`.
    pub clamp_events: usize,
}

/// Value of the diagonal kernel with an absolute bound on the neglected tail.
#[derive(Clone, Copy, Debug)]
pub struct KernelValue {
    pub ln_value: f64,
    /// Relative tail bound.
    pub rel_tail: f64,
}

impl KernelValue {
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }

    pub fn truncation_bound(&self) -> f64 {
        self.value() * self.rel_tail
    }
}

/// Off-diagonal kernel value `mantissa * exp(ln_scale)`.
#[derive(Clone, Copy, Debug)]
pub struct OffDiagValue {
    pub ln_scale: f64,
    pub mantissa: Complex64,
    /// Bound on the modulus of the neglected tail, in units of `exp(ln_scale)`.
    pub tail: f64,
}

impl OffDiagValue {
    pub fn value(&self) -> Complex64 {
        self.mantissa * self.ln_scale.exp()
    }
}

impl NormTable {
    pub fn dim(&self) -> usize {
        self.weight.dim
    }

    /// Per-axis cutoffs `K_j` (largest exponent present); total degree for shell tables.
    pub fn cutoffs(&self) -> Vec<u32> {
        match &self.layout {
            Layout::Product(axes) => axes.iter().map(|a| a.cutoff()).collect(),
            Layout::Shells { degree_range, .. } => vec![degree_range.1; self.dim()],
        }
    }

    /// Per-axis lowest exponent present (product tables) or lowest total degree.
    pub fn lowest(&self) -> Vec<u32> {
        match &self.layout {
            Layout::Product(axes) => axes.iter().map(|a| a.k_min).collect(),
            Layout::Shells { degree_range, .. } => vec![degree_range.0; self.dim()],
        }
    }

    pub fn len(&self) -> usize {
        match &self.layout {
            Layout::Product(axes) => axes.iter().map(|a| a.len()).product(),
            Layout::Shells { entries, .. } => entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axes(&self) -> Option<&[AxisTable]> {
        match &self.layout {
            Layout::Product(axes) => Some(axes),
            _ => None,
        }
    }

    /// All multi-indices in the table, in lexicographic order.
    pub fn indices(&self) -> Vec<Vec<u32>> {
        match &self.layout {
            Layout::Product(axes) => {
                let mut out = vec![vec![]];
                for a in axes {
                    let mut next = Vec::with_capacity(out.len() * a.len());
                    for prefix in &out {
                        for i in 0..a.len() {
                            let mut p = prefix.clone();
                            p.push(a.k_min + i as u32);
                            next.push(p);
                        }
                    }
                    out = next;
                }
                out
            }
            Layout::Shells { entries, .. } => entries.keys().cloned().collect(),
        }
    }

    pub fn contains(&self, alpha: &[u32]) -> bool {
        self.ln_norm(alpha).is_some()
    }

    /// `ln ||z^alpha||^2_Omega`.
    pub fn ln_norm(&self, alpha: &[u32]) -> Option<f64> {
        match &self.layout {
            Layout::Product(axes) => {
                let mut s = 0.0;
                for (a, &k) in axes.iter().zip(alpha) {
                    s += a.ln_full[a.index(k)?];
                }
                Some(s)
            }
            Layout::Shells { entries, .. } => entries.get(alpha).map(|e| e.ln_full),
        }
    }

    /// `ln ||z^alpha||^2_B`.
    pub fn ln_inner_norm(&self, alpha: &[u32]) -> Option<f64> {
        match &self.layout {
            Layout::Product(axes) => {
                let mut s = 0.0;
                for (a, &k) in axes.iter().zip(alpha) {
                    s += a.ln_inner[a.index(k)?];
                }
                Some(s)
            }
            Layout::Shells { entries, .. } => entries.get(alpha).map(|e| e.ln_inner),
        }
    }

    /// Relative quadrature error of the stored norm.
    pub fn rel_err(&self, alpha: &[u32]) -> Option<f64> {
        match &self.layout {
            Layout::Product(axes) => {
                let mut s = 0.0;
                for (a, &k) in axes.iter().zip(alpha) {
                    s += a.rel_err[a.index(k)?];
                }
                Some(s)
            }
            Layout::Shells { entries, .. } => entries.get(alpha).map(|e| e.rel_err),
        }
    }

    /// Toeplitz eigenvalue `||z^alpha||_B^2 / ||z^alpha||_Omega^2`.
    pub fn eigen(&self, alpha: &[u32]) -> Option<RatioResult> {
        match &self.layout {
            Layout::Product(axes) => {
                let mut ln_ratio = 0.0;
                for (a, &k) in axes.iter().zip(alpha) {
                    let r = a.eigen(a.index(k)?);
                    ln_ratio += (-r.complement).ln_1p();
                }
                Some(RatioResult::from_full(ln_ratio, 0.0))
            }
            Layout::Shells { entries, .. } => {
                entries.get(alpha).map(|e| RatioResult::from_full(e.ln_inner, e.ln_full))
            }
        }
    }

    /// Monomials below the table that are excluded because they are not integrable, limited
    /// to the box `alpha_j <= bound_j`.
    pub fn excluded_in_box(&self, bound: &[u32]) -> Vec<Vec<u32>> {
        let mut out = vec![];
        let mut idx = vec![0u32; self.dim()];
        loop {
            if !is_integrable(&self.weight, self.m, &idx) {
                out.push(idx.clone());
            }
            let mut j = 0;
            loop {
                if j == idx.len() {
                    return out;
                }
                idx[j] += 1;
                if idx[j] <= bound[j] {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }
}

/// Smallest exponent `k` with `2k + 1 - 2a > -1` along axis `j`.
fn axis_k_min(w: &ReinhardtWeight, m: u32, j: usize) -> u32 {
    let a = m as f64 * w.axis_log(j);
    let mut k = a.floor().max(0.0) as u32;
    while k > 0 && 2.0 * (k - 1) as f64 + 2.0 - 2.0 * a > INTEGRABILITY_MARGIN {
        k -= 1;
    }
    while 2.0 * k as f64 + 2.0 - 2.0 * a <= INTEGRABILITY_MARGIN {
        k += 1;
    }
    k
}

const CHUNK: usize = 32;

fn build_axis(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    m: u32,
    j: usize,
    inner: f64,
    outer: f64,
    eval: f64,
    cfg: &TableConfig,
) -> Result<(AxisTable, usize)> {
    let k_min = axis_k_min(w, m, j);
    let mut t = AxisTable { k_min, ln_inner: vec![], ln_outer: vec![], ln_full: vec![], rel_err: vec![] };
    let ln_eval2 = 2.0 * eval.ln();
    let mut kernel = LogSum::default();
    let mut prev_term = f64::NEG_INFINITY;
    let mut below = 0usize;
    let mut clamps = 0usize;
    let mut k = k_min;
    loop {
        let ks: Vec<u32> = (k..k + CHUNK as u32).collect();
        let chunk: Vec<Result<_>> = ks
            .par_iter()
            .map(|&kk| {
                let i = engine.axis_moment(w, j, m, kk, 0.0, inner)?;
                let o = engine.axis_moment(w, j, m, kk, inner, outer)?;
                Ok((i, o))
            })
            .collect();
        for (kk, res) in ks.iter().zip(chunk) {
            let (i, o) = res?;
            let ln_full = crate::quadrature::ln_add(i.ln_value, o.ln_value);
            t.ln_inner.push(i.ln_value);
            t.ln_outer.push(o.ln_value);
            t.ln_full.push(ln_full);
            t.rel_err.push(i.rel_err.max(o.rel_err));
            if !(i.precision_reached && o.precision_reached) {
                log::warn!("moment k={kk} on axis {j} did not reach the requested precision");
            }
            let eig = RatioResult::from_split(i.ln_value, o.ln_value);
            if eig.clamped {
                clamps += 1;
            }
            below = if eig.ratio < cfg.eig_floor { below + 1 } else { 0 };
            let term = pow_ln(ln_eval2, *kk) - ln_full;
            kernel.add(term);
            let q = (term - prev_term).exp();
            prev_term = term;
            let n_terms = t.len();
            let tail_ok = n_terms >= 4
                && q < 1.0
                && TAIL_SAFETY * (term - kernel.ln()).exp() * q / (1.0 - q) <= cfg.tail_tol;
            let eig_ok = !cfg.spectrum || below >= cfg.eig_run;
            if tail_ok && eig_ok {
                return Ok((t, clamps));
            }
            if n_terms >= cfg.max_cutoff {
                return Err(Error::CutoffExplosion { axis: j, limit: cfg.max_cutoff });
            }
        }
        k += CHUNK as u32;
    }
}

/// All multi-indices of total degree `d` in `n` variables, lexicographically descending.
pub fn compositions(n: usize, d: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return vec![vec![d]];
    }
    let mut out = vec![];
    for first in (0..=d).rev() {
        for mut rest in compositions(n - 1, d - first) {
            let mut v = vec![first];
            v.append(&mut rest);
            out.push(v);
        }
    }
    out
}

fn build_shells(
    engine: &MomentEngine,
    w: &ReinhardtWeight,
    m: u32,
    pair: &PolydiscPair,
    eval: &[f64],
    cfg: &TableConfig,
) -> Result<(Layout, usize)> {
    let n = w.dim;
    let ln_eval2: Vec<f64> = eval.iter().map(|r| 2.0 * r.ln()).collect();
    let mut entries = BTreeMap::new();
    let mut d = 0u32;
    while !compositions(n, d).iter().any(|a| is_integrable(w, m, a)) {
        d += 1;
        if d as usize > cfg.max_cutoff {
            return Err(Error::CutoffExplosion { axis: 0, limit: cfg.max_cutoff });
        }
    }
    let d_min = d;
    let mut kernel = LogSum::default();
    let mut prev_shell = f64::NEG_INFINITY;
    let mut below = 0usize;
    let mut clamps = 0usize;
    loop {
        let shell: Vec<Vec<u32>> = compositions(n, d).into_iter().filter(|a| is_integrable(w, m, a)).collect();
        let computed: Vec<Result<(Vec<u32>, NormEntry)>> = shell
            .par_iter()
            .map(|a| {
                let f = engine.moment_nd(w, m, a, &pair.outer)?;
                let i = engine.moment_nd(w, m, a, &pair.inner)?;
                if !(f.precision_reached && i.precision_reached) {
                    log::warn!("moment {a:?} did not reach the requested precision");
                }
                Ok((a.clone(), NormEntry { ln_full: f.ln_value, ln_inner: i.ln_value, rel_err: f.rel_err.max(i.rel_err) }))
            })
            .collect();
        let mut shell_sum = LogSum::default();
        let mut shell_max_eig: f64 = 0.0;
        for c in computed {
            let (a, e) = c?;
            let eig = RatioResult::from_full(e.ln_inner, e.ln_full);
            if eig.clamped {
                clamps += 1;
            }
            shell_max_eig = shell_max_eig.max(eig.ratio);
            shell_sum.add(multi_pow_ln(&ln_eval2, &a) - e.ln_full);
            entries.insert(a, e);
        }
        let term = shell_sum.ln();
        kernel.add(term);
        let q = (term - prev_shell).exp();
        prev_shell = term;
        below = if shell_max_eig < cfg.eig_floor { below + 1 } else { 0 };
        let tail_ok = d >= d_min + 3
            && q < 1.0
            && TAIL_SAFETY * (term - kernel.ln()).exp() * q / (1.0 - q) <= cfg.tail_tol;
        let eig_ok = !cfg.spectrum || below >= cfg.eig_run;
        if tail_ok && eig_ok {
            return Ok((Layout::Shells { entries, degree_range: (d_min, d) }, clamps));
        }
        if (d - d_min) as usize >= cfg.max_cutoff {
            return Err(Error::CutoffExplosion { axis: 0, limit: cfg.max_cutoff });
        }
        d += 1;
    }
}

/// Builds the norm table of `weight` at level `m` for the pair `B subset Omega`.
pub fn build_norm_table(
    engine: &MomentEngine,
    weight: &ReinhardtWeight,
    m: u32,
    pair: &PolydiscPair,
    cfg: &TableConfig,
) -> Result<NormTable> {
    weight.validate_on(&pair.outer)?;
    pair.validate()?;
    if pair.dim() != weight.dim {
        return Err(Error::InvalidDomain("polydisc and weight dimensions differ".into()));
    }
    let eval_radii: Vec<f64> = pair.outer.iter().map(|r| r * cfg.eval_fraction).collect();
    let (layout, clamp_events) = if weight.is_tensor() {
        let mut axes = Vec::with_capacity(weight.dim);
        let mut clamps = 0;
        for j in 0..weight.dim {
            let (a, c) = build_axis(engine, weight, m, j, pair.inner[j], pair.outer[j], eval_radii[j], cfg)?;
            axes.push(a);
            clamps += c;
        }
        (Layout::Product(axes), clamps)
    } else {
        build_shells(engine, weight, m, pair, &eval_radii, cfg)?
    };
    Ok(NormTable { weight: weight.clone(), m, pair: pair.clone(), eval_radii, layout, clamp_events })
}

/// Diagonal Bergman kernel `B_{m phi}(z)` from the truncated expansion.
pub fn bergman_diag(table: &NormTable, z: &[Complex64]) -> Result<KernelValue> {
    let x: Vec<f64> = z.iter().map(|w| w.norm()).collect();
    bergman_diag_radii(table, &x)
}

pub fn bergman_diag_radii(table: &NormTable, x: &[f64]) -> Result<KernelValue> {
    if x.len() != table.dim() {
        return Err(Error::InvalidDomain("point has the wrong dimension".into()));
    }
    let ln_x2: Vec<f64> = x.iter().map(|v| 2.0 * v.ln()).collect();
    match &table.layout {
        Layout::Product(axes) => {
            let mut ln_value = 0.0;
            let mut growth = 1.0;
            for (a, &l) in axes.iter().zip(&ln_x2) {
                let (v, rel) = a.diag(l)?;
                ln_value += v;
                growth *= 1.0 + rel;
            }
            Ok(KernelValue { ln_value, rel_tail: growth - 1.0 })
        }
        Layout::Shells { entries, degree_range } => {
            let mut acc = LogSum::default();
            let mut last = LogSum::default();
            let mut prev = LogSum::default();
            for (a, e) in entries {
                let t = multi_pow_ln(&ln_x2, a) - e.ln_full;
                acc.add(t);
                let d: u32 = a.iter().sum();
                if d == degree_range.1 {
                    last.add(t);
                } else if d + 1 == degree_range.1 {
                    prev.add(t);
                }
            }
            let total = acc.ln();
            if total == f64::NEG_INFINITY || last.is_empty() {
                return Ok(KernelValue { ln_value: total, rel_tail: 0.0 });
            }
            let q = (last.ln() - prev.ln()).exp();
            if !(q < 1.0) {
                return Err(Error::TailNotCertified);
            }
            let rel = TAIL_SAFETY * (last.ln() - total).exp() * q / (1.0 - q);
            Ok(KernelValue { ln_value: total, rel_tail: rel })
        }
    }
}

/// Truncated sum `K(z, w)` as `(ln_scale, mantissa)` without a tail bound.
pub(crate) fn offdiag_sum(table: &NormTable, z: &[Complex64], w: &[Complex64]) -> (f64, Complex64) {
    match &table.layout {
        Layout::Product(axes) => {
            let mut scale = 0.0;
            let mut mant = Complex64::new(1.0, 0.0);
            for (j, a) in axes.iter().enumerate() {
                let (s, v) = a.offdiag(z[j] * w[j].conj());
                scale += s;
                mant *= v;
            }
            (scale, mant)
        }
        Layout::Shells { entries, .. } => {
            let u: Vec<Complex64> = z.iter().zip(w).map(|(a, b)| a * b.conj()).collect();
            let ln_u: Vec<f64> = u.iter().map(|v| v.norm().ln()).collect();
            let arg: Vec<f64> = u.iter().map(|v| v.arg()).collect();
            let logs: Vec<(f64, f64)> = entries
                .iter()
                .map(|(a, e)| {
                    let phase: f64 = a.iter().zip(&arg).map(|(&k, &t)| k as f64 * t).sum();
                    (multi_pow_ln(&ln_u, a) - e.ln_full, phase)
                })
                .collect();
            let scale = logs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = Complex64::new(0.0, 0.0);
            if scale > f64::NEG_INFINITY {
                for &(l, ph) in &logs {
                    sum += Complex64::from_polar((l - scale).exp(), ph);
                }
            }
            (if scale > f64::NEG_INFINITY { scale } else { 0.0 }, sum)
        }
    }
}

/// Off-diagonal kernel `K(z, w) = sum_alpha z^alpha conj(w^alpha) / ||z^alpha||^2`.
///
/// Each axis is summed with its own log scale, so the result is an exact Hermitian
/// conjugate of `K(w, z)` in floating point.
pub fn bergman_offdiag(table: &NormTable, z: &[Complex64], w: &[Complex64]) -> Result<OffDiagValue> {
    let n = table.dim();
    if z.len() != n || w.len() != n {
        return Err(Error::InvalidDomain("point has the wrong dimension".into()));
    }
    let (ln_scale, mantissa) = offdiag_sum(table, z, w);
    // The neglected terms are dominated by the tail of sum |u^alpha| / N_alpha with
    // |u_j| = |z_j w_j|, which is the diagonal series at radii sqrt|u_j|.
    let x: Vec<f64> = z.iter().zip(w).map(|(a, b)| (a.norm() * b.norm()).sqrt()).collect();
    let majorant = bergman_diag_radii(table, &x)?;
    let tail = if majorant.rel_tail > 0.0 {
        (majorant.ln_value + majorant.rel_tail.ln() - ln_scale).exp()
    } else {
        0.0
    };
    Ok(OffDiagValue { ln_scale, mantissa, tail })
}

/// Maximum relative deviation of `B_{m phi}(z)` from `|z_1|^{2 m p} B_{m psi}(z)` where
/// `phi = psi + p log|z_1|`, over the given points.
pub fn log_factorization_check(
    engine: &MomentEngine,
    psi: &ReinhardtWeight,
    p: u32,
    m: u32,
    pair: &PolydiscPair,
    cfg: &TableConfig,
    points: &[Vec<Complex64>],
) -> Result<f64> {
    let mut phi = psi.clone();
    phi.profiles[0].int_log += p;
    let t_phi = build_norm_table(engine, &phi, m, pair, cfg)?;
    let t_psi = build_norm_table(engine, psi, m, pair, cfg)?;
    let mut worst: f64 = 0.0;
    for z in points {
        let a = bergman_diag(&t_phi, z)?;
        let b = bergman_diag(&t_psi, z)?;
        let predicted = b.ln_value + 2.0 * (m * p) as f64 * z[0].norm().ln();
        worst = worst.max((a.ln_value - predicted).exp_m1().abs());
    }
    Ok(worst)
}

/// `B_{m phi, small}(z) / B_{m phi, big}(z)` for nested centered polydiscs `small subset big`;
/// `1` where both vanish.
pub fn restriction_comparison(
    engine: &MomentEngine,
    weight: &ReinhardtWeight,
    m: u32,
    big: &[f64],
    small: &[f64],
    z: &[Complex64],
    cfg: &TableConfig,
) -> Result<f64> {
    if big.iter().zip(small).any(|(b, s)| s > b) {
        return Err(Error::InvalidDomain("the small polydisc must lie inside the big one".into()));
    }
    // Inner radii only steer the eigenvalue stopping rule, which is not needed here.
    let cfg = TableConfig { spectrum: false, ..*cfg };
    let half = |r: &[f64]| r.iter().map(|x| 0.5 * x).collect::<Vec<_>>();
    let t_big = build_norm_table(engine, weight, m, &PolydiscPair::new(big.to_vec(), half(big)), &cfg)?;
    let t_small = build_norm_table(engine, weight, m, &PolydiscPair::new(small.to_vec(), half(small)), &cfg)?;
    let a = bergman_diag(&t_small, z)?;
    let b = bergman_diag(&t_big, z)?;
    if a.ln_value == f64::NEG_INFINITY && b.ln_value == f64::NEG_INFINITY {
        // Both kernels vanish on the polar set.
        return Ok(1.0);
    }
    Ok((a.ln_value - b.ln_value).exp())
}

/// CSV with columns `x1..xn, value, tail_bound` for kernel values at the given radii.
pub fn kernel_csv(table: &NormTable, points: &[Vec<f64>]) -> Result<String> {
    let n = table.dim();
    let mut s = String::new();
    for j in 1..=n {
        let _ = write!(s, "x{j},");
    }
    s.push_str("value,tail_bound\n");
    for p in points {
        let k = bergman_diag_radii(table, p)?;
        for x in p {
            let _ = write!(s, "{x},");
        }
        let _ = writeln!(s, "{:e},{:e}", k.value(), k.truncation_bound());
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadConfig;
    use crate::weights::RadialProfile;
    use std::f64::consts::PI;

    fn engine() -> MomentEngine {
        MomentEngine::new(QuadConfig::default())
    }

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn unit_disc_flat_weight() {
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat()]);
        let t = build_norm_table(&engine(), &w, 1, &PolydiscPair::uniform(1, 1.0, 0.5), &TableConfig::default()).unwrap();
        for k in 0..10u32 {
            let n = t.ln_norm(&[k]).unwrap().exp();
            assert!((n / (PI / (k as f64 + 1.0)) - 1.0).abs() < 1e-13);
        }
        let b = bergman_diag(&t, &[c(0.0)]).unwrap();
        assert!((b.value() * PI - 1.0).abs() < 1e-13);
        // Classical Bergman kernel of the disc.
        for &x in &[0.3, 0.7, 0.9] {
            let b = bergman_diag(&t, &[c(x)]).unwrap();
            let exact = 1.0 / (PI * (1.0 - x * x).powi(2));
            assert!((b.value() / exact - 1.0).abs() < 1e-11, "x={x}");
            assert!(b.rel_tail < 1e-12);
        }
    }

    #[test]
    fn log_weight_excludes_low_monomials() {
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(1, 0.0)]);
        let t = build_norm_table(&engine(), &w, 3, &PolydiscPair::uniform(1, 1.0, 0.5), &TableConfig::default()).unwrap();
        assert_eq!(t.lowest(), vec![3]);
        assert_eq!(t.excluded_in_box(&[5]), vec![vec![0], vec![1], vec![2]]);
        // B e^{-2m phi} = 1 / (pi (1 - |z|^2)^2)
        let x: f64 = 0.6;
        let b = bergman_diag(&t, &[c(x)]).unwrap();
        let weighted = b.ln_value - 6.0 * x.ln();
        assert!((weighted.exp() * PI * (1.0 - x * x).powi(2) - 1.0).abs() < 1e-11);
        // Vanishes on the axis.
        assert_eq!(bergman_diag(&t, &[c(0.0)]).unwrap().value(), 0.0);
    }

    #[test]
    fn gaussian_weight_norms() {
        let w = ReinhardtWeight::fock(1);
        let t = build_norm_table(&engine(), &w, 1, &PolydiscPair::uniform(1, 12.0, 6.0), &TableConfig::default()).unwrap();
        let mut fact = 1.0;
        for k in 0..8u32 {
            if k > 0 {
                fact *= k as f64;
            }
            let exact = PI * fact / 2f64.powi(k as i32 + 1);
            assert!((t.ln_norm(&[k]).unwrap().exp() / exact - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn offdiag_is_hermitian_and_matches_diag() {
        let w = ReinhardtWeight::fock(2);
        let t = build_norm_table(&engine(), &w, 2, &PolydiscPair::uniform(2, 1.0, 0.5), &TableConfig::default()).unwrap();
        let z = [Complex64::new(0.3, 0.2), Complex64::new(-0.1, 0.4)];
        let v = [Complex64::new(0.5, -0.1), Complex64::new(0.2, 0.2)];
        let a = bergman_offdiag(&t, &z, &v).unwrap();
        let b = bergman_offdiag(&t, &v, &z).unwrap();
        assert_eq!(a.value(), b.value().conj());
        let d = bergman_offdiag(&t, &z, &z).unwrap();
        let diag = bergman_diag(&t, &z).unwrap();
        assert!((d.value().re / diag.value() - 1.0).abs() < 1e-13);
        assert!(d.value().im.abs() < 1e-13 * diag.value());
    }

    #[test]
    fn offdiag_at_origin_is_constant_term() {
        let w = ReinhardtWeight::tensor(vec![RadialProfile::flat()]);
        let t = build_norm_table(&engine(), &w, 1, &PolydiscPair::uniform(1, 1.0, 0.5), &TableConfig::default()).unwrap();
        let k = bergman_offdiag(&t, &[c(0.5)], &[c(0.0)]).unwrap();
        assert!((k.value().re * PI - 1.0).abs() < 1e-13);
    }

    #[test]
    fn restriction_examples() {
        let e = engine();
        let cfg = TableConfig::default();
        let flat = ReinhardtWeight::tensor(vec![RadialProfile::flat()]);
        let same = restriction_comparison(&e, &flat, 1, &[1.0], &[1.0], &[c(0.2)], &cfg).unwrap();
        assert!((same - 1.0).abs() < 1e-14);
        let r = restriction_comparison(&e, &flat, 1, &[1.0], &[0.8], &[c(0.0)], &cfg).unwrap();
        assert!((r - 1.0 / 0.64).abs() < 1e-12);
        let r = restriction_comparison(&e, &ReinhardtWeight::fock(1), 8, &[1.0], &[0.8], &[c(0.0)], &cfg).unwrap();
        assert!((1.0..=1.2).contains(&r), "{r}");
    }

    #[test]
    fn log_factorization_small_case() {
        let pts: Vec<Vec<Complex64>> = (1..6).map(|i| vec![c(0.15 * i as f64)]).collect();
        let dev = log_factorization_check(
            &engine(),
            &ReinhardtWeight::fock(1),
            1,
            4,
            &PolydiscPair::uniform(1, 1.0, 0.5),
            &TableConfig::default(),
            &pts,
        )
        .unwrap();
        assert!(dev < 1e-9, "{dev}");
    }

    #[test]
    fn isotropic_table_starts_at_threshold() {
        let w = ReinhardtWeight::isotropic(2, 2.0);
        let cfg = TableConfig { spectrum: false, eval_fraction: 0.5, ..Default::default() };
        let t = build_norm_table(&engine(), &w, 3, &PolydiscPair::uniform(2, 1.0, 0.5), &cfg).unwrap();
        // |alpha| + 2 > 6
        assert_eq!(t.lowest()[0], 5);
        let k = bergman_diag(&t, &[c(0.3), c(0.2)]).unwrap();
        assert!(k.rel_tail < 1e-12);
    }

    #[test]
    fn compositions_count() {
        assert_eq!(compositions(2, 4).len(), 5);
        assert_eq!(compositions(3, 4).len(), 15);
        assert_eq!(compositions(3, 0), vec![vec![0, 0, 0]]);
    }

    #[test]
    fn kernel_dominates_unit_norm_functions() {
        use rand::{RngExt, SeedableRng};
        let w = ReinhardtWeight::fock(1);
        let t = build_norm_table(&engine(), &w, 4, &PolydiscPair::uniform(1, 1.0, 0.5), &TableConfig::default()).unwrap();
        let idx = t.indices();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let mut a: Vec<Complex64> =
                idx.iter().map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            // Mostly low degrees so that |f(z)|^2 is not negligible.
            for (i, v) in a.iter_mut().enumerate() {
                *v *= 0.7f64.powi(i as i32);
            }
            let norm = a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let z = Complex64::from_polar(rng.random_range(0.0..0.9), rng.random_range(0.0..6.3));
            let mut f = Complex64::new(0.0, 0.0);
            for (al, coef) in idx.iter().zip(&a) {
                f += coef / norm * z.powu(al[0]) / (0.5 * t.ln_norm(al).unwrap()).exp();
            }
            let b = bergman_diag(&t, &[z]).unwrap();
            assert!(f.norm_sqr() <= b.value() * (1.0 + b.rel_tail) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn reproducing_identity_by_direct_quadrature() {
        // int_Omega |K(z, zeta)|^2 e^{-2 m phi(z)} = K(zeta, zeta), polar coordinates with a
        // trapezoid rule in the angle (exact for trigonometric polynomials of low degree) and
        // tanh-sinh in the radius.
        let w = ReinhardtWeight::fock(1);
        let m = 4;
        let t = build_norm_table(&engine(), &w, m, &PolydiscPair::uniform(1, 1.0, 0.5), &TableConfig::default()).unwrap();
        let zeta = Complex64::new(0.3, 0.1);
        let n_theta = 256;
        let lf = |r: f64| {
            let mut acc = 0.0;
            for i in 0..n_theta {
                let z = Complex64::from_polar(r, 2.0 * PI * i as f64 / n_theta as f64);
                acc += bergman_offdiag(&t, &[z], &[zeta]).unwrap().value().norm_sqr();
            }
            (acc * 2.0 * PI / n_theta as f64 * r).ln() - 2.0 * m as f64 * w.eval_phi_radii(&[r])
        };
        let q = crate::quadrature::integrate_log(lf, 0.0, 1.0, &QuadConfig::with_tol(1e-10));
        let diag = bergman_diag(&t, &[zeta]).unwrap().value();
        assert!((q.value() / diag - 1.0).abs() < 1e-6, "{} vs {}", q.value(), diag);
    }

    #[test]
    fn restriction_never_decreases_the_kernel() {
        let e = engine();
        let cfg = TableConfig::default();
        for w in [ReinhardtWeight::fock(1), ReinhardtWeight::tensor(vec![RadialProfile::gaussian().with_logs(0, 0.5)])] {
            for m in [2, 8] {
                for x in [0.0, 0.1, 0.25, 0.4] {
                    let r = restriction_comparison(&e, &w, m, &[1.0], &[0.7], &[c(x)], &cfg).unwrap();
                    assert!(r >= 1.0 - 1e-12, "m={m} x={x} ratio {r}");
                }
            }
        }
    }
}
