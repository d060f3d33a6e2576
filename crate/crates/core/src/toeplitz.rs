//! Spectra of the Toeplitz concentration operator `T_{B,m} f = P_m(1_B f)`.
//!
//! For a centered polydisc `B` the monomials diagonalize `T_{B,m}` and the eigenvalues are the
//! norm ratios stored in a [`NormTable`].  Off-center discs are handled by a Galerkin matrix in
//! the orthonormal monomial basis, diagonalized with the Jacobi solver.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::bergman::{bergman_diag_radii, offdiag_sum, AxisTable, Layout, NormTable, TableConfig, TAIL_SAFETY};
use crate::error::{Error, Result};
use crate::jacobi::hermitian_eigen;
use crate::quadrature::{
    integrate_log, integrate_log_cube, tanh_sinh_rule, LogSum, MomentEngine, QuadConfig, RatioResult,
};

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumEntry {
    /// Multi-index for diagonal spectra, `[i]` for Galerkin eigenvalues.
    pub index: Vec<u32>,
    pub lambda: f64,
    /// `1 - lambda`, carried separately so eigenvalues near one keep their precision.
    pub complement: f64,
    /// Absolute uncertainty of `lambda` inherited from the quadrature.
    pub err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Spectrum {
    pub m: u32,
    pub eps: f64,
    /// Sorted by decreasing `lambda`.
    pub entries: Vec<SpectrumEntry>,
    /// Number of eigenvalues with `lambda >= 1 - eps`.
    pub n_m: usize,
    /// Sum over `entries`.
    pub trace: f64,
    pub trace2: f64,
    /// Bound on the eigenvalue mass not listed in `entries`.
    pub tail_estimate: f64,
    pub tail_estimate2: f64,
    pub clamp_events: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumSummary {
    pub m: u32,
    pub eps: f64,
    #[serde(rename = "N_m")]
    pub n_m: usize,
    pub trace: f64,
    pub trace2: f64,
    pub tail_estimate: f64,
}

impl Spectrum {
    fn assemble(m: u32, eps: f64, mut entries: Vec<SpectrumEntry>, tails: (f64, f64), clamp_events: usize) -> Self {
        entries.sort_by(|a, b| {
            b.lambda
                .total_cmp(&a.lambda)
                .then(a.complement.total_cmp(&b.complement))
                .then_with(|| a.index.cmp(&b.index))
        });
        let trace = entries.iter().map(|e| e.lambda).sum();
        let trace2 = entries.iter().map(|e| e.lambda * e.lambda).sum();
        let mut s = Spectrum {
            m,
            eps,
            entries,
            n_m: 0,
            trace,
            trace2,
            tail_estimate: tails.0,
            tail_estimate2: tails.1,
            clamp_events,
        };
        s.n_m = s.count(eps);
        s
    }

    /// `#{lambda >= 1 - eps}`.  Eigenvalues within their quadrature uncertainty of the
    /// threshold count as ties and are included.
    pub fn count(&self, eps: f64) -> usize {
        self.entries.iter().filter(|e| e.complement - e.err <= eps || e.lambda + e.err >= 1.0 - eps).count()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda).collect()
    }

    pub fn trace_total(&self) -> f64 {
        self.trace + self.tail_estimate
    }

    pub fn trace2_total(&self) -> f64 {
        self.trace2 + self.tail_estimate2
    }

    /// Every eigenvalue lies in the open interval `(0, 1)`.
    pub fn in_open_interval(&self) -> bool {
        self.entries.iter().all(|e| e.lambda > 0.0 && e.lambda < 1.0)
    }

    pub fn summary(&self) -> SpectrumSummary {
        SpectrumSummary {
            m: self.m,
            eps: self.eps,
            n_m: self.n_m,
            trace: self.trace_total(),
            trace2: self.trace2_total(),
            tail_estimate: self.tail_estimate,
        }
    }

    /// CSV with columns `index, alpha_1..alpha_n, lambda`.
    pub fn csv(&self) -> String {
        let width = self.entries.first().map_or(1, |e| e.index.len());
        let mut s = String::from("index,");
        for j in 1..=width {
            let _ = write!(s, "alpha{j},");
        }
        s.push_str("lambda\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = write!(s, "{i},");
            for a in &e.index {
                let _ = write!(s, "{a},");
            }
            let _ = writeln!(s, "{:e}", e.lambda);
        }
        s
    }
}

/// Index where a run of `run` consecutive values below `floor` is first completed, or the
/// last index when that never happens.
fn stop_index(values: &[f64], floor: f64, run: usize) -> usize {
    let mut below = 0;
    for (i, &v) in values.iter().enumerate() {
        below = if v < floor { below + 1 } else { 0 };
        if below >= run {
            return i;
        }
    }
    values.len().saturating_sub(1)
}

/// Sum beyond the last entry, extrapolated from the last two values.
fn geometric_tail(last: f64, prev: f64) -> Result<f64> {
    if last == 0.0 {
        return Ok(0.0);
    }
    let q = last / prev;
    if !(q < 1.0) {
        return Err(Error::TailNotCertified);
    }
    Ok(TAIL_SAFETY * last * q / (1.0 - q))
}

/// [`geometric_tail`] for values given by their logarithms.
fn ln_geometric_tail(ln_last: f64, ln_prev: f64) -> Result<f64> {
    if ln_last == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let q = (ln_last - ln_prev).exp();
    if !(q < 1.0) {
        return Err(Error::TailNotCertified);
    }
    Ok(TAIL_SAFETY * (ln_last + q.ln() - (-q).ln_1p()).exp())
}

/// `(sum lambda, sum lambda^2)` along one axis of a product table, including the
/// extrapolated tail beyond the last stored index.
pub fn axis_trace(a: &AxisTable) -> Result<(f64, f64)> {
    let lam: Vec<f64> = (0..a.len()).map(|i| a.eigen(i).ratio).collect();
    let s1: f64 = lam.iter().sum();
    let s2: f64 = lam.iter().map(|l| l * l).sum();
    let (g1, g2) = if lam.len() >= 2 {
        // Log ratios: the last stored eigenvalues can sit below the smallest normal double.
        let ln_lam = |i: usize| a.ln_inner[i] - crate::quadrature::ln_add(a.ln_inner[i], a.ln_outer[i]);
        let (l, p) = (ln_lam(lam.len() - 1), ln_lam(lam.len() - 2));
        (ln_geometric_tail(l, p)?, ln_geometric_tail(2.0 * l, 2.0 * p)?)
    } else {
        (0.0, 0.0)
    };
    Ok((s1 + g1, s2 + g2))
}

/// Exact spectrum of `T_{B,m}` for the centered pair stored in `table`.
///
/// Each axis (or degree shell) is enumerated until `cfg.eig_run` consecutive eigenvalues fall
/// below `cfg.eig_floor`; the listed entries are everything up to that point and the rest of
/// the trace is reported in `tail_estimate`.
pub fn diagonal_spectrum(table: &NormTable, eps: f64) -> Result<Spectrum> {
    diagonal_spectrum_with(table, eps, &TableConfig::default())
}

pub fn diagonal_spectrum_with(table: &NormTable, eps: f64, cfg: &TableConfig) -> Result<Spectrum> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("eps must lie in (0,1), got {eps}")));
    }
    let make = |alpha: Vec<u32>| -> SpectrumEntry {
        let r = table.eigen(&alpha).expect("index from the table");
        let rel = table.rel_err(&alpha).unwrap_or(0.0);
        SpectrumEntry { index: alpha, lambda: r.ratio, complement: r.complement, err: 2.0 * rel * r.ratio }
    };
    match &table.layout {
        Layout::Product(axes) => {
            let mut stops = Vec::with_capacity(axes.len());
            let mut full = (1.0, 1.0);
            let mut listed = (1.0, 1.0);
            for a in axes {
                let lam: Vec<f64> = (0..a.len()).map(|i| a.eigen(i).ratio).collect();
                let stop = stop_index(&lam, cfg.eig_floor, cfg.eig_run);
                let s1: f64 = lam[..=stop].iter().sum();
                let s2: f64 = lam[..=stop].iter().map(|l| l * l).sum();
                let (t1, t2) = axis_trace(a)?;
                full.0 *= t1;
                full.1 *= t2;
                listed.0 *= s1;
                listed.1 *= s2;
                stops.push(a.k_min..=a.k_min + stop as u32);
            }
            let mut indices: Vec<Vec<u32>> = vec![vec![]];
            for r in &stops {
                indices = indices
                    .into_iter()
                    .flat_map(|p| {
                        r.clone().map(move |k| {
                            let mut q = p.clone();
                            q.push(k);
                            q
                        })
                    })
                    .collect();
            }
            let entries: Vec<SpectrumEntry> = indices.into_par_iter().map(make).collect();
            let clamps = entries.iter().filter(|e| e.lambda == crate::quadrature::BELOW_ONE).count();
            let tails = ((full.0 - listed.0).max(0.0), (full.1 - listed.1).max(0.0));
            Ok(Spectrum::assemble(table.m, eps, entries, tails, clamps.max(table.clamp_events)))
        }
        Layout::Shells { entries, degree_range } => {
            let list: Vec<SpectrumEntry> = entries.keys().cloned().map(make).collect();
            let shell_sum = |d: u32, pow: i32| -> f64 {
                list.iter().filter(|e| e.index.iter().sum::<u32>() == d).map(|e| e.lambda.powi(pow)).sum()
            };
            let (lo, hi) = *degree_range;
            let tails = if hi > lo {
                (
                    geometric_tail(shell_sum(hi, 1), shell_sum(hi - 1, 1))?,
                    geometric_tail(shell_sum(hi, 2), shell_sum(hi - 1, 2))?,
                )
            } else {
                (0.0, 0.0)
            };
            let clamps = list.iter().filter(|e| e.lambda == crate::quadrature::BELOW_ONE).count();
            Ok(Spectrum::assemble(table.m, eps, list, tails, clamps.max(table.clamp_events)))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceCheck {
    /// `sum lambda` including the tail estimate.
    pub spectral: f64,
    /// Quadrature of `int_B B_{m phi} e^{-2 m phi}`.
    pub integral: f64,
    pub rel_deviation: f64,
    pub integral_rel_err: f64,
}

/// Compares the spectral trace with a direct quadrature of `int_B B_{m phi} e^{-2 m phi}`.
pub fn trace_vs_integral_check(spec: &Spectrum, table: &NormTable, cfg: &QuadConfig) -> Result<TraceCheck> {
    let w = &table.weight;
    let m = table.m as f64;
    let radii = table.pair.inner.clone();
    let n = table.dim();
    let ln_jac: f64 = radii.iter().map(|r| (2.0 * PI * r).ln()).sum();
    let lf = |u: &[f64]| -> f64 {
        let x: Vec<f64> = u.iter().zip(&radii).map(|(t, r)| t * r).collect();
        let b = match bergman_diag_radii(table, &x) {
            Ok(k) => k.ln_value,
            Err(_) => return f64::NAN,
        };
        let ln_x: f64 = x.iter().map(|v| v.ln()).sum();
        // B e^{-2 m phi} has removable zeros and poles on the axes; combine the logs first.
        b - 2.0 * m * w.eval_phi_radii(&x) + ln_x + ln_jac
    };
    let q = integrate_log_cube(&lf, n, cfg);
    let integral = q.value();
    let spectral = spec.trace_total();
    Ok(TraceCheck { spectral, integral, rel_deviation: (spectral / integral - 1.0).abs(), integral_rel_err: q.rel_err })
}

/// Options for [`galerkin_spectrum`].
#[derive(Clone, Copy, Debug, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalerkinConfig {
    /// Basis size per axis.
    pub basis: usize,
    /// Largest admissible matrix dimension.
    pub max_matrix: usize,
    /// Allow `n >= 2`.
    pub force: bool,
    /// Change of the matrix between successive refinements accepted as converged.
    pub matrix_tol: f64,
    /// Off-diagonal norm at which the Jacobi sweeps stop.
    pub jacobi_tol: f64,
    pub start_level: u32,
    pub max_level: u32,
    pub start_theta: usize,
}

impl Default for GalerkinConfig {
    fn default() -> Self {
        GalerkinConfig {
            basis: 40,
            max_matrix: 400,
            force: false,
            matrix_tol: 1e-11,
            jacobi_tol: 1e-12,
            start_level: 5,
            max_level: 8,
            start_theta: 128,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GalerkinResult {
    pub spectrum: Spectrum,
    pub basis: Vec<Vec<u32>>,
    /// `eigenvectors[i]` holds coefficients in the orthonormal monomial basis.
    pub eigenvectors: Vec<Vec<Complex64>>,
    /// `|int_B |f|^2 e^{-2 m phi} / int_Omega |f|^2 e^{-2 m phi} - lambda|` per eigenpair,
    /// from a direct evaluation of `f` on a finer grid.
    pub ratio_residuals: Vec<f64>,
    /// Bound on `sum ||sigma_alpha||^2_B` over basis elements left out.
    pub excluded_mass: f64,
    /// Largest entry change of the Galerkin matrix at the final refinement.
    pub quadrature_change: f64,
    pub level: u32,
    pub n_theta: usize,
}

/// An off-center polydisc `prod D(center_j, radius_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftedPolydisc {
    pub center: Vec<[f64; 2]>,
    pub radius: Vec<f64>,
}

impl ShiftedPolydisc {
    pub fn centered(radius: Vec<f64>) -> Self {
        ShiftedPolydisc { center: vec![[0.0, 0.0]; radius.len()], radius }
    }

    fn center(&self, j: usize) -> Complex64 {
        Complex64::new(self.center[j][0], self.center[j][1])
    }
}

/// Quadrature grid on a product of discs: per axis, tanh-sinh in the radius and the
/// trapezoid rule in the angle, both around the disc center.
fn axis_nodes(c: Complex64, rho: f64, level: u32, n_theta: usize) -> Vec<(Complex64, f64)> {
    let rule = tanh_sinh_rule(0.0, rho, level, 4.5);
    let dt = 2.0 * PI / n_theta as f64;
    let mut out = Vec::with_capacity(rule.len() * n_theta);
    for &(s, ws) in &rule {
        for i in 0..n_theta {
            let z = c + Complex64::from_polar(s, dt * i as f64);
            out.push((z, ws * s * dt));
        }
    }
    out
}

/// `sigma_alpha(z) e^{-m phi(z)}` for every basis element.
fn basis_values(table: &NormTable, basis: &[Vec<u32>], ln_norms: &[f64], z: &[Complex64]) -> Vec<Complex64> {
    let m = table.m as f64;
    let ln_weight = -m * table.weight.eval_phi(z);
    let ln_abs: Vec<f64> = z.iter().map(|v| v.norm().ln()).collect();
    let arg: Vec<f64> = z.iter().map(|v| v.arg()).collect();
    basis
        .iter()
        .zip(ln_norms)
        .map(|(alpha, &ln_n)| {
            let mut l = ln_weight - 0.5 * ln_n;
            let mut ph = 0.0;
            for (j, &k) in alpha.iter().enumerate() {
                if k > 0 {
                    l += k as f64 * ln_abs[j];
                    ph += k as f64 * arg[j];
                }
            }
            if l == f64::NEG_INFINITY || l.is_nan() {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(l.exp(), ph)
            }
        })
        .collect()
}

fn grid(disc: &ShiftedPolydisc, level: u32, n_theta: usize) -> Vec<(Vec<Complex64>, f64)> {
    let axes: Vec<Vec<(Complex64, f64)>> =
        (0..disc.radius.len()).map(|j| axis_nodes(disc.center(j), disc.radius[j], level, n_theta)).collect();
    let mut pts: Vec<(Vec<Complex64>, f64)> = vec![(vec![], 1.0)];
    for a in &axes {
        let mut next = Vec::with_capacity(pts.len() * a.len());
        for (p, w) in &pts {
            for &(z, wz) in a {
                let mut q = p.clone();
                q.push(z);
                next.push((q, w * wz));
            }
        }
        pts = next;
    }
    pts
}

const ASSEMBLY_CHUNKS: usize = 64;

/// Upper triangle of `M_ab = int_B sigma_a conj(sigma_b) e^{-2 m phi}`, summed in a fixed
/// order so the result does not depend on the thread count.
fn assemble(table: &NormTable, basis: &[Vec<u32>], ln_norms: &[f64], pts: &[(Vec<Complex64>, f64)]) -> Vec<Vec<Complex64>> {
    let d = basis.len();
    let chunk = pts.len().div_ceil(ASSEMBLY_CHUNKS).max(1);
    let partials: Vec<Vec<Vec<Complex64>>> = pts
        .par_chunks(chunk)
        .map(|part| {
            let mut mat = vec![vec![Complex64::new(0.0, 0.0); d]; d];
            for (z, w) in part {
                let v = basis_values(table, basis, ln_norms, z);
                for a in 0..d {
                    let va = v[a].conj() * *w;
                    for b in a..d {
                        mat[a][b] += va * v[b];
                    }
                }
            }
            mat
        })
        .collect();
    let mut mat = vec![vec![Complex64::new(0.0, 0.0); d]; d];
    for p in partials {
        for a in 0..d {
            for b in a..d {
                mat[a][b] += p[a][b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            mat[a][b] = mat[b][a].conj();
        }
    }
    mat
}

/// `sum_{k >= k_start} ||z^k||^2_{D(0, rho)} / ||z^k||^2_{D(0, R)}` along one axis.
fn excluded_axis_mass(engine: &MomentEngine, table: &NormTable, j: usize, k_start: u32, rho: f64) -> Result<f64> {
    let big = table.pair.outer[j];
    if rho >= big {
        return Ok(f64::INFINITY);
    }
    let w = &table.weight;
    let mut acc = 0.0;
    let mut prev = f64::NAN;
    for k in k_start..k_start + 4096 {
        let i = engine.axis_moment(w, j, table.m, k, 0.0, rho)?;
        let o = engine.axis_moment(w, j, table.m, k, rho, big)?;
        let lam = RatioResult::from_split(i.ln_value, o.ln_value).ratio;
        acc += lam;
        if prev.is_finite() {
            let q = lam / prev;
            if q < 1.0 && TAIL_SAFETY * lam * q / (1.0 - q) <= 1e-3 * acc.max(1e-300) {
                return Ok(acc + TAIL_SAFETY * lam * q / (1.0 - q));
            }
        }
        prev = lam;
    }
    Ok(f64::INFINITY)
}

/// Spectrum of `T_{B,m}` for a possibly off-center polydisc `B`, from the Galerkin matrix in
/// the first `cfg.basis` orthonormal monomials per axis.
///
/// The grid is refined (tanh-sinh level and angular points together) until the matrix changes
/// by less than `cfg.matrix_tol`.
pub fn galerkin_spectrum(
    engine: &MomentEngine,
    table: &NormTable,
    disc: &ShiftedPolydisc,
    eps: f64,
    cfg: &GalerkinConfig,
) -> Result<GalerkinResult> {
    let n = table.dim();
    if n >= 2 && !cfg.force {
        return Err(Error::QuadratureTooExpensive(n));
    }
    if disc.radius.len() != n || disc.center.len() != n {
        return Err(Error::InvalidDomain("disc dimension differs from the table".into()));
    }
    for j in 0..n {
        let reach = disc.center(j).norm() + disc.radius[j];
        if !(disc.radius[j] > 0.0) || reach > table.pair.outer[j] * (1.0 + 1e-15) {
            return Err(Error::InvalidDomain(format!("disc on axis {j} is not contained in Omega")));
        }
        let pole = table.weight.axis_log(j) > 0.0 || table.weight.iso_log > 0.0;
        let c = disc.center(j).norm();
        if pole && c > 0.0 && c < disc.radius[j] {
            return Err(Error::InvalidDomain(format!(
                "the log pole on axis {j} lies inside an off-center disc; only centered discs are supported there"
            )));
        }
    }
    let basis: Vec<Vec<u32>> = match &table.layout {
        Layout::Product(axes) => {
            let mut out: Vec<Vec<u32>> = vec![vec![]];
            for a in axes {
                if a.len() < cfg.basis {
                    return Err(Error::InvalidDomain(format!(
                        "norm table has only {} entries on an axis, basis needs {}",
                        a.len(),
                        cfg.basis
                    )));
                }
                out = out
                    .into_iter()
                    .flat_map(|p| {
                        (a.k_min..a.k_min + cfg.basis as u32).map(move |k| {
                            let mut q = p.clone();
                            q.push(k);
                            q
                        })
                    })
                    .collect();
            }
            out
        }
        Layout::Shells { entries, degree_range } => {
            let top = degree_range.0 + cfg.basis as u32;
            entries.keys().filter(|a| a.iter().sum::<u32>() < top).cloned().collect()
        }
    };
    if basis.len() > cfg.max_matrix {
        return Err(Error::MatrixTooLarge(basis.len()));
    }
    let ln_norms: Vec<f64> = basis.iter().map(|a| table.ln_norm(a).expect("basis from the table")).collect();

    let mut level = cfg.start_level;
    let mut n_theta = cfg.start_theta.max(2 * cfg.basis + 2).next_power_of_two();
    let mut mat = assemble(table, &basis, &ln_norms, &grid(disc, level, n_theta));
    let change = loop {
        if level >= cfg.max_level {
            return Err(Error::PrecisionNotReached { rel_err: f64::NAN, tol: cfg.matrix_tol });
        }
        let finer = assemble(table, &basis, &ln_norms, &grid(disc, level + 1, 2 * n_theta));
        let mut diff: f64 = 0.0;
        for a in 0..basis.len() {
            for b in 0..basis.len() {
                diff = diff.max((finer[a][b] - mat[a][b]).norm());
            }
        }
        level += 1;
        n_theta *= 2;
        mat = finer;
        if diff <= cfg.matrix_tol {
            break diff;
        }
        if level >= cfg.max_level {
            return Err(Error::PrecisionNotReached { rel_err: diff, tol: cfg.matrix_tol });
        }
    };

    let eig = hermitian_eigen(&mat, cfg.jacobi_tol, 100)?;
    let mut clamps = 0;
    let mut entries = Vec::with_capacity(basis.len());
    for (i, &v) in eig.values.iter().enumerate() {
        let mut lam = v;
        if !(lam > 0.0 && lam < 1.0) {
            clamps += 1;
            log::warn!("Galerkin eigenvalue {v:e} clamped into (0,1)");
            lam = lam.clamp(f64::MIN_POSITIVE, crate::quadrature::BELOW_ONE);
        }
        entries.push(SpectrumEntry {
            index: vec![i as u32],
            lambda: lam,
            complement: 1.0 - lam,
            err: change + eig.off_norm,
        });
    }

    // Direct check: evaluate each eigenfunction directly on a finer grid.
    let pts = grid(disc, level + 1, 2 * n_theta);
    let d = basis.len();
    let chunk = pts.len().div_ceil(ASSEMBLY_CHUNKS).max(1);
    let partial: Vec<Vec<f64>> = pts
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = vec![0.0; d];
            for (z, w) in part {
                let v = basis_values(table, &basis, &ln_norms, z);
                for (k, vec) in eig.vectors.iter().enumerate() {
                    let f: Complex64 = vec.iter().zip(&v).map(|(c, s)| c * s).sum();
                    acc[k] += f.norm_sqr() * w;
                }
            }
            acc
        })
        .collect();
    let mut on_b = vec![0.0; d];
    for p in partial {
        for k in 0..d {
            on_b[k] += p[k];
        }
    }
    let ratio_residuals: Vec<f64> = (0..d)
        .map(|k| {
            let full: f64 = eig.vectors[k].iter().map(|c| c.norm_sqr()).sum();
            (on_b[k] / full - eig.values[k]).abs()
        })
        .collect();

    let excluded_mass = match &table.layout {
        Layout::Product(axes) => {
            // sum over alpha outside the basis <= sum_j tail_j prod_{i != j} trace_i
            let mut tails = vec![];
            let mut traces = vec![];
            for (j, a) in axes.iter().enumerate() {
                let rho = disc.center(j).norm() + disc.radius[j];
                tails.push(excluded_axis_mass(engine, table, j, a.k_min + cfg.basis as u32, rho)?);
                traces.push(if n > 1 { excluded_axis_mass(engine, table, j, a.k_min, rho)? } else { 1.0 });
            }
            (0..n).map(|j| tails[j] * (0..n).filter(|&i| i != j).map(|i| traces[i]).product::<f64>()).sum()
        }
        Layout::Shells { .. } => f64::NAN,
    };
    if !(excluded_mass < 1e-8) {
        log::warn!("Galerkin basis leaves out mass {excluded_mass:e} on B");
    }

    let spectrum = Spectrum::assemble(table.m, eps, entries, (excluded_mass, excluded_mass), clamps);
    Ok(GalerkinResult {
        spectrum,
        basis,
        eigenvectors: eig.vectors,
        ratio_residuals,
        excluded_mass,
        quadrature_change: change,
        level,
        n_theta,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OffDiagDecay {
    pub m: u32,
    pub eps_radius: f64,
    /// `B(zeta) e^{-2 m phi(zeta)}`.
    pub total: f64,
    /// `int_{|z - zeta| <= eps_radius} |K(z, zeta)|^2 e^{-2 m phi(z)} e^{-2 m phi(zeta)}`.
    pub inside: f64,
    /// `(total - inside) / m^n`.
    pub mass: f64,
    pub rel_err: f64,
}

/// Kernel mass outside the ball of radius `eps_radius` around `zeta`, in dimension one.
///
/// The total mass comes from the reproducing identity `int |K(., zeta)|^2 e^{-2 m phi} = B(zeta)`.
pub fn offdiag_decay(table: &NormTable, zeta: Complex64, eps_radius: f64, cfg: &QuadConfig) -> Result<OffDiagDecay> {
    if table.dim() != 1 {
        return Err(Error::QuadratureTooExpensive(table.dim()));
    }
    if table.weight.is_singular(&[zeta]) {
        return Err(Error::SingularPoint);
    }
    let big = table.pair.outer[0];
    let r0 = zeta.norm();
    if r0 >= big {
        return Err(Error::InvalidDomain("zeta must lie inside Omega".into()));
    }
    let m = table.m as f64;
    let ln_phi_zeta = -2.0 * m * table.weight.eval_phi(&[zeta]);
    let b = bergman_diag_radii(table, &[r0])?;

    // Distance from zeta to the boundary of Omega along direction theta.
    let s_max = |theta: f64| -> f64 {
        let bb = (zeta.conj() * Complex64::from_polar(1.0, theta)).re;
        -bb + (bb * bb + big * big - r0 * r0).sqrt()
    };
    // Angles where the ball boundary meets the boundary of Omega.
    let mut cuts = vec![];
    if r0 > 0.0 {
        let cosv = (big * big - r0 * r0 - eps_radius * eps_radius) / (2.0 * eps_radius * r0);
        if cosv.abs() < 1.0 {
            let a = cosv.acos();
            cuts.push(zeta.arg() + a);
            cuts.push(zeta.arg() - a);
        }
    }
    let start = cuts.first().copied().unwrap_or(0.0);
    let mut pieces: Vec<f64> = cuts.iter().map(|c| (c - start).rem_euclid(2.0 * PI) + start).collect();
    pieces.push(start);
    pieces.push(start + 2.0 * PI);
    pieces.sort_by(|a, b| a.total_cmp(b));
    pieces.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    let inner_err = std::cell::Cell::new(0.0f64);
    let radial = |theta: f64| -> f64 {
        let top = s_max(theta).min(eps_radius);
        let dir = Complex64::from_polar(1.0, theta);
        let lf = |s: f64| {
            let z = zeta + dir * s;
            let (scale, mant) = offdiag_sum(table, &[z], &[zeta]);
            2.0 * (scale + mant.norm().ln()) - 2.0 * m * table.weight.eval_phi(&[z]) + s.ln()
        };
        let q = integrate_log(lf, 0.0, top, cfg);
        inner_err.set(inner_err.get().max(q.rel_err));
        q.ln_value
    };
    let mut inside = LogSum::default();
    let mut outer_err: f64 = 0.0;
    for w in pieces.windows(2) {
        let q = integrate_log(radial, w[0], w[1], cfg);
        outer_err = outer_err.max(q.rel_err);
        inside.add(q.ln_value);
    }
    let ln_total = b.ln_value + ln_phi_zeta;
    let ln_inside = inside.ln() + ln_phi_zeta;
    let mass = ln_total.exp() * -(ln_inside - ln_total).exp_m1() / m;
    Ok(OffDiagDecay {
        m: table.m,
        eps_radius,
        total: ln_total.exp(),
        inside: ln_inside.exp(),
        mass,
        rel_err: outer_err + inner_err.get() + b.rel_tail,
    })
}
