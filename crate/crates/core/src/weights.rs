//! Reinhardt plurisubharmonic weights on centered polydiscs.
//!
//! A weight in dimension `n` is
//!
//! ```text
//! phi(z) = sum_j [ h_j(|z_j|^2) + (p_j + c_j) log|z_j| ] + (c/2) log(|z_1|^2 + ... + |z_n|^2)
//! ```
//!
//! with `h_j` a real polynomial in `t = |z_j|^2`, `p_j` a nonnegative integer, `c_j` in `[0, 1)`
//! and `c >= 0`.  Everything here only depends on the moduli `|z_j|`, which the numerical layers
//! exploit: most routines take a vector of radii instead of complex points.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jacobi;

/// Largest supported complex dimension.
pub const MAX_DIM: usize = 3;

/// One coordinate's contribution `h(|z|^2) + (int_log + frac_log) log|z|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialProfile {
    /// Coefficients of `h(t) = coeffs[0] + coeffs[1] t + ...`.
    pub coeffs: Vec<f64>,
    #[serde(default)]
    pub frac_log: f64,
    #[serde(default)]
    pub int_log: u32,
}

impl RadialProfile {
    pub fn smooth(coeffs: Vec<f64>) -> Self {
        RadialProfile { coeffs, frac_log: 0.0, int_log: 0 }
    }

    /// `h(t) = t`, i.e. the contribution `|z|^2`.
    pub fn gaussian() -> Self {
        Self::smooth(vec![0.0, 1.0])
    }

    pub fn flat() -> Self {
        Self::smooth(vec![])
    }

    pub fn with_logs(mut self, int_log: u32, frac_log: f64) -> Self {
        self.int_log = int_log;
        self.frac_log = frac_log;
        self
    }

    /// Total coefficient of `log|z|`.
    pub fn log_coefficient(&self) -> f64 {
        self.int_log as f64 + self.frac_log
    }

    pub fn h(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }

    pub fn h_prime(&self, t: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * t + k as f64 * c)
    }

    pub fn h_second(&self, t: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * t + (k * (k - 1)) as f64 * c)
    }

    /// `h'(t) + t h''(t)`, the Laplacian density `d^2/dz dzbar h(|z|^2)`.
    pub fn laplacian_density(&self, t: f64) -> f64 {
        // sum_k k^2 c_k t^(k-1)
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * t + (k * k) as f64 * c)
    }

    /// True when the smooth part is constant.
    pub fn is_flat(&self) -> bool {
        self.coeffs.iter().skip(1).all(|&c| c == 0.0)
    }

    /// Checks `h'(t) + t h''(t) >= 0` on `[0, t_max]`.
    ///
    /// Certified directly when every coefficient of the density polynomial is nonnegative,
    /// otherwise checked on a dense sample.
    pub fn is_subharmonic_on(&self, t_max: f64) -> bool {
        if self.coeffs.iter().skip(1).all(|&c| c >= 0.0) {
            return true;
        }
        let samples = 4096;
        (0..=samples).all(|i| {
            let t = t_max * i as f64 / samples as f64;
            self.laplacian_density(t) >= -1e-12
        })
    }

    fn validate(&self, axis: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.frac_log) {
            return Err(Error::InvalidWeight(format!(
                "frac_log on axis {axis} must lie in [0,1), got {}",
                self.frac_log
            )));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidWeight(format!("non-finite coefficient on axis {axis}")));
        }
        Ok(())
    }
}

/// A weight built from per-axis profiles and an isotropic log term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReinhardtWeight {
    pub dim: usize,
    pub profiles: Vec<RadialProfile>,
    /// `c` in `(c/2) log(|z_1|^2 + ... + |z_n|^2)`.
    #[serde(default)]
    pub iso_log: f64,
    /// Declared lower bound for the complex Hessian of the smooth part; `0` means none.
    #[serde(default)]
    pub strictness: f64,
}

impl ReinhardtWeight {
    /// Tensor weight with no isotropic term.
    pub fn tensor(profiles: Vec<RadialProfile>) -> Self {
        ReinhardtWeight { dim: profiles.len(), profiles, iso_log: 0.0, strictness: 0.0 }
    }

    /// `|z_1|^2 + ... + |z_n|^2`.
    pub fn fock(dim: usize) -> Self {
        let mut w = Self::tensor(vec![RadialProfile::gaussian(); dim]);
        w.strictness = 1.0;
        w
    }

    /// `(c/2) log |z|^2` with no smooth part.
    pub fn isotropic(dim: usize, c: f64) -> Self {
        ReinhardtWeight { dim, profiles: vec![RadialProfile::flat(); dim], iso_log: c, strictness: 0.0 }
    }

    pub fn is_tensor(&self) -> bool {
        self.iso_log == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::InvalidWeight(format!(
                "dimension must be 1..={MAX_DIM}, got {}",
                self.dim
            )));
        }
        if self.profiles.len() != self.dim {
            return Err(Error::InvalidWeight(format!(
                "expected {} profiles, got {}",
                self.dim,
                self.profiles.len()
            )));
        }
        for (j, p) in self.profiles.iter().enumerate() {
            p.validate(j)?;
        }
        if !(self.iso_log >= 0.0 && self.iso_log.is_finite()) {
            return Err(Error::InvalidWeight(format!("iso_log must be >= 0, got {}", self.iso_log)));
        }
        if !(self.strictness >= 0.0 && self.strictness.is_finite()) {
            return Err(Error::InvalidWeight("strictness must be >= 0".into()));
        }
        Ok(())
    }

    /// Validation including plurisubharmonicity of the smooth parts on the polydisc.
    pub fn validate_on(&self, radii: &[f64]) -> Result<()> {
        self.validate()?;
        if radii.len() != self.dim {
            return Err(Error::InvalidDomain("radius vector has the wrong dimension".into()));
        }
        for (j, (p, r)) in self.profiles.iter().zip(radii).enumerate() {
            if !p.is_subharmonic_on(r * r) {
                return Err(Error::InvalidWeight(format!(
                    "h'(t) + t h''(t) changes sign on axis {j}"
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash used as a cache key.
    pub fn canonical_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("weight serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weight serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    /// `phi` evaluated from the moduli `x_j = |z_j|`.  Returns `-inf` on the polar set.
    pub fn eval_phi_radii(&self, x: &[f64]) -> f64 {
        let mut value = 0.0;
        let mut s = 0.0;
        for (p, &xj) in self.profiles.iter().zip(x) {
            let t = xj * xj;
            s += t;
            value += p.h(t);
            let a = p.log_coefficient();
            if a > 0.0 {
                value += a * xj.ln();
            }
        }
        if self.iso_log > 0.0 {
            value += 0.5 * self.iso_log * s.ln();
        }
        value
    }

    pub fn eval_phi(&self, z: &[Complex64]) -> f64 {
        let x: Vec<f64> = z.iter().map(|w| w.norm()).collect();
        self.eval_phi_radii(&x)
    }

    /// True when `z` lies on a log pole of the weight.
    pub fn is_singular(&self, z: &[Complex64]) -> bool {
        let on_axis = self
            .profiles
            .iter()
            .zip(z)
            .any(|(p, w)| p.log_coefficient() > 0.0 && w.norm_sqr() == 0.0);
        let at_origin = self.iso_log > 0.0 && z.iter().all(|w| w.norm_sqr() == 0.0);
        on_axis || at_origin
    }

    /// The complex Hessian `H_ij = d^2 phi / dz_i dzbar_j`.
    ///
    /// The per-axis log terms are pluriharmonic off their poles and do not contribute.
    pub fn complex_hessian(&self, z: &[Complex64]) -> Result<Vec<Vec<Complex64>>> {
        if z.len() != self.dim {
            return Err(Error::InvalidDomain("point has the wrong dimension".into()));
        }
        if self.is_singular(z) {
            return Err(Error::SingularPoint);
        }
        let n = self.dim;
        let mut h = vec![vec![Complex64::new(0.0, 0.0); n]; n];
        for i in 0..n {
            h[i][i] += self.profiles[i].laplacian_density(z[i].norm_sqr());
        }
        if self.iso_log > 0.0 {
            let s: f64 = z.iter().map(|w| w.norm_sqr()).sum();
            let c2 = 0.5 * self.iso_log;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += if i == j {
                        // s - |z_i|^2 summed directly, which avoids cancellation near the axes.
                        let rest: f64 = (0..n).filter(|&k| k != i).map(|k| z[k].norm_sqr()).sum();
                        Complex64::new(c2 * rest / (s * s), 0.0)
                    } else {
                        -z[i].conj() * z[j] * (c2 / (s * s))
                    };
                }
            }
        }
        Ok(h)
    }

    /// `det [d^2 phi / dz_i dzbar_j]`, the Monge-Ampere density against Lebesgue measure.
    pub fn ma_density(&self, z: &[Complex64]) -> Result<f64> {
        let h = self.complex_hessian(z)?;
        Ok(determinant(&h).re)
    }

    pub fn ma_density_radii(&self, x: &[f64]) -> Result<f64> {
        let z: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        self.ma_density(&z)
    }

    /// Maximum entrywise deviation between the analytic complex Hessian and a central
    /// finite-difference Hessian of `phi` viewed as a function of `2n` real variables.
    pub fn hessian_fd_check(&self, z: &[Complex64], step: f64) -> Result<f64> {
        let exact = self.complex_hessian(z)?;
        let n = self.dim;
        let mut base = Vec::with_capacity(2 * n);
        for w in z {
            base.push(w.re);
            base.push(w.im);
        }
        let f = |u: &[f64]| {
            let pt: Vec<Complex64> =
                (0..n).map(|j| Complex64::new(u[2 * j], u[2 * j + 1])).collect();
            self.eval_phi(&pt)
        };
        let dim = 2 * n;
        let mut d2 = vec![vec![0.0; dim]; dim];
        let mut u = base.clone();
        let f0 = f(&u);
        for a in 0..dim {
            u[a] = base[a] + step;
            let fp = f(&u);
            u[a] = base[a] - step;
            let fm = f(&u);
            u[a] = base[a];
            d2[a][a] = (fp - 2.0 * f0 + fm) / (step * step);
            for b in (a + 1)..dim {
                let mut eval = |sa: f64, sb: f64| {
                    u[a] = base[a] + sa * step;
                    u[b] = base[b] + sb * step;
                    let v = f(&u);
                    u[a] = base[a];
                    u[b] = base[b];
                    v
                };
                let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * step * step);
                d2[a][b] = v;
                d2[b][a] = v;
            }
        }
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (xi, yi, xj, yj) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
                let re = 0.25 * (d2[xi][xj] + d2[yi][yj]);
                let im = 0.25 * (d2[xi][yj] - d2[yi][xj]);
                let fd = Complex64::new(re, im);
                worst = worst.max((fd - exact[i][j]).norm());
            }
        }
        Ok(worst)
    }

    /// Smallest eigenvalue of the complex Hessian at `z`.
    pub fn min_hessian_eigenvalue(&self, z: &[Complex64]) -> Result<f64> {
        let h = self.complex_hessian(z)?;
        let eig = jacobi::hermitian_eigen(&h, 1e-14, 64)?;
        Ok(eig.values.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    /// Largest total log coefficient along an axis, `p_j + c_j`.
    pub fn axis_log(&self, j: usize) -> f64 {
        self.profiles[j].log_coefficient()
    }

    /// Drops the per-axis fractional parts, keeping integer logs, smooth parts and `iso_log`.
    pub fn without_fractional_logs(&self) -> Self {
        let mut w = self.clone();
        for p in &mut w.profiles {
            p.frac_log = 0.0;
        }
        w
    }

    /// Drops all per-axis log terms.
    pub fn smooth_part(&self) -> Self {
        let mut w = self.clone();
        for p in &mut w.profiles {
            p.frac_log = 0.0;
            p.int_log = 0;
        }
        w.iso_log = 0.0;
        w
    }
}

/// Determinant of a small complex matrix by Gaussian elimination with partial pivoting.
pub fn determinant(a: &[Vec<Complex64>]) -> Complex64 {
    let n = a.len();
    let mut m: Vec<Vec<Complex64>> = a.to_vec();
    let mut det = Complex64::new(1.0, 0.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].norm().total_cmp(&m[j][col].norm()))
            .unwrap();
        if m[pivot][col].norm() == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col];
        for row in (col + 1)..n {
            let factor = m[row][col] / m[col][col];
            for k in col..n {
                let v = m[col][k];
                m[row][k] -= factor * v;
            }
        }
    }
    det
}

/// Nested polydiscs `B subset Omega` (and optionally `B subset B' subset Omega`), all centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolydiscPair {
    pub outer: Vec<f64>,
    pub inner: Vec<f64>,
    #[serde(default)]
    pub middle: Option<Vec<f64>>,
}

impl PolydiscPair {
    pub fn new(outer: Vec<f64>, inner: Vec<f64>) -> Self {
        PolydiscPair { outer, inner, middle: None }
    }

    /// Equal radii on every axis.
    pub fn uniform(dim: usize, outer: f64, inner: f64) -> Self {
        Self::new(vec![outer; dim], vec![inner; dim])
    }

    pub fn dim(&self) -> usize {
        self.outer.len()
    }

    /// Euclidean diameter of the outer polydisc.
    pub fn diameter(&self) -> f64 {
        2.0 * self.outer.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.outer.len();
        if n == 0 || n > MAX_DIM || self.inner.len() != n {
            return Err(Error::InvalidDomain("radius vectors must have equal length 1..=3".into()));
        }
        for j in 0..n {
            let (r, big) = (self.inner[j], self.outer[j]);
            if !(r > 0.0 && r < big && big.is_finite()) {
                return Err(Error::InvalidDomain(format!(
                    "need 0 < inner < outer on axis {j}, got {r} and {big}"
                )));
            }
        }
        if let Some(mid) = &self.middle {
            if mid.len() != n
                || (0..n).any(|j| !(self.inner[j] < mid[j] && mid[j] < self.outer[j]))
            {
                return Err(Error::InvalidDomain("middle radii must lie strictly between".into()));
            }
        }
        Ok(())
    }
}
