//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always show. The process fails when the set
//! of failing criteria differs from `KNOWN_FAILURES`, so a regression and an unexpected fix
//! are both reported.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use bergman_lab::bergman::{build_norm_table, log_factorization_check, TableConfig};
use bergman_lab::generation::{
    bergman_domination_check, decompose, disc_grid, random_polynomial, tail_trial, DecomposeConfig,
    DecompositionReport, RECONSTRUCTION_TOL,
};
use bergman_lab::quadrature::{MomentEngine, QuadConfig};
use bergman_lab::regularize::{
    phi_m_log_disc, polydisc_grid, regularization_ladder, sandwich_check, subadditivity_check, superadditivity_sweep,
    upper_bound_check, Q,
};
use bergman_lab::toeplitz::{diagonal_spectrum, galerkin_spectrum, GalerkinConfig, ShiftedPolydisc};
use bergman_lab::volume::{estimate_volume, fraction_comparison_sweep, sandwich_inequalities_check};
use bergman_lab::weights::{PolydiscPair, RadialProfile, ReinhardtWeight};
use num_complex::Complex64;

/// Criteria expected to fail, with the reason recorded in the README.
const KNOWN_FAILURES: &[u32] = &[7];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn engine() -> MomentEngine {
    MomentEngine::new(QuadConfig::default())
}

fn c1_fock_volume() -> Outcome {
    let start = Instant::now();
    let pair = PolydiscPair::uniform(1, 2.0, 1.0);
    let est = estimate_volume(&engine(), &ReinhardtWeight::fock(1), &pair, &[16, 32, 64], 0.1, &TableConfig::default())
        .expect("Fock volume");
    let secs = start.elapsed().as_secs_f64();
    // Fock oracle: the Monge-Ampere mass of |z|^2 on the unit disc is 2 after the n! scaling.
    let gap = (est.extrapolated / 2.0 - 1.0).abs();
    outcome(
        gap <= 0.03 && (est.target - 2.0).abs() < 1e-9 && secs < 60.0,
        format!("v_hat {:.6}, oracle 2, gap {gap:.2e}, quadrature target {:.12}, {secs:.1}s", est.extrapolated, est.target),
    )
}

fn c2_log_factorization() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1usize, 2] {
        let pair = PolydiscPair::uniform(n, 1.0, 0.5);
        let points: Vec<Vec<Complex64>> = (0..20)
            .map(|i| {
                (0..n)
                    .map(|j| Complex64::from_polar(0.05 + 0.85 * ((i * 7 + j * 3) % 20) as f64 / 20.0, 0.37 * (i + j) as f64))
                    .collect()
            })
            .collect();
        for m in [4, 16] {
            let dev = log_factorization_check(&engine(), &ReinhardtWeight::fock(n), 1, m, &pair, &TableConfig::default(), &points)
                .expect("factorization check");
            worst = worst.max(dev);
        }
    }
    outcome(worst < 1e-9, format!("worst relative deviation {worst:.2e}"))
}

fn c3_fractional_log() -> Outcome {
    let pair = PolydiscPair::uniform(1, 2.0, 1.0);
    let cfg = TableConfig::default();
    // m c is an integer on this ladder, so the shift is a pure index shift and the gap is ~0.
    let ladder = [16, 32, 64];
    let smooth = ReinhardtWeight::fock(1);
    let mut shifted = smooth.clone();
    shifted.profiles[0] = RadialProfile::gaussian().with_logs(0, 0.5);
    shifted.strictness = 0.0;
    let a = estimate_volume(&engine(), &smooth, &pair, &ladder, 0.1, &cfg).expect("smooth volume");
    let b = estimate_volume(&engine(), &shifted, &pair, &ladder, 0.1, &cfg).expect("shifted volume");
    let at64 = |e: &bergman_lab::volume::VolumeEstimate| e.ladder.iter().find(|p| p.m == 64).unwrap().scaled_trace;
    let gap = (at64(&b) / at64(&a) - 1.0).abs();
    let mut violations = 0;
    for m in ladder {
        let r = sandwich_inequalities_check(&engine(), &shifted, m, &pair, &cfg).expect("sandwich");
        violations += usize::from(!r.holds_i) + usize::from(!r.holds_ii);
    }
    outcome(gap <= 0.05 && violations == 0, format!("relative gap at m = 64 {gap:.2e}, {violations} inequality violations"))
}

fn c4_fraction_comparison() -> Outcome {
    let cs = [0.1, 0.3, 0.5, 0.7, 0.9];
    let profiles = [RadialProfile::gaussian(), RadialProfile::flat(), RadialProfile::smooth(vec![0.0, 0.5, 0.25])];
    let mut total = 0;
    let mut bad = 0;
    for p in &profiles {
        let (t, v) = fraction_comparison_sweep(p, 16.0, 200, &cs, 1.0, 2.0, &QuadConfig::default()).expect("sweep");
        total += t;
        bad += v.len();
    }
    outcome(bad == 0 && total == 3 * 201 * 5, format!("{total} cases, {bad} violations"))
}

fn c5_trace_trend() -> Outcome {
    let pair = PolydiscPair::uniform(1, 2.0, 1.0);
    let est = estimate_volume(&engine(), &ReinhardtWeight::fock(1), &pair, &[8, 16, 32, 64], 0.1, &TableConfig::default())
        .expect("ladder");
    let ratio = |m: u32| {
        let p = est.ladder.iter().find(|p| p.m == m).unwrap();
        p.trace2 / p.trace
    };
    let (r8, r64) = (ratio(8), ratio(64));
    let number = est.number_estimate_holds(1, 0.1, 0.05);
    outcome(r64 > r8 && r64 >= 0.85 && number, format!("ratio {r8:.4} at m = 8, {r64:.4} at m = 64, count estimate {number}"))
}

fn c6_spectrum() -> Outcome {
    let pair = PolydiscPair::uniform(1, 2.0, 1.0);
    let mut all_inside = true;
    let (mut agreement, mut residual): (f64, f64) = (0.0, 0.0);
    let mut count = 0;
    for m in [8, 16, 32] {
        let t = build_norm_table(&engine(), &ReinhardtWeight::fock(1), m, &pair, &TableConfig::default()).expect("table");
        let s = diagonal_spectrum(&t, 0.1).expect("spectrum");
        let g = galerkin_spectrum(&engine(), &t, &ShiftedPolydisc::centered(vec![1.0]), 0.1, &GalerkinConfig::default())
            .expect("galerkin");
        all_inside &= s.in_open_interval() && g.spectrum.in_open_interval();
        count += s.entries.len() + g.spectrum.entries.len();
        for (a, b) in g.spectrum.entries.iter().zip(&s.entries) {
            agreement = agreement.max((a.lambda - b.lambda).abs());
        }
        residual = g.ratio_residuals.iter().fold(residual, |r, &x| r.max(x));
    }
    outcome(
        all_inside && agreement <= 1e-8 && residual <= 1e-8,
        format!("{count} eigenvalues in (0,1): {all_inside}, agreement {agreement:.2e}, ratio residual {residual:.2e}"),
    )
}

fn c7_generation() -> Outcome {
    let pair = PolydiscPair::uniform(1, 1.0, 0.5);
    let t = build_norm_table(&engine(), &ReinhardtWeight::fock(1), 32, &pair, &TableConfig::default()).expect("table");
    let cfg = DecomposeConfig::default();
    let reports: Vec<DecompositionReport> =
        (1..=10).map(|seed| decompose(&random_polynomial(1, 12, seed), &t, 1.0, &cfg).expect("decomposition")).collect();
    let residual = reports.iter().all(|r| *r.residuals.last().unwrap() <= 1e-8 * r.c_g);
    let contraction = reports.iter().map(|r| r.contraction).fold(0.0, f64::max);
    let recon = reports.iter().map(|r| r.reconstruction_error / (r.c_g.sqrt() + 1.0)).fold(0.0, f64::max);
    let cs: Vec<f64> = reports.iter().map(|r| r.c_measured).collect();
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    let c_max = cs.iter().cloned().fold(0.0, f64::max);
    let stable = cs.iter().all(|c| (c / mean - 1.0).abs() <= 0.2);
    let sup = reports.iter().all(|r| r.sup_bound <= c_max * r.n_m() as f64 * r.c_g);
    let n_m = reports[0].n_m() as f64;
    let grid = disc_grid(reports[0].r0, 1, cfg.grid);
    let dom = bergman_domination_check(&t, &reports[0].concentrated, &grid).expect("domination");
    let dom_ok = dom.is_finite() && dom <= c_max * n_m;
    outcome(
        residual && contraction < 0.25 && recon <= RECONSTRUCTION_TOL && stable && sup && dom_ok,
        format!(
            "residual {residual}, eps0 {contraction:.3}, recon {recon:.1e}, C {c_max:.4e} stable {stable}, sup {sup}, \
             domination {dom:.5} vs C N_m {:.5}",
            c_max * n_m
        ),
    )
}

fn c8_tail_trial() -> Outcome {
    let pair = PolydiscPair::uniform(1, 1.0, 0.5);
    let t = build_norm_table(&engine(), &ReinhardtWeight::fock(1), 32, &pair, &TableConfig::default()).expect("table");
    let trial = tail_trial(&t, 0.1, 100, 7).expect("trial");
    outcome(trial.passed == 100 && trial.trials == 100, format!("{}/{}, worst ratio {:.4}", trial.passed, trial.trials, trial.worst))
}

fn c9_regularization() -> Outcome {
    let log_disc = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(1, 0.0)]);
    let pair = PolydiscPair::uniform(1, 1.0, 0.5);
    let grid = polydisc_grid(&[1.0], 20, 0.9);
    let cfg = TableConfig { eval_fraction: 0.92, ..TableConfig::default() };
    let ladder = regularization_ladder(&engine(), &log_disc, &pair, &[4, 8, 16], grid.clone(), &cfg).expect("ladder");
    let mut oracle: f64 = 0.0;
    for row in &ladder.rows {
        for (z, v) in grid.iter().zip(&row.values) {
            oracle = oracle.max((v - phi_m_log_disc(z[0], row.m)).abs());
        }
    }
    let sw = sandwich_check(&ladder).expect("sandwich");

    let iso = ReinhardtWeight::isotropic(2, 2.0);
    let mut pair2 = PolydiscPair::uniform(2, 1.0, 0.5);
    pair2.middle = Some(vec![0.75, 0.75]);
    let rep = upper_bound_check(&engine(), &iso, &pair2, 0.5, &[8, 16, 32], 4, &TableConfig::default()).expect("upper bound");
    let normalized: Vec<String> = rep.rows.iter().map(|r| format!("{:.3}", r.normalized)).collect();
    outcome(
        oracle <= 1e-8 && sw.non_exploding && rep.bounded && !rep.hypothesis_violated,
        format!(
            "oracle deviation {oracle:.1e}, C1 ladder {:?} non-exploding {}, normalized excess [{}] bounded {}",
            sw.c1_ladder.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>(),
            sw.non_exploding,
            normalized.join(", "),
            rep.bounded
        ),
    )
}

fn c10_ideals() -> Outcome {
    let iso = ReinhardtWeight::isotropic(2, 2.0);
    let sub = subadditivity_check(&iso, 2).expect("subadditivity");
    let tensor = ReinhardtWeight::tensor(vec![RadialProfile::flat().with_logs(0, 0.5), RadialProfile::flat().with_logs(1, 0.25)]);
    let delta = Q::new(1, 2);
    let mut checks = 0;
    let mut violations = 0;
    let mut margin = i64::MAX;
    for w in [&iso, &tensor] {
        let s = superadditivity_sweep(w, delta, 8, 4).expect("sweep");
        checks += s.checks;
        violations += s.violations;
        margin = margin.min(s.min_margin);
    }
    outcome(
        sub.holds && sub.strict_witness.is_some() && violations == 0 && margin > 0,
        format!(
            "subadditivity holds {} with strict witness {:?}; superadditivity {checks} checks, {violations} violations, min margin {margin}",
            sub.holds, sub.strict_witness
        ),
    )
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bergman-lab")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/volume-fock.json");
    let cache = dir.path().join("cache");
    let run = |name: &str| -> (i32, Vec<u8>) {
        let out: PathBuf = dir.path().join(name);
        let (code, _) = cli(&[
            "volume",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--cache",
            cache.to_str().unwrap(),
        ]);
        (code, std::fs::read(out.join("report.json")).unwrap_or_default())
    };
    let (c1, cold) = run("cold");
    let (c2, warm) = run("warm");
    let (verify_code, verify) = cli(&["cache", "verify", "--cache", cache.to_str().unwrap()]);
    let (purge_code, _) = cli(&["cache", "purge", "--cache", cache.to_str().unwrap()]);
    let (c3, purged) = run("purged");
    let identical = !cold.is_empty() && cold == warm && warm == purged;
    outcome(
        c1 == 0 && c2 == 0 && c3 == 0 && identical && verify_code == 0 && purge_code == 0,
        format!("exit codes {c1}/{c2}/{c3}, reports identical {identical}, verify: {}", verify.trim()),
    )
}

fn main() {
    // Accept and ignore libtest arguments such as `--nocapture`; a name filter skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "Fock volume", c1_fock_volume),
        (2, "factorization through a coordinate log", c2_log_factorization),
        (3, "fractional log leaves the volume unchanged", c3_fractional_log),
        (4, "shifted ratio comparison", c4_fraction_comparison),
        (5, "trace coincidence trend and eigenvalue count", c5_trace_trend),
        (6, "eigenvalue interval and Galerkin agreement", c6_spectrum),
        (7, "generation by concentrated monomials", c7_generation),
        (8, "tail mass of concentrated functions", c8_tail_trial),
        (9, "regularization", c9_regularization),
        (10, "ideal sweeps", c10_ideals),
        (11, "determinism and cache verification", c11_determinism),
    ];
    let mut failed = vec![];
    for (id, name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status}: {name} ({}) [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.passed {
            failed.push(id);
        }
    }
    if failed != KNOWN_FAILURES {
        eprintln!("failing criteria {failed:?} differ from the documented set {KNOWN_FAILURES:?}");
        std::process::exit(1);
    }
    println!("failing criteria match the documented set {KNOWN_FAILURES:?}");
}
