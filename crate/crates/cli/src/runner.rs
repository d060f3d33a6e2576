//! Runs one experiment and collects its artifacts.
//!
//! Nothing touches the output directory until every computation has finished, so a failed
//! run leaves no partial files behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use bergman_lab::bergman::{build_norm_table, NormTable, TableConfig};
use bergman_lab::generation::{
    bergman_domination_check, decompose, disc_grid, random_polynomial, tail_trial, DecompositionReport,
    RECONSTRUCTION_TOL,
};
use bergman_lab::quadrature::{MomentCache, MomentEngine, QuadConfig};
use bergman_lab::regularize::{
    analytic_form, exact, phi_m_log_disc, polydisc_grid, regularization_ladder, sandwich_check, stair_ideal,
    subadditivity_check, superadditivity_sweep, upper_bound_check, Q,
};
use bergman_lab::toeplitz::{diagonal_spectrum_with, galerkin_spectrum, offdiag_decay, ShiftedPolydisc};
use bergman_lab::volume::{estimate_volume, sandwich_inequalities_check};
use bergman_lab::weights::ReinhardtWeight;
use bergman_lab::Error;
use num_complex::Complex64;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig, Kind};

/// One checked statement.
#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub kind: String,
    pub weight_hash: String,
    pub assertions: Vec<Assertion>,
    /// Tolerated events that `--strict` turns into failures.
    pub flags: Vec<String>,
    pub assumptions: Vec<String>,
    pub data: Value,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Report plus the extra files of one experiment.
pub struct Outcome {
    pub report: Report,
    pub files: Vec<(String, String)>,
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Numeric(Error),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Numeric(e) => write!(f, "numeric failure: {e}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => RunError::Config(ConfigError(m)),
            Error::InvalidWeight(m) => RunError::Config(ConfigError(m)),
            other => RunError::Numeric(other),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numeric(_) | RunError::Io(_) => 3,
        }
    }
}

pub const CACHE_FILE: &str = "moments.jsonl";

/// Engine for `cfg`, backed by `<dir>/moments.jsonl` when a cache directory is given.
pub fn engine_for(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<MomentEngine, RunError> {
    let qcfg = QuadConfig::with_tol(cfg.tolerances.quad_rel);
    Ok(match cache_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            MomentEngine::with_cache(qcfg, Arc::new(MomentCache::open(dir.join(CACHE_FILE))?))
        }
        None => MomentEngine::new(qcfg),
    })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    engine: &'a MomentEngine,
    table_cfg: TableConfig,
    qcfg: QuadConfig,
    assertions: Vec<Assertion>,
    flags: Vec<String>,
    assumptions: Vec<String>,
    files: Vec<(String, String)>,
}

impl Ctx<'_> {
    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.assertions.push(Assertion { name: name.into(), passed, detail });
    }

    fn table(&self, m: u32) -> Result<NormTable, RunError> {
        Ok(build_norm_table(self.engine, &self.cfg.weight, m, &self.cfg.polydisc, &self.table_cfg)?)
    }

    fn ladder(&self, min: usize) -> Result<Vec<u32>, RunError> {
        if self.cfg.ladder.len() < min {
            return Err(RunError::Config(ConfigError(format!("this experiment needs at least {min} ladder entries"))));
        }
        Ok(self.cfg.ladder.clone())
    }
}

/// Computes everything for one experiment without writing anything.
pub fn compute(cfg: &ExperimentConfig, kind: Kind, engine: &MomentEngine) -> Result<Outcome, RunError> {
    let mut ctx = Ctx {
        cfg,
        engine,
        table_cfg: TableConfig { tail_tol: cfg.tolerances.tail, ..TableConfig::default() },
        qcfg: QuadConfig::with_tol(cfg.tolerances.quad_rel),
        assertions: vec![],
        flags: vec![],
        assumptions: vec![],
        files: vec![],
    };
    let data = match kind {
        Kind::Moments => moments(&mut ctx)?,
        Kind::Volume => volume(&mut ctx)?,
        Kind::Spectrum => spectrum(&mut ctx)?,
        Kind::Generation => generation(&mut ctx)?,
        Kind::Regularize => regularize(&mut ctx)?,
        Kind::IdealSweep => ideal(&mut ctx)?,
        Kind::Offdiag => offdiag(&mut ctx)?,
    };
    let report = Report {
        kind: kind.name().into(),
        weight_hash: cfg.weight.canonical_hash(),
        assertions: ctx.assertions,
        flags: ctx.flags,
        assumptions: ctx.assumptions,
        data,
    };
    Ok(Outcome { report, files: ctx.files })
}

fn moments(ctx: &mut Ctx) -> Result<Value, RunError> {
    let mut out = vec![];
    for m in ctx.ladder(1)? {
        let t = ctx.table(m)?;
        let n = t.dim();
        let mut csv = String::new();
        for j in 1..=n {
            let _ = write!(csv, "alpha{j},");
        }
        csv.push_str("ln_norm_omega,ln_norm_b,rel_err\n");
        for a in t.indices() {
            for k in &a {
                let _ = write!(csv, "{k},");
            }
            let _ = writeln!(
                csv,
                "{:e},{:e},{:e}",
                t.ln_norm(&a).unwrap(),
                t.ln_inner_norm(&a).unwrap(),
                t.rel_err(&a).unwrap_or(0.0)
            );
        }
        if t.clamp_events > 0 {
            ctx.flags.push(format!("m = {m}: {} eigenvalue clamp events", t.clamp_events));
        }
        ctx.files.push((format!("norms_m{m}.csv"), csv));
        out.push(json!({"m": m, "monomials": t.len(), "cutoffs": t.cutoffs(), "clamp_events": t.clamp_events}));
    }
    Ok(json!({ "tables": out }))
}

fn volume(ctx: &mut Ctx) -> Result<Value, RunError> {
    let cfg = ctx.cfg;
    let ladder = ctx.ladder(3)?;
    let est = estimate_volume(ctx.engine, &cfg.weight, &cfg.polydisc, &ladder, cfg.eps, &ctx.table_cfg)?;
    ctx.check(
        "volume within tolerance of the Monge-Ampere target",
        est.rel_gap <= cfg.tolerances.volume_rel_gap,
        format!("v_hat = {:.6}, target = {:.6}, rel_gap = {:.3e}", est.extrapolated, est.target, est.rel_gap),
    );
    ctx.check("scaled traces stay bounded", est.ladder_bounded(), String::new());
    ctx.check(
        "eigenvalue count estimate",
        est.number_estimate_holds(cfg.weight.dim, cfg.eps, cfg.tolerances.number_slack),
        format!("slack {}", cfg.tolerances.number_slack),
    );
    let ratios: Vec<f64> = est.ladder.iter().map(|p| p.trace2 / p.trace).collect();
    ctx.check(
        "trace2/trace increases along the ladder",
        ratios.last() > ratios.first(),
        format!("{ratios:?}"),
    );
    let clamps: usize = est.ladder.iter().map(|p| p.clamp_events).sum();
    if clamps > 0 {
        ctx.flags.push(format!("{clamps} eigenvalue clamp events"));
    }
    let mut sandwich = vec![];
    let has_logs = (0..cfg.weight.dim).any(|j| cfg.weight.axis_log(j) > 0.0);
    if has_logs && cfg.weight.is_tensor() {
        for &m in &ladder {
            let r = sandwich_inequalities_check(ctx.engine, &cfg.weight, m, &cfg.polydisc, &ctx.table_cfg)?;
            ctx.check(
                &format!("trace comparison with the smooth part at m = {m}"),
                r.holds_i && r.holds_ii,
                format!("trace_phi = {:e}, trace_psi = {:e}, lower bound = {:e}", r.trace_phi, r.trace_psi, r.lower_bound),
            );
            sandwich.push(r);
        }
    }
    ctx.files.push(("volume_ladder.csv".into(), est.csv()));
    Ok(json!({ "estimate": est, "trace_ratios": ratios, "sandwich": sandwich }))
}

fn spectrum(ctx: &mut Ctx) -> Result<Value, RunError> {
    let cfg = ctx.cfg;
    let mut summaries = vec![];
    let mut galerkin = vec![];
    for m in ctx.ladder(1)? {
        let t = ctx.table(m)?;
        let s = diagonal_spectrum_with(&t, cfg.eps, &ctx.table_cfg)?;
        ctx.check(&format!("eigenvalues in (0, 1) at m = {m}"), s.in_open_interval(), format!("{} eigenvalues", s.entries.len()));
        if s.clamp_events > 0 {
            ctx.flags.push(format!("m = {m}: {} eigenvalue clamp events", s.clamp_events));
        }
        if let Some(gcfg) = &cfg.galerkin {
            let disc = ShiftedPolydisc::centered(cfg.polydisc.inner.clone());
            let g = galerkin_spectrum(ctx.engine, &t, &disc, cfg.eps, gcfg)?;
            let agreement = g
                .spectrum
                .entries
                .iter()
                .zip(&s.entries)
                .map(|(a, b)| (a.lambda - b.lambda).abs())
                .fold(0.0, f64::max);
            let residual = g.ratio_residuals.iter().cloned().fold(0.0, f64::max);
            let tol = cfg.tolerances.galerkin;
            ctx.check(&format!("Galerkin eigenvalues in (0, 1) at m = {m}"), g.spectrum.in_open_interval(), String::new());
            ctx.check(&format!("Galerkin matches the diagonal spectrum at m = {m}"), agreement <= tol, format!("{agreement:.3e}"));
            ctx.check(&format!("eigenvector ratio identity at m = {m}"), residual <= tol, format!("{residual:.3e}"));
            galerkin.push(json!({"m": m, "agreement": agreement, "ratio_residual": residual, "excluded_mass": g.excluded_mass, "level": g.level}));
        }
        ctx.files.push((format!("spectrum_m{m}.csv"), s.csv()));
        summaries.push(s.summary());
    }
    Ok(json!({ "summaries": summaries, "galerkin": galerkin }))
}

fn generation(ctx: &mut Ctx) -> Result<Value, RunError> {
    let cfg = ctx.cfg;
    let g = &cfg.generation;
    let mut per_m = vec![];
    for m in ctx.ladder(1)? {
        let t = ctx.table(m)?;
        let reports: Vec<DecompositionReport> = (0..g.samples as u64)
            .map(|i| {
                let poly = random_polynomial(cfg.weight.dim, g.degree, g.seed + i);
                decompose(&poly, &t, g.c_init, &g.decompose)
            })
            .collect::<Result<_, _>>()?;
        if reports.is_empty() {
            return Err(RunError::Config(ConfigError("generation needs samples >= 1".into())));
        }
        let floor = g.decompose.residual_floor;
        let residual_ok = reports.iter().all(|r| *r.residuals.last().unwrap() <= floor * r.c_g);
        let contraction = reports.iter().map(|r| r.contraction).fold(0.0, f64::max);
        let recon_ok = reports.iter().all(|r| r.reconstruction_error <= RECONSTRUCTION_TOL * (r.c_g.sqrt() + 1.0));
        let cs: Vec<f64> = reports.iter().map(|r| r.c_measured).collect();
        let mean = cs.iter().sum::<f64>() / cs.len() as f64;
        let c_max = cs.iter().cloned().fold(0.0, f64::max);
        let c_min = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        let sup_ok = reports.iter().all(|r| r.sup_bound <= c_max * r.n_m() as f64 * r.c_g);
        let n_m = reports[0].n_m();
        let grid = disc_grid(reports[0].r0, cfg.weight.dim, g.decompose.grid);
        let domination = bergman_domination_check(&t, &reports[0].concentrated, &grid)?;
        ctx.check(&format!("final residual below the floor at m = {m}"), residual_ok, String::new());
        ctx.check(&format!("contraction below 1/4 at m = {m}"), contraction < 0.25, format!("eps0 = {contraction:.4}"));
        ctx.check(&format!("reconstruction on B0 at m = {m}"), recon_ok, String::new());
        ctx.check(&format!("sup of sum |b|^2 within C N_m C_g at m = {m}"), sup_ok, format!("C = {c_max:.6e}"));
        ctx.check(
            &format!("measured C stable within 20% at m = {m}"),
            c_max <= 1.2 * mean && c_min >= 0.8 * mean,
            format!("min {c_min:.6e}, mean {mean:.6e}, max {c_max:.6e}"),
        );
        ctx.check(
            &format!("kernel domination by the concentrated monomials at m = {m}"),
            domination.is_finite() && domination <= c_max * n_m as f64,
            format!("worst ratio {domination:.6}, C N_m = {:.6}", c_max * n_m as f64),
        );
        let trial = tail_trial(&t, g.decompose.eps, g.tail_trials, g.seed)?;
        ctx.check(
            &format!("tail mass below eps ||f||^2 for random concentrated f at m = {m}"),
            trial.passed == trial.trials,
            format!("{}/{} (worst ratio {:.4})", trial.passed, trial.trials, trial.worst),
        );
        per_m.push(json!({
            "m": m,
            "N_m": n_m,
            "r0": reports[0].r0,
            "contraction": contraction,
            "c_measured": cs,
            "domination": domination,
            "tail_trial": trial,
            "samples": reports.iter().map(|r| json!({
                "c_g": r.c_g,
                "residuals": r.residuals,
                "contraction": r.contraction,
                "sup_bound": r.sup_bound,
                "c_measured": r.c_measured,
                "reconstruction_error": r.reconstruction_error,
                "pieces": r.coefficients.len(),
            })).collect::<Vec<_>>(),
        }));
    }
    ctx.assumptions.push("the Hormander extension is replaced by exact series projection and Skoda division by coordinate division of Taylor coefficients".into());
    Ok(json!({ "runs": per_m }))
}

fn is_log_disc(w: &ReinhardtWeight, outer: &[f64]) -> bool {
    w.dim == 1
        && w.iso_log == 0.0
        && w.profiles[0].is_flat()
        && w.profiles[0].int_log == 1
        && w.profiles[0].frac_log == 0.0
        && outer == [1.0]
}

fn regularize(ctx: &mut Ctx) -> Result<Value, RunError> {
    let cfg = ctx.cfg;
    let ladder = ctx.ladder(3)?;
    let grid = polydisc_grid(&cfg.polydisc.outer, cfg.grid.per_axis, cfg.grid.fraction);
    // Tails only need certifying out to the grid.
    let table_cfg = TableConfig { eval_fraction: ctx.table_cfg.eval_fraction.min(cfg.grid.fraction + 0.02), ..ctx.table_cfg };
    let lad = regularization_ladder(ctx.engine, &cfg.weight, &cfg.polydisc, &ladder, grid.clone(), &table_cfg)?;
    let sw = sandwich_check(&lad)?;
    ctx.check("lower sandwich constant does not explode", sw.non_exploding, format!("{:?}", sw.c1_ladder));
    let mut csv = String::from("point");
    for j in 1..=cfg.weight.dim {
        let _ = write!(csv, ",abs_z{j}");
    }
    let _ = write!(csv, ",phi");
    for m in &ladder {
        let _ = write!(csv, ",phi_{m}");
    }
    csv.push('\n');
    for (i, z) in grid.iter().enumerate() {
        let _ = write!(csv, "{i}");
        for w in z {
            let _ = write!(csv, ",{:e}", w.norm());
        }
        let _ = write!(csv, ",{:e}", cfg.weight.eval_phi(z));
        for row in &lad.rows {
            let _ = write!(csv, ",{:e}", row.values[i]);
        }
        csv.push('\n');
    }
    ctx.files.push(("phi_ladder.csv".into(), csv));

    let mut oracle = Value::Null;
    if is_log_disc(&cfg.weight, &cfg.polydisc.outer) {
        let dev = lad
            .rows
            .iter()
            .flat_map(|row| grid.iter().zip(&row.values).map(move |(z, v)| (v - phi_m_log_disc(z[0], row.m)).abs()))
            .fold(0.0, f64::max);
        ctx.check("closed-form approximant of log|z|", dev <= cfg.tolerances.oracle, format!("max deviation {dev:.3e}"));
        oracle = json!({ "max_deviation": dev });
    }

    let mut upper = Value::Null;
    if let Some(middle) = &cfg.polydisc.middle {
        if analytic_form(&cfg.weight, middle).is_ok() {
            let rep = upper_bound_check(ctx.engine, &cfg.weight, &cfg.polydisc, cfg.delta, &ladder, cfg.grid.per_axis, &ctx.table_cfg)?;
            let normalized: Vec<f64> = rep.rows.iter().map(|r| r.normalized).collect();
            ctx.check(
                "m excess - log(mc - n) stays bounded",
                rep.bounded,
                format!("{normalized:?}, allowed max {:.4}", rep.allowed_max),
            );
            if rep.hypothesis_violated {
                ctx.flags.push("ladder entries below (n + 2)/(c delta)".into());
            }
            upper = serde_json::to_value(&rep).expect("report serializes");
        }
    }
    Ok(json!({ "sandwich": sw, "oracle": oracle, "upper_bound": upper, "ladder": ladder }))
}

fn ideal(ctx: &mut Ctx) -> Result<Value, RunError> {
    let cfg = ctx.cfg;
    let w = &cfg.weight;
    let delta = exact(cfg.delta)?;
    let mut staircases = vec![];
    let mut sub = vec![];
    for m in ctx.ladder(1)? {
        staircases.push(stair_ideal(w, Q::from_integer(m as i64))?);
        let r = subadditivity_check(w, m)?;
        ctx.check(
            &format!("I({m} phi) inside I(phi)^{m}"),
            r.holds,
            match (&r.witness, &r.strict_witness) {
                (Some(wit), _) => format!("witness {wit:?}"),
                (None, Some(s)) => format!("strict, {s:?} lies only in the power"),
                (None, None) => "equal".into(),
            },
        );
        sub.push(json!({"m": m, "report": r}));
    }
    let sweep = superadditivity_sweep(w, delta, cfg.ideal.extra, cfg.ideal.max_p)?;
    ctx.check(
        "superadditivity over the sweep",
        sweep.violations == 0,
        format!("{} checks, {} violations", sweep.checks, sweep.violations),
    );
    ctx.check("superadditivity margins are positive", sweep.min_margin > 0, format!("min margin {}", sweep.min_margin));
    ctx.assumptions.push("smooth parts are bounded on compacts and do not change membership".into());
    ctx.files.push(("staircases.json".into(), pretty(&staircases)));
    ctx.files.push(("certificates.json".into(), pretty(&sweep)));
    Ok(json!({ "subadditivity": sub, "superadditivity": {"checks": sweep.checks, "violations": sweep.violations, "min_margin": sweep.min_margin} }))
}

fn offdiag(ctx: &mut Ctx) -> Result<Value, RunError> {
    let cfg = ctx.cfg;
    let zeta = Complex64::new(cfg.offdiag.zeta[0], cfg.offdiag.zeta[1]);
    let mut rows = vec![];
    let mut csv = String::from("m,mass,total,inside,rel_err\n");
    for m in ctx.ladder(1)? {
        let t = ctx.table(m)?;
        let d = offdiag_decay(&t, zeta, cfg.offdiag.radius, &ctx.qcfg)?;
        let _ = writeln!(csv, "{},{:e},{:e},{:e},{:e}", d.m, d.mass, d.total, d.inside, d.rel_err);
        rows.push(d);
    }
    let masses: Vec<f64> = rows.iter().map(|d| d.mass).collect();
    ctx.check("off-diagonal mass decreases with m", masses.windows(2).all(|w| w[1] < w[0]), format!("{masses:?}"));
    ctx.files.push(("offdiag.csv".into(), csv));
    Ok(json!({ "rows": rows }))
}

pub fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

/// Writes the report, the extra files and `metadata.json` into `out`.
///
/// Files are staged in a sibling directory and renamed into place one by one.
pub fn write_outputs(out: &Path, outcome: &Outcome, metadata: &Value) -> Result<(), RunError> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let stage = parent.join(format!(
        ".{}.partial-{}",
        out.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let _ = fs::remove_dir_all(&stage);
    fs::create_dir_all(&stage)?;
    let mut names: Vec<(String, String)> = outcome.files.clone();
    names.push(("report.json".into(), pretty(&outcome.report)));
    names.push(("metadata.json".into(), pretty(metadata)));
    for (name, content) in &names {
        fs::write(stage.join(name), content)?;
    }
    fs::create_dir_all(out)?;
    for (name, _) in &names {
        fs::rename(stage.join(name), out.join(name))?;
    }
    fs::remove_dir_all(&stage)?;
    Ok(())
}

/// Everything a command line run needs.
pub struct RunOptions {
    pub config: PathBuf,
    pub kind: Option<Kind>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub strict: bool,
}

/// Loads, computes, writes; returns the exit status.
pub fn run(opts: &RunOptions) -> Result<(Report, i32), RunError> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let cfg = ExperimentConfig::load(&opts.config)?;
    let kind = cfg.resolve_kind(opts.kind)?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| ConfigError("no output directory (use --out or \"output\")".into()))?;
    let cache = opts.cache.clone().or_else(|| cfg.cache.clone());
    let engine = engine_for(&cfg, cache.as_deref())?;
    let outcome = compute(&cfg, kind, &engine)?;
    if let Some(c) = &engine.cache {
        c.flush()?;
    }
    let metadata = json!({
        "started_unix": started,
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "config": opts.config.display().to_string(),
    });
    write_outputs(&out, &outcome, &metadata)?;
    let mut code = if outcome.report.passed() { 0 } else { 1 };
    if opts.strict && !outcome.report.flags.is_empty() {
        code = 1;
    }
    Ok((outcome.report, code))
}
