use std::path::PathBuf;
use std::process::ExitCode;

use bergman_lab::quadrature::{MomentCache, QuadConfig};
use bergman_lab_cli::runner::CACHE_FILE;
use bergman_lab_cli::{run, Kind, RunOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bergman-lab", version, about = "Bergman kernel and Toeplitz spectrum experiments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Fail on tolerated events such as eigenvalue clamps.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named by the config's "kind".
    Run(Common),
    /// Dump norm tables.
    Moments(Common),
    Spectrum(Common),
    Volume(Common),
    Generate(Common),
    Regularize(Common),
    Ideal(Common),
    Offdiag(Common),
    /// Inspect or maintain the moment cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    List {
        #[arg(long)]
        cache: PathBuf,
    },
    Purge {
        #[arg(long)]
        cache: PathBuf,
    },
    /// Recompute a random sample of the cached moments.
    Verify {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn experiment(common: Common, kind: Option<Kind>) -> ExitCode {
    let opts = RunOptions { config: common.config, kind, out: common.out, cache: common.cache, strict: common.strict };
    match run(&opts) {
        Ok((report, code)) => {
            for a in &report.assertions {
                println!("{} {}{}", if a.passed { "PASS" } else { "FAIL" }, a.name, if a.detail.is_empty() { String::new() } else { format!(" ({})", a.detail) });
            }
            for f in &report.flags {
                println!("FLAG {f}");
            }
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cache(action: CacheAction) -> ExitCode {
    let open = |dir: &PathBuf| MomentCache::open(dir.join(CACHE_FILE));
    let result = match action {
        CacheAction::List { cache } => open(&cache).map(|c| {
            println!("weight_hash\tm\talpha\tln_value");
            for line in c.list() {
                println!("{line}");
            }
            0
        }),
        CacheAction::Purge { cache } => open(&cache).and_then(|c| c.purge()).map(|_| 0),
        CacheAction::Verify { cache, fraction, tol, seed } => open(&cache)
            .and_then(|c| c.verify(fraction, tol, &QuadConfig::default(), seed))
            .map(|r| {
                println!("{} entries, {} sampled, {} matched, worst relative difference {:e}", r.total, r.sampled, r.matched, r.worst_rel_diff);
                if r.all_matched() { 0 } else { 1 }
            }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("cache error: {e}");
            ExitCode::from(3)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("could not configure {k} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match cli.command {
        Command::Run(c) => experiment(c, None),
        Command::Moments(c) => experiment(c, Some(Kind::Moments)),
        Command::Spectrum(c) => experiment(c, Some(Kind::Spectrum)),
        Command::Volume(c) => experiment(c, Some(Kind::Volume)),
        Command::Generate(c) => experiment(c, Some(Kind::Generation)),
        Command::Regularize(c) => experiment(c, Some(Kind::Regularize)),
        Command::Ideal(c) => experiment(c, Some(Kind::IdealSweep)),
        Command::Offdiag(c) => experiment(c, Some(Kind::Offdiag)),
        Command::Cache { action } => cache(action),
    }
}
