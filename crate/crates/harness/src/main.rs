use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lowrank_rl_harness::config::QSource;
use lowrank_rl_harness::experiments::{self, Context};
use lowrank_rl_harness::{plot, ExperimentConfig, HarnessError};

/// Low-rank value iteration experiments.
#[derive(Debug, Parser)]
#[command(name = "lowrank-rl", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or refresh the cached Q* proxy.
    Oracle,
    /// Run the algorithm for every configured seed.
    Run,
    /// Compare estimators under equal sample budgets.
    MeBench,
    /// Spectrum, effective rank and truncation bias of the proxy.
    Rank,
    /// Simulate greedy policies.
    Rollout {
        /// Which Q-function to act on (default: from the config).
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
    /// Render SVG figures from the CSVs in a directory.
    Plot {
        /// CSV directory (default: --out, then the config's output directory).
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Learned,
    Proxy,
    Both,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.run.out = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))?;
    }
    if let Command::Plot { dir } = &cli.command {
        let dir = match (dir, &cli.out, &cli.config) {
            (Some(d), _, _) => d.clone(),
            (None, Some(o), _) => o.clone(),
            (None, None, Some(_)) => load(cli)?.run.out,
            _ => return Err(HarnessError::Config("plot needs a directory, --out or --config".into())),
        };
        let out = plot::emit_plots(&dir)?;
        if out.files.is_empty() {
            eprintln!("no CSVs to plot in {}", dir.display());
        }
        for f in &out.files {
            println!("{}", f.display());
        }
        return Ok(());
    }
    let cfg = load(cli)?;
    let ctx = Context::new(&cfg);
    match &cli.command {
        Command::Oracle => {
            let s = experiments::build_oracle(&cfg, &ctx)?;
            println!(
                "proxy {}x{}: {} sweeps, residual {:.3e}, converged {}, max |Q| {:.6}",
                s.rows, s.cols, s.sweeps, s.residual, s.converged, s.max_abs
            );
            if !s.converged {
                eprintln!("warning: value iteration stopped at max_sweeps before reaching tol");
            }
        }
        Command::Run => {
            let o = experiments::run_experiment(&cfg, &ctx)?;
            if o.schedule.theory_range_exceeded {
                eprintln!("warning: 2*gamma*c_me = {:.3} >= 1; the table schedule was used", o.schedule.contraction);
            }
            for r in &o.aggregate {
                let m = r.mean_error.map_or(String::from("-"), |x| format!("{:.4}", x.0));
                let l = r.linf_error.map_or(String::from("-"), |x| format!("{:.4}", x.0));
                println!("t={:<3} samples={:<14.0} linf={l} mean={m}", r.t, r.cumulative_samples.0);
            }
            println!("wrote {} files to {}", o.files.len() + 1, ctx.out.display());
        }
        Command::MeBench => {
            let entries = experiments::me_benchmark(&cfg, &ctx)?;
            for e in experiments::best_per_method(&entries) {
                let last = e.aggregate.last().expect("t_max >= 1");
                let m = last.mean_error.map_or(f64::NAN, |x| x.0);
                println!("{:<12} param={:<10} final mean error {m:.4}", e.method, e.param);
            }
        }
        Command::Rank => {
            let r = experiments::rank_diagnostics(&cfg, &ctx)?;
            for (d, rs) in &r.effective_ranks {
                println!("r*({d:e}) = {rs}");
            }
            let k = 10.min(r.sigmas.len());
            println!("top-{k} mass {:.6}", r.mass(k));
            if let Some(z) = r.zeta.get(k - 1) {
                println!("zeta_{k} / max|Q| = {:.4}", z / r.max_abs);
            }
        }
        Command::Rollout { source } => {
            let source = match source {
                Some(SourceArg::Learned) => QSource::Learned,
                Some(SourceArg::Proxy) => QSource::Proxy,
                Some(SourceArg::Both) => QSource::Both,
                None => cfg.rollout.source,
            };
            for r in experiments::rollout(&cfg, &ctx, source)? {
                println!("{:<8} {} = {:.3} ± {:.3} ({} episodes)", r.source, r.metric.name(), r.mean, r.std, r.episodes);
            }
        }
        Command::Plot { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
