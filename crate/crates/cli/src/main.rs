use std::path::PathBuf;
use std::process::ExitCode;

use babenko::io::{self, BranchSpec, OutputFormat, PointSelector, RunConfig, RunError};
use clap::{Args, Parser, Subcommand};

/// Steady periodic gravity waves on finite depth: bifurcation points, branch
/// tracing, wave profiles and r-curves for the modified Babenko equation.
#[derive(Parser)]
#[command(name = "babenko", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override it, and it overrides defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Mean depth h (default π/5).
    #[arg(long, global = true)]
    depth: Option<f64>,
    /// Number of cosine modes N: a power of two in 16..=4096.
    #[arg(long, global = true)]
    modes: Option<usize>,
    /// csv or json.
    #[arg(long, global = true)]
    format: Option<OutputFormat>,
    /// Output directory (also BABENKO_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores (also BABENKO_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print μ_n where the branches C_n leave the flat state.
    Bifpoints {
        #[arg(long, default_value_t = 5)]
        n_max: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Trace branches and write one table and state file per branch.
    Trace {
        /// Mode n of a primary branch; `5+` also follows its secondaries. Repeatable.
        #[arg(long)]
        branch: Vec<BranchSpec>,
        /// Stop once the amplitude ‖w‖∞ exceeds this.
        #[arg(long)]
        amplitude_max: Option<f64>,
        /// Largest continuation step.
        #[arg(long)]
        step: Option<f64>,
        /// Also trace the half of each cluster branch that ascends in μ.
        #[arg(long)]
        ascending_halves: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write the surface profile at one point of a traced branch.
    Profile {
        /// Branch state file or table written by `trace`.
        branch_file: PathBuf,
        /// endpoint, a point index, or mu=<value>.
        #[arg(long)]
        point: Option<PointSelector>,
        /// Samples over one period.
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write the (‖w‖∞, r) curve of a traced branch.
    Rcurve {
        branch_file: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check the invariant suite on traced branches; defaults to every state
    /// file in the output directory.
    Verify {
        files: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(h) = common.depth {
        cfg.depth = h;
    }
    if let Some(n) = common.modes {
        cfg.modes = n;
    }
    if let Some(f) = common.format {
        cfg.format = f;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Bifpoints { n_max, common } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let depth = cfg.depth_params()?;
            let rows = io::bifpoints(depth, n_max);
            let text = io::bifpoints_text(depth, &rows, cfg.format);
            print!("{text}");
            if common.out.is_some() {
                let ext = if cfg.format == OutputFormat::Csv { "csv" } else { "json" };
                let path = cfg.out_dir.join(format!("bifpoints.{ext}"));
                std::fs::create_dir_all(&cfg.out_dir).map_err(|source| RunError::Io { path: cfg.out_dir.clone(), source })?;
                std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })?;
            }
            Ok(())
        }
        Command::Trace { branch, amplitude_max, step, ascending_halves, common } => {
            let mut cfg = resolve(&common)?;
            if !branch.is_empty() {
                cfg.branches = branch;
            }
            if let Some(a) = amplitude_max {
                cfg.continuation.amplitude_max = Some(a);
            }
            if let Some(s) = step {
                let c = &mut cfg.continuation;
                c.max_step = s;
                c.amplitude_step = c.amplitude_step.min(s);
                c.min_step = c.min_step.min(c.amplitude_step);
            }
            cfg.continuation.ascending_halves |= ascending_halves;
            let out = io::cmd_trace(&cfg)?;
            for r in &out.reports {
                let status = match &r.error {
                    Some(e) => format!("error: {e}"),
                    None => format!("{:?}", r.status).to_lowercase(),
                };
                eprintln!("{}: {} points, {} events, {status}", r.label, r.points, r.events.len());
            }
            if out.files.is_empty() {
                eprintln!("no branches requested; nothing written");
            }
            match out.hard_failures() {
                0 => Ok(()),
                n => Err(RunError::Numerical(format!("{n} branch(es) ended in a hard failure; see events.json"))),
            }
        }
        Command::Profile { branch_file, point, samples, common } => {
            let cfg = resolve(&common)?;
            let (doc, files) = io::cmd_profile(&branch_file, point, samples, &cfg.out_dir, cfg.format)?;
            let m = &doc.meta;
            eprintln!(
                "{} point {}: mu {:.8}, sup norm {:.8}, {} crest(s), {} highest",
                m.label,
                m.index,
                m.mu,
                m.sup_norm,
                m.crests.len(),
                m.highest_crests
            );
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Rcurve { branch_file, common } => {
            let cfg = resolve(&common)?;
            let (doc, files) = io::cmd_rcurve(&branch_file, &cfg.out_dir, cfg.format)?;
            match doc.maximum {
                Some(m) => eprintln!("{}: max r {:.8} at sup norm {:.8}", doc.label, m.r, m.sup_norm),
                None => eprintln!("{}: no interior maximum of r", doc.label),
            }
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Verify { files, common } => {
            let cfg = resolve(&common)?;
            let (report, path) = io::cmd_verify(&cfg, &files)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} checks, {} failed; report in {}",
                report.checks_run,
                report.checks_failed,
                path.display()
            );
            if report.pass {
                Ok(())
            } else {
                Err(RunError::Verification(format!("violated: {}", report.violated.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("babenko: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
