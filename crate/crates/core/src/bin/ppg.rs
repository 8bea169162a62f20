use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ppg_core::pipeline::{run, Command, Profile, RunConfig};
use ppg_core::{Error, Result};

/// Product poster generation: synthesize a corpus, train the layout
/// planner, plan layouts, compose posters and evaluate them.
#[derive(Debug, Parser)]
#[command(name = "ppg", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run config, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Constraints file of fixed slot attributes for `plan`.
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the core count.
    #[arg(long)]
    jobs: Option<usize>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Records to synthesize.
    #[arg(long)]
    n: Option<usize>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Layouts to plan.
    #[arg(long)]
    samples: Option<usize>,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_profile(cli.profile.unwrap_or(Profile::Desk)),
    };
    if let Some(p) = cli.profile {
        if cli.config.is_some() && p != cfg.profile {
            return Err(Error::invalid(format!("--profile {p:?} conflicts with the config's {:?} profile", cfg.profile)));
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(c) = &cli.constraints {
        cfg.sampler.constraints = Some(c.clone());
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(c) = &cli.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(n) = cli.n {
        cfg.synth.n = n;
    }
    if let Some(s) = cli.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = cli.samples {
        cfg.sampler.num_samples = Some(s);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = build_config(&cli).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.jobs {
            if j == 0 {
                return Err(Error::invalid("--jobs must be at least 1"));
            }
            pool = pool.num_threads(j);
        }
        let pool = pool.build().map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
        pool.install(|| run(&cfg, cli.command))
    });
    match result {
        Ok(m) => {
            println!("{}", cli_summary(&m));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ppg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cli_summary(m: &ppg_core::pipeline::Manifest) -> String {
    let mut s = format!("{} done (config {})", m.command, &m.config_sha256[..12]);
    if !m.layouts.is_empty() {
        s.push_str(&format!(", {} layouts", m.layouts.len()));
    }
    if m.posters > 0 {
        s.push_str(&format!(", {} posters", m.posters));
    }
    if let Some(e) = &m.eval {
        s.push_str(&format!(", max IoU {:.3}, fd_geo {:.3}", e.max_iou, e.fd_geo));
    }
    s
}
