use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protoalign::adapt::AdaptScope;
use protoalign::config::ExperimentConfig;
use protoalign::train::Variant;
use protoalign::{experiment, report, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "protoalign", version, about = "Prototype-aligned test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train model variants, one checkpoint per seed and prototype count.
    Train(Common),
    /// Run test-time adaptation over the corruption sweep.
    Adapt(Common),
    /// Render plots and summary tables from adaptation results.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; repeat to run several. Overrides the config list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Restrict to one variant (baseline, jt, jt-ent).
    #[arg(long)]
    variant: Option<Variant>,
    /// Test-time gradient steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Adapted parameters (all, last-block).
    #[arg(long)]
    scope: Option<AdaptScope>,
    /// Output directory. Overrides the config value.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(p) = self.steps {
            cfg.adapt.steps = p;
        }
        if let Some(s) = self.scope {
            cfg.adapt.scope = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn variants(&self) -> Vec<Variant> {
        match self.variant {
            Some(v) => vec![v],
            None => Variant::ALL.to_vec(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Generate(c) | Command::Train(c) | Command::Adapt(c) | Command::Report(c) => c,
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    }
    let cfg = common.resolve()?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Generate(c) => {
            experiment::cmd_generate(&cfg, &out, c.force)?;
        }
        Command::Train(c) => {
            for r in experiment::cmd_train(&cfg, &out, &c.variants(), c.force)? {
                println!("{} val_acc={:.4} {}", experiment::run_name(r.variant, r.num_prototypes, r.seed), r.report.final_val_acc, r.checkpoint.display());
            }
        }
        Command::Adapt(c) => {
            for (variant, k, cells) in experiment::cmd_adapt(&cfg, &out, &c.variants(), c.variant.is_some(), c.force)? {
                let n = cells.len().max(1) as f64;
                let before = cells.iter().map(|c| c.results.accuracy_before).sum::<f64>() / n;
                let after = cells.iter().map(|c| c.results.accuracy_after).sum::<f64>() / n;
                println!("{variant} k={k}: accuracy_before={before:.4} accuracy_after={after:.4}");
            }
        }
        Command::Report(c) => {
            let written = report::cmd_report(&out, c.force)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROTOALIGN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
