use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use condense::pipeline::{diag, load_config, run_pipeline, run_stage, Overrides, PipelineConfig};
use condense::synth::PlanMode;
use condense::Error;

#[derive(Parser, Debug)]
#[command(name = "condense", version, about = "Dataset condensation by backbone and statistic matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the backbone pool on the real training split.
    Pretrain,
    /// Record each backbone's statistic bank.
    CaptureStats,
    /// Optimize the distilled images.
    Synthesize,
    /// Record ensemble soft labels of the distilled images.
    Relabel,
    /// Train a fresh model on the distilled set and report test accuracy.
    Evaluate,
    /// Run every stage in order.
    Pipeline,
    /// Print diversity diagnostics of a distilled set.
    Diag {
        /// Distilled set directory; defaults to `<out>/distilled`.
        #[arg(long)]
        distilled: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Plan {
    Original,
    Reorder,
}

#[derive(Args, Debug)]
struct Flags {
    /// TOML pipeline config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    ipc: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long = "beta-dr", global = true)]
    beta_dr: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long = "tau-dd", global = true)]
    tau_dd: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Logit normalization of the relabel ensemble.
    #[arg(long, global = true)]
    ln: Option<Switch>,
    #[arg(long, global = true)]
    wdd: Option<f64>,
    #[arg(long, global = true)]
    wbn: Option<f64>,
    #[arg(long, global = true)]
    wconv: Option<f64>,
    #[arg(long = "batch-plan", global = true)]
    batch_plan: Option<Plan>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ipc: self.ipc,
            alpha: self.alpha,
            beta_dr: self.beta_dr,
            gamma: self.gamma,
            tau_dd: self.tau_dd,
            iterations: self.iterations,
            ln: self.ln.map(|s| matches!(s, Switch::On)),
            w_dd: self.wdd,
            w_bn: self.wbn,
            w_conv: self.wconv,
            batch_plan: self.batch_plan.map(|p| match p {
                Plan::Original => PlanMode::Original,
                Plan::Reorder => PlanMode::Reorder,
            }),
        }
    }

    fn config(&self) -> condense::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => PipelineConfig::default(),
        };
        self.overrides().apply(&mut cfg);
        cfg.resolve()
    }
}

/// 2: config, 3: missing or mismatched artifact, 4: numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact { .. } | Error::Mismatch(_) | Error::Corrupt { .. } | Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::Shape { .. } => 1,
    }
}

fn run(cli: &Cli) -> condense::Result<()> {
    let cfg = cli.flags.config()?;
    let stage = match &cli.command {
        Command::Pretrain => "pretrain",
        Command::CaptureStats => "capture-stats",
        Command::Synthesize => "synthesize",
        Command::Relabel => "relabel",
        Command::Evaluate => "evaluate",
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            println!("{} top-1 accuracy: {:.4}", report.model, report.accuracy);
            return Ok(());
        }
        Command::Diag { distilled } => {
            let dir = distilled.clone().unwrap_or_else(|| cfg.distilled_dir());
            let d = diag(&dir)?;
            println!("class\tsize\tmean_cosine\tmin_eigenvalue");
            for c in &d.classes {
                println!("{}\t{}\t{:.6}\t{:.6}", c.class, c.size, c.mean_cosine, c.min_eigenvalue);
            }
            println!("mean\t-\t{:.6}\t{:.6}", d.mean_cosine, d.mean_min_eigenvalue);
            return Ok(());
        }
    };
    let (record, report) = run_stage(&cfg, stage)?;
    for (k, v) in &record.notes {
        println!("{k}: {v}");
    }
    if let Some(r) = report {
        println!("{} top-1 accuracy: {:.4}", r.model, r.accuracy);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
