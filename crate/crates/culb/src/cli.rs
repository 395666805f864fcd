use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use culb_core::addons::{AddonConfig, AddonKind};
use culb_core::unlearning::Strategy;

use crate::error::{CliError, Result, EXIT_VALIDATION};
use crate::io::write_atomic;
use crate::labeler::ParallelLabeler;
use crate::pipeline::{report, Experiment};

#[derive(Debug, Parser)]
#[command(name = "culb", version, about = "Continual-unlearning laboratory for a toy text-conditioned diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Sequential,
    Simultaneous,
    Independent,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Sequential => Strategy::Sequential,
            StrategyArg::Simultaneous => Strategy::Simultaneous,
            StrategyArg::Independent => Strategy::Independent,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the concept world and its classifiers.
    GenWorld(ConfigArgs),
    /// Train the base model and check the generation gate.
    TrainBase(ConfigArgs),
    /// Run an unlearning benchmark.
    Unlearn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Comma-separated add-ons (l1, l2, selft, merge, gradproj) or "none".
        #[arg(long)]
        addons: Option<String>,
    },
    /// Diagnostic studies.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Compare runs by harmonic mean.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Aggregate runs produced by different configs.
        #[arg(long)]
        force: bool,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeKind {
    /// Smoothness constant of the retention loss.
    Smoothness {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to perturb; the base model by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Taylor-bound diagnostics over a run's checkpoints.
    Taylor {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run: PathBuf,
    },
    /// Similarity against retention after unlearning one concept.
    Similarity {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        addons: Option<String>,
    },
    /// Similarity against key/value shift between two checkpoints.
    Kvshift {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        target: usize,
    },
}

pub fn parse_addons(s: &str, base: &AddonConfig) -> Result<AddonConfig> {
    let mut kinds = Vec::new();
    if s.trim() != "none" {
        for part in s.split(',') {
            let k = AddonKind::parse(part.trim())
                .ok_or_else(|| CliError::Invalid(format!("unknown add-on {part:?}")))?;
            kinds.push(k);
        }
    }
    let mut out = base.clone();
    out.kinds = AddonConfig::with_kinds(&kinds).kinds;
    Ok(out)
}

fn experiment(a: &ConfigArgs) -> Result<Experiment> {
    let e = Experiment::load(&a.config)?;
    Ok(match &a.out_dir {
        Some(d) => e.with_root(d),
        None => e,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld(a) => {
            let e = experiment(&a)?;
            let (world, _) = e.gen_world()?;
            println!("world {} -> {}", world.digest(), e.world_path().display());
        }
        Command::TrainBase(a) => {
            let e = experiment(&a)?;
            let (_, gate) = e.train_base()?;
            println!(
                "gate passed: style {:.4}, object {:.4} (worst pair {:.4} / {:.4}) -> {}",
                gate.style_accuracy,
                gate.object_accuracy,
                gate.worst_pair_style,
                gate.worst_pair_object,
                e.base_path().display()
            );
        }
        Command::Unlearn { cfg, strategy, addons } => {
            let e = experiment(&cfg)?;
            let strategy = strategy.map(Strategy::from).unwrap_or(e.config.unlearn.strategy);
            let addons = match addons {
                Some(s) => parse_addons(&s, &e.config.addons)?,
                None => e.config.addons.clone(),
            };
            let labeler = ParallelLabeler::from_env()?;
            let (dir, log) = e.unlearn(strategy, &addons, &labeler)?;
            for r in &log.records {
                println!(
                    "n={} UA={:.3} RA-I={:.3} RA-C={:.3} HM={:.3} drift={:.4} steps={}",
                    r.n, r.ua, r.ra_i, r.ra_c, r.hm, r.drift_total, r.optimizer_steps_cumulative
                );
            }
            println!("-> {}", dir.display());
        }
        Command::Analyze { kind } => analyze(kind)?,
        Command::Report { runs, force, out } => {
            let r = report(&runs, force)?;
            let csv = r.to_csv()?;
            print!("{}", String::from_utf8_lossy(&csv));
            if let Some(p) = out {
                write_atomic(&p, &csv)?;
            }
        }
    }
    Ok(())
}

fn analyze(kind: AnalyzeKind) -> Result<()> {
    match kind {
        AnalyzeKind::Smoothness { cfg, checkpoint } => {
            let e = experiment(&cfg)?;
            let t = e.smoothness(checkpoint.as_deref())?;
            for r in &t.rows {
                println!("sigma={} M={:.4} ± {:.4}{}", r.noise_scale, r.m_mean, r.m_std, if r.flagged { " (flagged)" } else { "" });
            }
        }
        AnalyzeKind::Taylor { cfg, run } => {
            let e = experiment(&cfg)?;
            let t = e.taylor(&run)?;
            for c in &t.checkpoints {
                println!(
                    "n={} |dL|={:.5} bound={:.5} |delta|={:.4}{}",
                    c.n,
                    c.record.delta_loss_abs,
                    c.record.bound,
                    c.record.delta_norm,
                    if c.record.violated { " violated" } else { "" }
                );
            }
            println!("spearman(|delta|, |dL|) = {:.4}", t.spearman_delta_vs_loss);
            println!(
                "sigma={} perturbation: |dL|={:.3e} bound={:.3e}{}",
                t.perturbation_scale,
                t.perturbation_case.delta_loss_abs,
                t.perturbation_case.bound,
                if t.perturbation_case.violated { " violated" } else { "" }
            );
        }
        AnalyzeKind::Similarity { cfg, target, addons } => {
            let e = experiment(&cfg)?;
            let addons = match addons {
                Some(s) => parse_addons(&s, &e.config.addons)?,
                None => AddonConfig::default(),
            };
            addons.validate(Strategy::Sequential)?;
            let labeler = ParallelLabeler::from_env()?;
            let s = e.similarity(target, &addons, &labeler)?;
            print_correlation(&s.report);
        }
        AnalyzeKind::Kvshift { cfg, before, after, target } => {
            let e = experiment(&cfg)?;
            let r = e.kv_shift(&before, &after, target)?;
            print_correlation(&r);
        }
    }
    Ok(())
}

fn print_correlation(r: &culb_core::analysis::CorrelationReport) {
    println!(
        "n={} pearson={:.4} spearman={:.4}{}",
        r.n,
        r.pearson,
        r.spearman,
        if r.flat { " (flat data)" } else { "" }
    );
}

/// Parse arguments, run, and map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
