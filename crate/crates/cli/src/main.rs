use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rebq::bench::{synth_generate, MissingCase};
use rebq::eval::{
    emit_report, load_report, obtain_backbone, run_experiment_with, run_sweep, verify_report, RunConfig, RunOptions,
    SweepConfig,
};
use rebq::pipeline::VariantSpec;

const OUTPUT_ROOT_ENV: &str = "REBQ_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "rebq", version, about = "Continual missing-modality learning with reconstructed queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze a backbone, then save it.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (defaults to the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        multi_label: bool,
    },
    /// Run one continual experiment and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory (overrides the config and the output root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from an experiment checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a grid of experiments.
    Sweep {
        /// Sweep JSON file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run grid points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Print and verify a report.
    Report {
        /// A report.json or a directory containing one.
        path: PathBuf,
    },
    /// Print the default run configuration as JSON.
    Config,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; defaults to the built-in desk benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; replaces every seed stream of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Overrides {
    /// Variant preset (rebq, no_reconstruction, no_modality_specific_query,
    /// no_memory_pool, unified_pool, naive).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    /// Missing case: text_missing, image_missing or both_missing.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    export_queries: bool,
    #[arg(long)]
    checkpoint_sessions: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c = c.with_root_seed(s);
        }
        Ok(c)
    }
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        if let Some(v) = &self.variant {
            c.variant = VariantSpec::preset(v)?;
            c.name = v.clone();
        }
        if let Some(e) = self.eta {
            c.stream.eta = e;
        }
        if let Some(case) = &self.case {
            c.stream.case = serde_json::from_value::<MissingCase>(serde_json::Value::String(case.clone()))
                .with_context(|| format!("unknown missing case `{case}`"))?;
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            c.train.optimizer.lr = lr;
        }
        if let Some(k) = self.pool_size {
            c.prompt.pool_size = k;
            c.prompt.memory_pool_size = k;
        }
        if let Some(b) = &self.backbone {
            c.backbone.checkpoint = Some(b.clone());
        }
        c.export_queries |= self.export_queries;
        c.checkpoint_sessions |= self.checkpoint_sessions;
        c.validate()?;
        Ok(())
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Flag, then config (relative to the output root), then `<root>/<name>`.
fn resolve_out(flag: Option<&Path>, configured: Option<&Path>, name: &str) -> PathBuf {
    match (flag, configured) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(c)) if c.is_absolute() => c.to_path_buf(),
        (None, Some(c)) => output_root().join(c),
        (None, None) => output_root().join(name),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { common, out } => {
            let mut c = common.load()?;
            let path = out
                .or_else(|| c.backbone.checkpoint.clone())
                .unwrap_or_else(|| output_root().join("backbone.json"));
            if path.exists() {
                bail!("{} already exists", path.display());
            }
            c.backbone.checkpoint = Some(path.clone());
            let (_, report) = obtain_backbone(&c)?;
            let acc = report.map_or(f64::NAN, |r| r.holdout_accuracy);
            println!("saved backbone to {} (held-out accuracy {acc:.3})", path.display());
        }
        Command::GenData {
            common,
            out,
            classes,
            samples_per_class,
            multi_label,
        } => {
            let c = common.load()?;
            let synth = rebq::bench::SynthConfig {
                multi_label: multi_label || c.data.synth.multi_label,
                ..c.data.synth
            };
            let corpus = synth_generate(
                classes.unwrap_or(c.data.num_classes),
                samples_per_class.unwrap_or(c.data.samples_per_class),
                &synth,
                c.seeds.corpus,
            )?
            .into_corpus();
            corpus.write(&out)?;
            println!("wrote {} samples to {}", corpus.samples.len(), out.display());
        }
        Command::Run {
            common,
            overrides,
            out,
            resume,
        } => {
            let mut c = common.load()?;
            overrides.apply(&mut c)?;
            let dir = resolve_out(out.as_deref(), c.output_dir.as_deref(), &c.name);
            let outcome = run_experiment_with(
                &c,
                RunOptions {
                    output_dir: Some(dir.clone()),
                    resume_from: resume,
                    collect_queries: c.export_queries,
                    ..RunOptions::default()
                },
            )?;
            let files = emit_report(&outcome.report, &dir, outcome.queries.as_deref())?;
            let r = &outcome.report;
            println!(
                "{}: AP {:.4}  FG {}  ({:.1}s) -> {}",
                c.name,
                r.ap,
                r.fg.map_or("n/a".into(), |f| format!("{f:.4}")),
                r.wall_clock_seconds,
                files.report.display()
            );
        }
        Command::Sweep { config, out, parallel } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let sweep: SweepConfig = serde_json::from_str(&text)?;
            let dir = resolve_out(out.as_deref(), None, "sweep");
            let rows = run_sweep(&sweep, &dir, parallel)?;
            for r in rows {
                println!(
                    "{} {:<28} eta {:>5} lambda {:<6} K {:<4} AP {:.4} FG {}",
                    r.run,
                    r.point.variant,
                    r.point.eta,
                    r.point.lambda,
                    r.point.pool_size,
                    r.ap,
                    r.fg.map_or("n/a".into(), |f| format!("{f:.4}"))
                );
            }
        }
        Command::Report { path } => {
            let path = if path.is_dir() { path.join(rebq::eval::REPORT_FILE) } else { path };
            let r = load_report(&path)?;
            verify_report(&r, 1e-12)?;
            println!("{} ({} sessions, {:?})", r.config.name, r.matrix.sessions(), r.mode);
            for i in 0..r.matrix.sessions() {
                let row: Vec<String> = (0..r.matrix.sessions())
                    .map(|j| r.matrix.get(i, j).map_or("   -  ".into(), |v| format!("{v:.4}")))
                    .collect();
                println!("  {}", row.join(" "));
            }
            println!("AP {:.4}  FG {}", r.ap, r.fg.map_or("n/a".into(), |f| format!("{f:.4}")));
            if let Some(q) = r.reconstruction {
                println!(
                    "reconstruction cosine: trained {:.4}, untrained {:.4}, raw {:.4}",
                    q.trained.reconstructed, q.untrained.reconstructed, q.trained.unreconstructed
                );
            }
        }
        Command::Config => println!("{}", RunConfig::default().to_json()?),
    }
    Ok(())
}
