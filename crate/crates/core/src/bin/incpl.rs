use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use incpl::adaptation::{AdaptMode, AdaptationConfig, ContextConfig, StreamConfig};
use incpl::backbone::BackendConfig;
use incpl::context::{LabelMode, StrategyKind};
use incpl::harness::matrix::{run_matrix, MatrixAxis};
use incpl::harness::report::emit_report;
use incpl::harness::{
    self, BackendKind, DataSource, ReportFormat, RunConfig, RunReport, SyntheticTaskSpec,
};
use incpl::objective::Objective;
use incpl::prompts::{PromptConfig, PromptVariant, DEFAULT_TEMPLATE};
use incpl::{Error, Result};

/// (classes, samples per class) of the default synthetic task.
const TASK_SHAPE: (usize, usize) = (8, 25);
const MATRIX_TASK_SHAPE: (usize, usize) = (20, 10);

#[derive(Parser)]
#[command(
    name = "incpl",
    version,
    about = "Test-time in-context prompt learning on a frozen dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt over one test stream and write a JSON report.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Run ablation axes and write per-cell reports plus summary.csv.
    Matrix {
        #[command(flatten)]
        run: RunArgs,
        /// Axis to run (repeatable): objective, mode, n_context, label_mode, strategy, variant. Default: all.
        #[arg(long = "axis")]
        axes: Vec<String>,
        /// Seeds for the seeded axes.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "matrix")]
        out: PathBuf,
    },
    /// Generate a synthetic task as PNGs plus labeled.jsonl and test.jsonl.
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        backend_config: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Re-emit, verify or reproduce saved reports.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "json")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-run each report from its config echo and compare digests.
        #[arg(long)]
        reproduce: bool,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Default 8, or 20 for `matrix` so the example-count sweep fits.
    #[arg(long)]
    n_classes: Option<usize>,
    /// Default 25, or 10 for `matrix`.
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    separation: f64,
    #[arg(long, default_value_t = 0.35)]
    noise: f64,
    #[arg(long, default_value_t = 0.15)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl SynthArgs {
    fn spec(&self, template: &str, defaults: (usize, usize)) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_classes: self.n_classes.unwrap_or(defaults.0),
            samples_per_class: self.samples_per_class.unwrap_or(defaults.1),
            cluster_separation: self.separation,
            noise_scale: self.noise,
            domain_shift: self.shift,
            template: template.to_string(),
            seed: self.synth_seed,
            ..SyntheticTaskSpec::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long)]
    backend_config: Option<PathBuf>,
    /// Test manifest (JSON lines). Without it a synthetic task is generated.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Labeled-pool manifest; required with --dataset.
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    #[arg(long, default_value_t = 5)]
    n_context: usize,
    #[arg(long, default_value_t = 0.4)]
    lambda: f64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value = "cyclic")]
    mode: String,
    #[arg(long, default_value_t = 1)]
    visual_steps: usize,
    #[arg(long, default_value = "random")]
    strategy: String,
    #[arg(long, default_value = "gold")]
    label_mode: String,
    #[arg(long, default_value = "context-aware")]
    objective: String,
    #[arg(long, default_value = "language-aware")]
    variant: String,
    #[arg(long, default_value = DEFAULT_TEMPLATE)]
    template: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    prompt_seed: u64,
    /// Permit label modes that read the test label.
    #[arg(long)]
    ablation: bool,
    #[command(flatten)]
    synth: SynthArgs,
}

impl RunArgs {
    fn config(&self, synth_defaults: (usize, usize)) -> Result<RunConfig> {
        let backend_config = match &self.backend_config {
            Some(p) => BackendConfig::load(p)?,
            None => BackendConfig::default(),
        };
        let data = match (&self.dataset, &self.labeled) {
            (Some(test), Some(labeled)) => DataSource::Manifests {
                test: test.clone(),
                labeled: labeled.clone(),
            },
            (None, None) => DataSource::Synthetic(self.synth.spec(&self.template, synth_defaults)),
            _ => {
                return Err(Error::Config(
                    "--dataset and --labeled must be given together".into(),
                ))
            }
        };
        Ok(RunConfig {
            backend: self.backend.parse::<BackendKind>()?,
            backend_config,
            data,
            pool_seed: self.pool_seed,
            stream: StreamConfig {
                adaptation: AdaptationConfig {
                    mode: self.mode.parse::<AdaptMode>()?,
                    objective: self.objective.parse::<Objective>()?,
                    lambda: self.lambda,
                    lr: self.lr,
                    visual_steps: self.visual_steps,
                    seed: self.seed,
                    ..AdaptationConfig::default()
                },
                prompt: PromptConfig {
                    template: self.template.clone(),
                    variant: self.variant.parse::<PromptVariant>()?,
                    seed: self.prompt_seed,
                    ..PromptConfig::default()
                },
                context: ContextConfig {
                    n_context: self.n_context,
                    strategy: self.strategy.parse::<StrategyKind>()?,
                    label_mode: self.label_mode.parse::<LabelMode>()?,
                    ablation: self.ablation,
                },
            },
        })
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { run, out } => {
            let report = harness::run(&run.config(TASK_SHAPE)?)?;
            report.write_json(&out)?;
            let b = &report.body;
            println!(
                "{}/{} correct ({}) digest {} -> {}",
                b.correct,
                b.total,
                harness::report::display_accuracy(b.correct, b.total),
                report.digest,
                out.display()
            );
        }
        Command::Matrix {
            run,
            axes,
            seeds,
            out,
        } => {
            let base = run.config(MATRIX_TASK_SHAPE)?;
            let axes = if axes.is_empty() {
                MatrixAxis::all(seeds)
            } else {
                axes.iter()
                    .map(|a| MatrixAxis::from_name(a, seeds))
                    .collect::<Result<_>>()?
            };
            let outcome = run_matrix(&base, &axes)?;
            outcome.write(&out)?;
            for c in &outcome.cells {
                match &c.outcome {
                    Ok(r) => println!(
                        "{:<32} {}",
                        c.key,
                        harness::report::display_accuracy(r.body.correct, r.body.total)
                    ),
                    Err(e) => println!("{:<32} failed: {e}", c.key),
                }
            }
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.join("summary.csv").display());
        }
        Command::Synth {
            synth,
            backend_config,
            out,
        } => {
            let cfg = match backend_config {
                Some(p) => BackendConfig::load(&p)?,
                None => BackendConfig::default(),
            };
            let backend = incpl::backbone::ToyBackend::new(cfg)?;
            let task =
                harness::generate_synthetic(&backend, &synth.spec(DEFAULT_TEMPLATE, TASK_SHAPE))?;
            task.write(&out)?;
            println!(
                "{} labeled, {} test, zero-shot {:.4} (seed {}) -> {}",
                task.labeled.len(),
                task.test.len(),
                task.zero_shot_accuracy,
                task.seed_used,
                out.display()
            );
        }
        Command::Report {
            inputs,
            format,
            out,
            reproduce,
        } => {
            let format: ReportFormat = format.parse()?;
            let mut reports = Vec::with_capacity(inputs.len());
            for path in &inputs {
                let report = RunReport::read(path)?;
                if !report.verify() {
                    return Err(Error::Config(format!(
                        "{}: digest does not match contents",
                        path.display()
                    )));
                }
                if reproduce {
                    let again = harness::reproduce(&report)?;
                    let same = again.digest == report.digest;
                    println!(
                        "{}: {}",
                        path.display(),
                        if same { "reproduced" } else { "MISMATCH" }
                    );
                    if !same {
                        return Err(Error::Numerical {
                            sample: path.display().to_string(),
                            reason: "re-run digest differs".into(),
                        });
                    }
                }
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("report")
                    .to_string();
                reports.push((name, report));
            }
            if let Some(dir) = out {
                for p in emit_report(&reports, format, &dir)? {
                    println!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
