use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlmjoint::decoding::PolicyKind;
use dlmjoint::workbench::pipeline::{read_manifest, replay, version_string, Manifest};
use dlmjoint::workbench::{load_config, ExperimentConfig, Pipeline, Stage};
use dlmjoint::{Error, Result};

#[derive(Parser)]
#[command(name = "dlmjoint", version = env!("CARGO_PKG_VERSION"), about = "Masked-diffusion joint-sampling workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic source and draw the training corpus.
    GenData(Overrides),
    /// Train the base denoiser on the corpus.
    TrainBase(Overrides),
    /// Decode base trajectories and cut them into sampler training examples.
    Harvest(Overrides),
    /// Train the joint sampler against the frozen base.
    TrainSampler(Overrides),
    /// Decode traces for every grid point.
    Sample(Overrides),
    /// Compute TV, NLL and KL@k metrics.
    Evaluate(Overrides),
    /// Count forwards and time decoding.
    Benchmark(Overrides),
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Skip stages whose manifest matches the config and files on disk.
        #[arg(long)]
        resume: bool,
    },
    /// Rerun the stages recorded in a manifest and compare output checksums.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the rerun; defaults to `<run>/replay`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a preset configuration as TOML.
    ShowConfig {
        #[arg(long, value_enum, default_value = "desk-dream")]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    DeskDream,
    TwoSentence,
}

#[derive(Args)]
struct Overrides {
    /// TOML experiment file; the desk-dream preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tokens per macro-step; repeat to build a grid.
    #[arg(long)]
    k: Vec<usize>,
    #[arg(long)]
    temperature: Vec<f64>,
    /// least_entropy, highest_confidence, left_to_right or random.
    #[arg(long)]
    policy: Vec<String>,
    /// Clamp sampler rows to the base support.
    #[arg(long)]
    clamp: bool,
}

impl Overrides {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::desk_dream(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if !self.k.is_empty() {
            cfg.sampling.k_grid = self.k.clone();
        }
        if !self.temperature.is_empty() {
            cfg.sampling.temperatures = self.temperature.clone();
        }
        if !self.policy.is_empty() {
            cfg.sampling.policies = self
                .policy
                .iter()
                .map(|p| p.parse::<PolicyKind>())
                .collect::<Result<_>>()?;
        }
        if self.clamp {
            cfg.sampling.clamp = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(m: &Manifest, root: &std::path::Path) {
    println!("{} done ({})", m.stage.name(), root.display());
    for path in m.outputs.keys().chain(&m.unverified) {
        println!("  {path}");
    }
}

fn run_stage(o: &Overrides, stage: Stage) -> Result<()> {
    let p = Pipeline::new(o.config()?)?;
    let m = p.run(stage)?;
    report(&m, p.root());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(o) => run_stage(&o, Stage::GenData),
        Command::TrainBase(o) => run_stage(&o, Stage::TrainBase),
        Command::Harvest(o) => run_stage(&o, Stage::Harvest),
        Command::TrainSampler(o) => run_stage(&o, Stage::TrainSampler),
        Command::Sample(o) => run_stage(&o, Stage::Sample),
        Command::Evaluate(o) => run_stage(&o, Stage::Evaluate),
        Command::Benchmark(o) => run_stage(&o, Stage::Benchmark),
        Command::Run { overrides, resume } => {
            let p = Pipeline::new(overrides.config()?)?;
            for stage in Stage::ALL {
                if resume {
                    let (m, ran) = p.ensure(stage)?;
                    if ran {
                        report(&m, p.root());
                    } else {
                        println!("{} up to date", stage.name());
                    }
                } else {
                    report(&p.run(stage)?, p.root());
                }
            }
            Ok(())
        }
        Command::Replay { manifest, out } => {
            let m = read_manifest(&manifest)?;
            let out = match out {
                Some(o) => o,
                None => manifest
                    .parent()
                    .and_then(|d| d.parent())
                    .ok_or_else(|| Error::InvalidArgument("cannot derive a replay directory".into()))?
                    .join("replay"),
            };
            if m.version != version_string() {
                eprintln!("warning: manifest written by {}, replaying with {}", m.version, version_string());
            }
            let again = replay(&m, &out)?;
            println!(
                "replay of {} matched {} outputs ({})",
                again.stage.name(),
                m.outputs.len(),
                out.display()
            );
            Ok(())
        }
        Command::ShowConfig { preset } => {
            let cfg = match preset {
                Preset::DeskDream => ExperimentConfig::desk_dream(),
                Preset::TwoSentence => ExperimentConfig::two_sentence(),
            };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: category={} {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
