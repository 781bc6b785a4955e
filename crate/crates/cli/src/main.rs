use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mc2_cli::commands::{self, Ctx};
use mc2_cli::{exit_code, parse_config};

/// Multi-concept guided sampling on a synthetic concept world.
#[derive(Debug, Parser)]
#[command(name = "mc2", version)]
struct Cli {
    /// Run configuration (TOML). Missing sections take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Validate and print the resolved configuration and plan, then stop.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Treat degenerate-input diagnostics as failures (exit 4).
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an adapter for one concept.
    TrainConcept {
        #[arg(long)]
        concept: Option<String>,
        /// Concept directory written by `make-dataset`; renders fresh
        /// samples when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Multi-concept generation with guidance.
    Generate,
    /// Adapter-free compositional generation.
    Compgen {
        #[arg(long)]
        prompt: Option<String>,
        /// Subject words; repeat for each subject.
        #[arg(long = "subject")]
        subjects: Vec<String>,
    },
    /// Subject masks from two maps, or from a generate run.
    Masks {
        /// Two maps (PGM or MCT1) to split.
        #[arg(long, num_args = 2, value_names = ["MAP1", "MAP2"])]
        maps: Vec<PathBuf>,
    },
    /// Per-token cross-attention maps on a noised render.
    InspectAttn {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Scene-suite metrics per ablation variant.
    Eval {
        /// Variants to run; repeat for several.
        #[arg(long = "variant")]
        variants: Vec<String>,
        /// Also run paired grounding trials.
        #[arg(long)]
        grounding: bool,
    },
    /// Finite-difference gradient and descent suites.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: u64,
    },
    /// Render concept datasets to disk.
    MakeDataset {
        #[arg(long)]
        concept: Option<String>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
    }
    if let Some(out) = cli.output {
        cfg.output = out;
    }
    match &cli.command {
        Command::Compgen { prompt, subjects } => {
            if let Some(p) = prompt {
                cfg.compgen.prompt = p.clone();
            }
            if !subjects.is_empty() {
                cfg.compgen.subjects = subjects.clone();
            }
        }
        Command::InspectAttn { prompt, timestep } => {
            if let Some(p) = prompt {
                cfg.inspect.prompt = p.clone();
            }
            if let Some(t) = timestep {
                cfg.inspect.timestep = *t;
            }
        }
        Command::MakeDataset { count: Some(n), .. } => cfg.dataset.count = *n,
        _ => {}
    }
    // flags may have broken an invariant the file satisfied
    cfg.validate()?;
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = Ctx {
        cfg,
        dry_run: cli.dry_run,
        strict: cli.strict,
    };
    match cli.command {
        Command::TrainConcept { concept, dataset } => {
            commands::train(&ctx, concept.as_deref(), dataset.as_deref())
        }
        Command::Generate => commands::generate(&ctx),
        Command::Compgen { .. } => commands::compgen(&ctx),
        Command::Masks { maps } => {
            let pair = match maps.as_slice() {
                [a, b] => Some((a.clone(), b.clone())),
                _ => None,
            };
            commands::masks(&ctx, pair)
        }
        Command::InspectAttn { .. } => commands::inspect_attn(&ctx),
        Command::Eval { variants, grounding } => commands::eval(&ctx, &variants, grounding),
        Command::Gradcheck { cases } => commands::gradcheck(&ctx, cases),
        Command::MakeDataset { concept, .. } => commands::make_dataset(&ctx, concept.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
