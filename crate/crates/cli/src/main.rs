mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "occluder", version, about = "Occluder/occludee cluster detector: data, training, inference and evaluation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Named base configuration.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Occludee,
    Union,
    OccluderOnly,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic cluster scenes with a manifest and splits.
    Synth,
    /// Convert a VGG Image Annotator export into a manifest and splits.
    Ingest {
        #[arg(long)]
        vgg: PathBuf,
    },
    /// Write augmented copies of a manifest's images.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        /// Augmentation preset replacing the configured families.
        #[arg(long)]
        families: Option<String>,
    },
    /// Train a model; resumes when the run directory holds saved state.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run detection over a manifest and write a JSONL dump.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Score a dump against a manifest.
    Eval {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Model name in the summary row (default: dump file stem).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "final")]
        step: String,
    },
    /// Compare evaluated runs: table plus loss and PR plots.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth => commands::synth(g),
        Command::Ingest { vgg } => commands::ingest(g, &vgg),
        Command::Augment { manifest, copies, families } => commands::augment(g, &manifest, copies, families.as_deref()),
        Command::Train { manifest } => commands::train(g, &manifest),
        Command::Infer { checkpoint, manifest, mode } => commands::infer(g, &checkpoint, &manifest, mode),
        Command::Eval { dump, manifest, name, step } => commands::eval(g, &dump, &manifest, name, &step),
        Command::Report { runs } => commands::report(g, &runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
