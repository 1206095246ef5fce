mod error;
mod eval;
mod ingest;
mod oracle;
mod run;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use crate::error::CliResult;
use crate::run::{RunManifest, Workdir};

#[derive(Debug, Parser)]
#[command(name = "tempora", version, about = "Dynamic topic modelling with RNN-RSM")]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "TEMPORA_THREADS")]
    threads: Option<usize>,

    /// Where to write the run manifest. Defaults to `<output>.run.json`.
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read a corpus manifest and report per-slice counts.
    Ingest(ingest::IngestArgs),
    /// Train a model and write a checkpoint and a training log.
    Train(Box<train::TrainArgs>),
    /// Compute evaluation metrics from a checkpoint.
    Eval(eval::EvalArgs),
    /// Run exact gradient and normalization checks.
    Oracle(oracle::OracleArgs),
    /// Build a co-occurrence table for coherence scoring.
    Cooccurrence(eval::CooccurrenceArgs),
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Ingest(_) => "ingest".into(),
            Command::Train(_) => "train".into(),
            Command::Eval(e) => format!("eval {}", e.command.name()),
            Command::Oracle(_) => "oracle".into(),
            Command::Cooccurrence(_) => "cooccurrence".into(),
        }
    }

    fn primary_output(&self) -> Option<&Path> {
        match self {
            Command::Ingest(a) => a.out_dir.as_deref(),
            Command::Train(a) => Some(&a.out),
            Command::Eval(a) => a.command.output(),
            Command::Oracle(a) => a.report.as_deref(),
            Command::Cooccurrence(a) => Some(&a.out),
        }
    }

    fn run(&self, wd: &Workdir, manifest: &mut RunManifest) -> CliResult<()> {
        match self {
            Command::Ingest(a) => ingest::run(a, wd, manifest),
            Command::Train(a) => train::run(a, wd, manifest),
            Command::Eval(a) => eval::run(a, wd, manifest),
            Command::Oracle(a) => oracle::run(a, wd, manifest),
            Command::Cooccurrence(a) => eval::run_cooccurrence(a, wd, manifest),
        }
    }
}

fn manifest_path(cli: &Cli, wd: &Workdir) -> PathBuf {
    if let Some(p) = &cli.run_manifest {
        return wd.path(p);
    }
    match cli.command.primary_output() {
        Some(out) if out != Path::new("-") => run::manifest_beside(&wd.path(out)),
        _ => wd.path(Path::new(&format!(
            "tempora-{}.run.json",
            cli.command.name().replace(' ', "-")
        ))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();

    let threads = cli.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    if threads == 0 {
        error!("--threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        error!("cannot start the thread pool: {e}");
        return ExitCode::from(2);
    }

    let wd = Workdir(cli.workdir.clone());
    let mut manifest = RunManifest::start(&cli.command.name(), threads);
    let result = cli.command.run(&wd, &mut manifest);
    let status = match &result {
        Ok(()) => "ok".to_owned(),
        Err(e) => format!("error: {e}"),
    };
    let path = manifest_path(&cli, &wd);
    if let Err(e) = manifest.finish(&status, &path) {
        error!("cannot write run manifest {}: {e}", path.display());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
