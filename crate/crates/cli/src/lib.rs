//! Command-line front end. [`run`] parses arguments, executes one job,
//! writes its CSV outputs plus `manifest.json` and `timings.json`, and
//! returns the process exit code.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical
//! failure, 4 I/O error. Failures also print one JSON line on stderr:
//! `{"error": "<kind>", "exit_code": <n>, "message": "..."}`.

pub mod args;
pub mod job;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;

use args::{Cli, Command, OUT_ENV};
use job::{Job, MeanfieldJob, ProbeJob, TrainJob, UnitCoeffsJob};
use output::Manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fisher_ngd::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use fisher_ngd::Error as E;
        match self {
            CliError::Usage(_) | CliError::Manifest(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::NonFinite(_) | E::SingularFisher { .. } | E::SingularDirection => 3,
                E::Io(_) => 4,
                _ => 2,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "numerical",
            4 => "io",
            _ => "config",
        }
    }
}

fn report(err: &CliError) -> i32 {
    let code = err.exit_code();
    let line = serde_json::json!({ "error": err.kind(), "exit_code": code, "message": err.to_string() });
    eprintln!("{line}");
    code
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("fisher-ngd-out"))
}

/// Parses `argv` (including the program name), runs the job and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            return report(&CliError::Usage(e.kind().to_string()));
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match with_threads(cli.threads, || dispatch(&cli, argv)) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => report(&e),
    }
}

fn with_threads<R>(threads: Option<usize>, f: impl FnOnce() -> Result<R, CliError> + Send) -> Result<R, CliError>
where
    R: Send,
{
    match threads {
        None => f(),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<PathBuf, CliError> {
    let (job, out, replayed_from) = match &cli.command {
        Command::Meanfield(a) => (Job::Meanfield(MeanfieldJob::resolve(a)?), None, None),
        Command::FisherProbe(a) => (Job::FisherProbe(ProbeJob::resolve(a)?), None, None),
        Command::Train(a) => (Job::Train(TrainJob::resolve(a)?), None, None),
        Command::UnitCoeffs(a) => (Job::UnitCoeffs(UnitCoeffsJob::resolve(a)?), None, None),
        Command::Replay(a) => {
            let previous = output::read_manifest(&a.manifest)?;
            let dir = a.manifest.parent().unwrap_or(Path::new(".")).join("replay");
            (previous.job, Some(dir), Some(a.manifest.display().to_string()))
        }
    };
    let out = cli.out.clone().or(out).unwrap_or_else(default_out);
    execute(job, &out, argv, replayed_from)
}

/// Runs `job` and writes its outputs into `out`. Returns the manifest path.
pub fn execute(job: Job, out: &Path, argv: Vec<String>, replayed_from: Option<String>) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        subcommand: job.name().to_string(),
        version: fisher_ngd::VERSION.to_string(),
        master_seed: job.master_seed(),
        argv,
        started_unix: output::unix_now(),
        finished_unix: 0.0,
        outputs: Vec::new(),
        replayed_from,
        job,
    };
    let artifacts = manifest.job.execute()?;
    output::write_run(out, manifest, &artifacts)
}
