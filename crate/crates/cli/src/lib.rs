//! Command-line driver: reads a [`RunConfig`], runs one subcommand, writes
//! JSON/CSV artifacts and a report, and maps the outcome to an exit code.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use serde_json::json;
use thiserror::Error;

pub use config::RunConfig;
pub use foliage_core::expr::Expr;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

pub const ENV_OUT: &str = "FOLIAGE_OUT";
pub const ENV_THREADS: &str = "FOLIAGE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Input(_) => "input",
            CliError::Usage(_) => "usage",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Triangulate,
    Jiggle,
    Genpos,
    CivilizeCheck,
    Flatten,
    Fill,
    FillVerify,
    Homotopy,
    Glue,
    IdentityVerify,
    Subdivide,
    Trace,
    Report,
}

impl Command {
    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "foliage", about = "Construct and certify foliations from a JSON run configuration")]
pub struct Args {
    pub command: Command,
    /// Run configuration (JSON).
    pub config: PathBuf,
    /// Output directory; overrides FOLIAGE_OUT and the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn out_dir(args: &Args, cfg: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(ENV_OUT).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("foliage-out"))
}

fn configure_threads() -> Result<(), CliError> {
    if let Some(v) = std::env::var_os(ENV_THREADS) {
        let n: usize = v
            .to_string_lossy()
            .parse()
            .map_err(|_| CliError::Config(format!("{ENV_THREADS} must be a positive integer")))?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

/// Runs one command and returns `(pass, report path)`.
pub fn execute(args: &Args) -> Result<(bool, PathBuf), CliError> {
    configure_threads()?;
    let cfg = RunConfig::load(&args.config)?;
    let mut out = output::OutDir::create(&out_dir(args, &cfg))?;
    let o = match args.command {
        Command::Triangulate => commands::triangulate(&cfg, &mut out),
        Command::Jiggle => commands::jiggle_cmd(&cfg, &mut out),
        Command::Genpos => commands::genpos(&cfg, &mut out),
        Command::CivilizeCheck => commands::civilize_check(&cfg, &mut out),
        Command::Flatten => commands::flatten(&cfg, &mut out),
        Command::Fill => commands::fill(&cfg, &mut out),
        Command::FillVerify => commands::fill_verify(&cfg, &mut out),
        Command::Homotopy => commands::homotopy(&cfg, &mut out),
        Command::Glue => commands::glue(&cfg, &mut out),
        Command::IdentityVerify => commands::identity_verify(&cfg, &mut out),
        Command::Subdivide => commands::subdivide(&cfg, &mut out),
        Command::Trace => commands::trace(&cfg, &mut out),
        Command::Report => commands::report(&cfg, &mut out),
    }?;
    let name = args.command.name();
    let report = json!({
        "command": name,
        "config_hash": cfg.hash(),
        "config": cfg,
        "defaults": {
            "n": cfg.n,
            "k": cfg.k(),
            "domain": cfg.domain(),
            "k_region": cfg.k_region(),
            "lattice_box": cfg.lattice_box(),
            "jiggle": cfg.jiggle_params(),
            "filling": cfg.form_spec(),
            "float_digits": output::DIGITS,
        },
        "tolerances": cfg.tolerances,
        "grids": cfg.grids,
        "pass": o.pass,
        "result": o.result,
        "artifacts": out.written,
    });
    let file = format!("{name}.json");
    out.json(&file, &report)?;
    Ok((o.pass, out.path.join(file)))
}

/// Machine-readable error object written to stderr.
pub fn error_json(e: &CliError) -> String {
    output::to_json(&json!({"error": e.kind(), "message": e.to_string()}))
}

pub fn run(argv: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_PASS;
        }
        Err(e) => {
            eprint!("{}", error_json(&CliError::Usage(e.to_string())));
            return EXIT_ERROR;
        }
    };
    match execute(&args) {
        Ok((pass, path)) => {
            println!("{}", path.display());
            if pass {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprint!("{}", error_json(&e));
            EXIT_ERROR
        }
    }
}
