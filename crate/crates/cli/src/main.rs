use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nlconv::config::{Mode, RunConfig};
use nlconv::pipeline;

/// Solve a system of nonlinear singular convolution equations on the real
/// line by monotone successive approximations.
#[derive(Debug, Parser)]
#[command(name = "nlconv", version)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the mode in the config.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Overrides `output.dir` in the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Only errors on stderr.
    #[arg(long)]
    quiet: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: nlconv::config::ConfigError| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let mut cfg = match RunConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
        if let Err(e) = cfg.check() {
            log::error!("{e}");
            return ExitCode::from(1);
        }
    }
    let out_dir = args.out_dir.unwrap_or_else(|| cfg.output.dir.clone());
    let code = pipeline::run(&cfg, &out_dir);
    ExitCode::from(code as u8)
}
