use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nls_core::cli_io::{parse_config, run};
use nls_core::{NlsError, Result};

/// Principal spectrum points of time-periodic nonlocal dispersal operators.
#[derive(Parser, Debug)]
#[command(name = "nls", version)]
struct Args {
    /// spectrum, existence, approx, certify, sweep-rate, sweep-range,
    /// sweep-freq, local-eigen, zika, stemcell or convergence
    command: String,
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `output.dir` from the config, else `.`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    workers: Option<usize>,
}

fn load(args: &Args) -> Result<nls_core::cli_io::RunConfig> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| NlsError::invalid("config must be a JSON object"))?;
    match obj.get("command") {
        None => {
            obj.insert("command".into(), args.command.clone().into());
        }
        Some(c) if c.as_str() == Some(args.command.as_str()) => {}
        Some(c) => {
            return Err(NlsError::invalid(format!(
                "command `{}` does not match the config's command {c}",
                args.command
            )))
        }
    }
    let mut cfg = parse_config(&doc.to_string())?;
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    match run(&cfg, &out) {
        Ok(o) => {
            if o.status != 0 {
                eprintln!(
                    "{}: check failed; see {}",
                    cfg.command.name(),
                    out.join("results.json").display()
                );
            }
            ExitCode::from(o.status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
