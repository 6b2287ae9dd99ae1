//! `slabscat <subcommand> --config <path> [--orders] [--threads N] [--seed S] [--out DIR]`
//!
//! Exit status: 0 on success, 2 on a certified refusal (resonance, or an
//! optimization aborted by its certificate), 1 on any other error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;
use sha2::{Digest, Sha256};

use commands::{Command, Output};

#[derive(Debug, Parser)]
#[command(name = "slabscat", version, about = "Scattering, sensitivities and guided modes of periodic slabs")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Append per-order amplitudes / gradients to the outputs.
    #[arg(long)]
    orders: bool,
    #[arg(long, env = "SLABSCAT_THREADS")]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `output.directory`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    ExitCode::from(run(&cli))
}

fn run(cli: &Cli) -> u8 {
    let start = Instant::now();
    let hash = std::fs::read(&cli.config)
        .map(|b| format!("{:x}", Sha256::digest(&b)))
        .unwrap_or_default();
    let mut prov = json!({
        "tool": "slabscat",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cli.command.name(),
        "config": cli.config.display().to_string(),
        "config_sha256": hash,
    });

    let cfg = match config::parse_config(&cli.config) {
        Ok(mut c) => {
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c.orders |= cli.orders;
            c
        }
        Err(errs) => {
            eprintln!("invalid configuration {}:", cli.config.display());
            for e in &errs {
                eprintln!("  {e}");
            }
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            prov["status"] = json!("invalid_config");
            prov["errors"] = json!(errs);
            finish(&dir, prov, start, 1);
            return 1;
        }
    };
    for w in &cfg.warnings {
        log::warn!("{w}");
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    if let Some(n) = cli.threads.or(cfg.solver.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    prov["seed"] = json!(cfg.seed);
    prov["threads"] = json!(rayon::current_num_threads());
    prov["warnings"] = json!(cfg.warnings);

    let mut out = Output::new(&dir);
    let result = commands::dispatch(cli.command, &cfg, &mut out);
    let report = out.report;
    let code = match (&result, &report.refusal) {
        (Err(e), _) => {
            eprintln!("error: {e}");
            prov["status"] = json!("error");
            prov["error"] = json!(e.to_string());
            1
        }
        (Ok(()), Some(r)) => {
            eprintln!("refused: {r}");
            prov["status"] = json!("refused");
            prov["refusal"] = json!(r);
            2
        }
        (Ok(()), None) => {
            prov["status"] = json!("ok");
            0
        }
    };
    let max_defect = report.balance_defects.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    prov["balance_defects"] = json!(report.balance_defects);
    prov["balance_defect_max"] = json!(max_defect);
    prov["artifacts"] = json!(report.artifacts);
    prov["summary"] = serde_json::Value::Object(report.summary);
    finish(&dir, prov, start, code)
}

fn finish(dir: &Path, mut prov: serde_json::Value, start: Instant, code: u8) -> u8 {
    prov["exit_code"] = json!(code);
    prov["wall_time_s"] = json!(start.elapsed().as_secs_f64());
    let text = serde_json::to_string_pretty(&prov).unwrap_or_default() + "\n";
    if let Err(e) = slabscat::io::write_text(&dir.join("run.json"), &text) {
        eprintln!("cannot write run.json: {e}");
        return 1;
    }
    code
}
