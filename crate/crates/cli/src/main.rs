mod args;
mod commands;
mod output;

use std::process::ExitCode;

use anyhow::{Context, Result};
use chrono::Utc;
use clap::Parser;
use serde::Serialize;

use args::{Cli, Command};
use commands::{Output, SweepFailed};
use output::{manifest_path, timestamp, to_json, write_file, RunManifest};

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failures: Vec<FailedPoint>,
}

#[derive(Serialize)]
struct FailedPoint {
    s: f64,
    kind: &'static str,
    message: String,
}

fn report_error(err: &anyhow::Error) {
    let mut failures = Vec::new();
    let kind = if let Some(sweep) = err.downcast_ref::<SweepFailed>() {
        failures = sweep
            .failures
            .iter()
            .map(|(s, e)| FailedPoint {
                s: *s,
                kind: e.kind(),
                message: e.to_string(),
            })
            .collect();
        "sweep_failed"
    } else if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<jumpthermo::Error>()) {
        e.kind()
    } else if err.chain().any(|c| c.is::<std::io::Error>()) {
        "io"
    } else {
        "invalid_arguments"
    };
    let report = ErrorReport {
        error: ErrorBody {
            kind,
            message: format!("{err:#}"),
            failures,
        },
    };
    eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
}

fn dispatch(cli: &Cli, model: &jumpthermo::ModulatedFluorophore, config: &jumpthermo::ModelConfig) -> Result<Output> {
    match &cli.command {
        Command::Theta(a) => commands::theta(model, a),
        Command::FastLimit(a) => commands::fast_limit(model, a),
        Command::SlowLimit(a) => commands::slow_limit(model, config, a),
        Command::Distribution(a) => commands::distribution(model, config, a),
        Command::Counting(a) => commands::counting(model, a),
        Command::Simulate(a) => commands::simulate(model, a),
        Command::RateFunction(a) => commands::rate_function(model, a),
    }
}

fn parameters(cmd: &Command) -> serde_json::Value {
    let value = match cmd {
        Command::Theta(a) => serde_json::to_value(a),
        Command::FastLimit(a) => serde_json::to_value(a),
        Command::SlowLimit(a) => serde_json::to_value(a),
        Command::Distribution(a) => serde_json::to_value(a),
        Command::Counting(a) => serde_json::to_value(a),
        Command::Simulate(a) => serde_json::to_value(a),
        Command::RateFunction(a) => serde_json::to_value(a),
    };
    value.unwrap_or(serde_json::Value::Null)
}

fn emit(cli: &Cli, config: &jumpthermo::ModelConfig, out: &Output, started: chrono::DateTime<Utc>) -> Result<()> {
    let common = cli.command.common();
    match &common.out {
        Some(path) => {
            write_file(path, &out.data)?;
            let params = parameters(&cli.command);
            let manifest = RunManifest {
                command: cli.command.name(),
                config_path: common.config.display().to_string(),
                model: config,
                parameters: &params,
                seed: out.seed,
                version: env!("CARGO_PKG_VERSION"),
                started_at: timestamp(started),
                finished_at: timestamp(Utc::now()),
            };
            write_file(&manifest_path(path), &to_json(&manifest)?)?;
            if let Some(report) = &out.report {
                print!("{report}");
            }
        }
        None => print!("{}", out.report.as_ref().unwrap_or(&out.data)),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let started = Utc::now();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let path = &cli.command.common().config;
    let config = jumpthermo::ModelConfig::from_path(path).with_context(|| format!("reading config {}", path.display()))?;
    let model = config.build()?;
    match dispatch(cli, &model, &config) {
        Ok(out) => emit(cli, &config, &out, started),
        Err(err) => {
            // Keep the successful part of a sweep before reporting.
            if let Some(sweep) = err.downcast_ref::<SweepFailed>() {
                emit(cli, &config, &sweep.partial, started)?;
            }
            Err(err)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error(&anyhow::anyhow!(e.to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report_error(&err);
            ExitCode::FAILURE
        }
    }
}
