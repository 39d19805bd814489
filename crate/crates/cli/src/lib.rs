//! Command-line driver and HTTP service.

pub mod cli;
pub mod codebook;
pub mod commands;
pub mod config;
pub mod error;
pub mod images;
pub mod manifest;
pub mod service;

use std::ffi::OsString;

use clap::Parser;

use cli::{Cli, Command};
use commands::Ctx;
use convsplat_core::TrainConfig;
use error::CliError;
use manifest::{config_map, scrub_args, Manifest, Recorder, MANIFEST_FILE};

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Render(_) => "render",
        Command::Eval(_) => "eval",
        Command::Bench(_) => "bench",
        Command::Serve(_) => "serve",
        Command::ImportTeacher(_) => "import-teacher",
        Command::Export(_) => "export",
    }
}

fn execute(cli: Cli, args: &[String]) -> Result<(), CliError> {
    let common = &cli.common;
    let threads = common
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let mut overrides = Vec::new();
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
        overrides.extend(config::parse_toml(&text)?);
    }
    for o in &common.overrides {
        overrides.push(config::parse_override(o)?);
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = TrainConfig::desk();
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let name = command_name(&cli.command);
    let mut ctx = Ctx {
        out: common.out.clone(),
        config: cfg,
        overrides,
        rec: Recorder::default(),
    };
    log::info!(
        "{name}: threads={threads} config: {}",
        ctx.config
            .values()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if !matches!(cli.command, Command::Serve(_)) {
        std::fs::create_dir_all(&ctx.out)?;
    }
    let summary = match &cli.command {
        Command::Synth(a) => commands::synth(a, &mut ctx)?,
        Command::Train(a) => commands::train(a, &mut ctx)?,
        Command::Render(a) => commands::render(a, &mut ctx)?,
        Command::Eval(a) => commands::eval(a, &mut ctx)?,
        Command::Bench(a) => commands::bench(a, &mut ctx)?,
        Command::Serve(a) => commands::serve(a, &mut ctx)?,
        Command::ImportTeacher(a) => commands::import_teacher(a, &mut ctx)?,
        Command::Export(a) => commands::export(a, &mut ctx)?,
    };
    if matches!(cli.command, Command::Serve(_)) {
        return Ok(());
    }
    let (inputs, outputs) = ctx.rec.entries(&ctx.out)?;
    let m = Manifest {
        tool: "convsplat",
        version: env!("CARGO_PKG_VERSION"),
        command: name.into(),
        args: scrub_args(args),
        seed: ctx.config.seed,
        threads,
        config: config_map(&ctx.config),
        inputs,
        outputs,
        summary,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(ctx.out.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.common.log)
        .format_timestamp(None)
        .try_init();
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("convsplat: {e}");
            e.exit_code()
        }
    }
}
