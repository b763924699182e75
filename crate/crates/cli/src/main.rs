//! `freqchain` command-line driver.

mod args;
mod bench;
mod compile;
mod exit;
mod infer;
mod train;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use freqchain_core::format::ModelFile;
use freqchain_core::runtime::{InferenceSession, Real};
use serde::Serialize;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Compile(a) => compile::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Count(a) => compile::count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}

pub(crate) fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::read(path).with_context(|| format!("loading model {}", path.display()))
}

/// Compiled session for frequency models, dense session for checkpoints.
pub(crate) fn session_for<F: Real>(file: &ModelFile) -> Result<InferenceSession<F>> {
    Ok(match file {
        ModelFile::Spatial(m) => InferenceSession::dense(m)?,
        ModelFile::Freq(m) => InferenceSession::compiled(m)?,
    })
}

pub(crate) fn print_json_line<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}
