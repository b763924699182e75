//! `freqchain compile` and `freqchain count`.

use anyhow::{Context, Result};
use freqchain_core::bench::multiply_ratio;
use freqchain_core::compile::{compile_model, count_params, full_shapes, kept_shapes, CompileMode, CountMultiplies, MultiplyCount};
use freqchain_core::format::ModelFile;
use serde::Serialize;

use crate::args::{CompileArgs, CountArgs};
use crate::{load_model, print_json_line};

/// Counts printed after compiling; multiplies are per input row.
#[derive(Debug, Serialize)]
struct CompileSummary {
    mode: CompileMode,
    input_dim: usize,
    output_dim: usize,
    provenance: String,
    params_full: u64,
    params_kept: u64,
    dense_multiplies: MultiplyCount,
    compiled_multiplies: MultiplyCount,
    speedup_multiply: f64,
    speedup_multiply_layers: f64,
}

pub fn run(args: &CompileArgs) -> Result<()> {
    let model = match load_model(&args.input)? {
        ModelFile::Spatial(m) => m,
        ModelFile::Freq(_) => return Err(crate::exit::usage(format!("{} is already compiled", args.input.display()))),
    };
    let mode: CompileMode = args.mode.into();
    let compiled = compile_model(&model, mode).with_context(|| format!("compiling in {mode} mode"))?;
    let dense = model.count_multiplies(1);
    let freq = compiled.count_multiplies(1);
    let summary = CompileSummary {
        mode,
        input_dim: compiled.input_dim(),
        output_dim: compiled.output_dim(),
        provenance: compiled.provenance().to_owned(),
        params_full: count_params(&full_shapes(&model)),
        params_kept: count_params(&kept_shapes(&model)),
        dense_multiplies: dense,
        compiled_multiplies: freq,
        speedup_multiply: multiply_ratio(dense.total(), freq.total()),
        speedup_multiply_layers: multiply_ratio(dense.linear, freq.linear),
    };
    ModelFile::Freq(compiled)
        .write(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    print_json_line(&summary)
}

pub fn count(args: &CountArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Count {
        params: u64,
    }
    print_json_line(&Count {
        params: count_params(&args.shapes),
    })
}
