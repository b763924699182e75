//! `freqchain bench`: timed comparison against a dense baseline.

use std::path::Path;

use anyhow::{Context, Result};
use freqchain_core::bench::{time_pair, BenchReport, BenchSetup, TimingProtocol};
use freqchain_core::compile::CountMultiplies;
use freqchain_core::data::load_mnist;
use freqchain_core::format::ModelFile;
use freqchain_core::nn::SpatialModel;
use freqchain_core::runtime::{argmax_rows, configure_workers, InferenceSession, Parallelism, Real};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{BenchArgs, Precision};
use crate::exit::{config, usage};
use crate::{load_model, session_for};

pub fn run(args: &BenchArgs) -> Result<()> {
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    let protocol = TimingProtocol::new(args.warmup, args.reps)?;
    let model = load_model(&args.model)?;
    let baseline = match load_model(&args.baseline)? {
        ModelFile::Spatial(m) => m,
        ModelFile::Freq(_) => return Err(usage("--baseline must be a spatial checkpoint")),
    };
    check_architecture(&model, &baseline)?;
    let workers = if args.sequential {
        1
    } else {
        configure_workers(args.workers)?
    };
    let (inputs, labels) = batch_inputs(args, baseline.input_dim())?;

    let report = match args.precision {
        Precision::F64 => measure::<f64>(args, &model, &baseline, &inputs, labels.as_deref(), protocol, workers)?,
        Precision::F32 => measure::<f32>(args, &model, &baseline, &inputs, labels.as_deref(), protocol, workers)?,
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&args.out, json + "\n").with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.csv {
        write_csv(path, &report)?;
    }
    eprintln!(
        "median {:.3} ms vs baseline {:.3} ms: {:.2}x time, {:.1}x multiplies",
        report.model_median_s * 1e3,
        report.baseline_median_s * 1e3,
        report.speedup_time,
        report.speedup_multiply
    );
    Ok(())
}

/// Full linear shapes must agree layer by layer.
fn check_architecture(model: &ModelFile, baseline: &SpatialModel) -> Result<()> {
    let ours: Vec<(usize, usize)> = match model {
        ModelFile::Spatial(m) => m.linear_layers().map(|l| (l.in_dim(), l.out_dim())).collect(),
        ModelFile::Freq(m) => m
            .layers()
            .iter()
            .filter_map(|l| match l {
                freqchain_core::compile::FreqLayer::Linear(fl) => Some(fl.full_dims),
                _ => None,
            })
            .collect(),
    };
    let theirs: Vec<(usize, usize)> = baseline.linear_layers().map(|l| (l.in_dim(), l.out_dim())).collect();
    if ours != theirs {
        return Err(config(format!("architecture mismatch: model layers {ours:?}, baseline layers {theirs:?}")));
    }
    Ok(())
}

/// MNIST test rows repeated up to the batch size, or seeded uniform noise.
fn batch_inputs(args: &BenchArgs, dims: usize) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
    let n = args.batch_size;
    match &args.data_dir {
        Some(dir) => {
            let test = load_mnist(dir, false).with_context(|| format!("loading MNIST from {}", dir.display()))?;
            if test.dims() != dims {
                return Err(config(format!("model input {dims} does not match MNIST width {}", test.dims())));
            }
            let idx: Vec<usize> = (0..n).map(|i| i % test.len()).collect();
            let labels = idx.iter().map(|&i| test.labels()[i]).collect();
            Ok((test.features().select(Axis(0), &idx), Some(labels)))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            Ok((Array2::from_shape_fn((n, dims), |_| rng.random::<f64>()), None))
        }
    }
}

fn session<F: Real>(file: &ModelFile, args: &BenchArgs) -> Result<InferenceSession<F>> {
    let parallelism = if args.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    };
    let s = session_for::<F>(file)?.with_parallelism(parallelism);
    Ok(match args.chunk_rows {
        Some(rows) => s.with_chunk_rows(rows)?,
        None => s,
    })
}

fn accuracy<F: Real>(session: &InferenceSession<F>, batch: &Array2<F>, labels: Option<&[usize]>) -> Result<Option<f64>> {
    let Some(labels) = labels else { return Ok(None) };
    let preds = argmax_rows(&session.infer_batch(&batch.view())?.view());
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(Some(hits as f64 / labels.len() as f64))
}

fn measure<F: Real>(
    args: &BenchArgs,
    model: &ModelFile,
    baseline: &SpatialModel,
    inputs: &Array2<f64>,
    labels: Option<&[usize]>,
    protocol: TimingProtocol,
    workers: usize,
) -> Result<BenchReport> {
    let baseline_file = ModelFile::Spatial(baseline.clone());
    let ms = session::<F>(model, args)?;
    let bs = session::<F>(&baseline_file, args)?;
    let batch = inputs.mapv(F::from_f64);
    let n = batch.nrows();
    let (model_multiplies, mode) = match model {
        ModelFile::Spatial(m) => (m.count_multiplies(n), "dense".to_owned()),
        ModelFile::Freq(m) => (m.count_multiplies(n), m.mode().to_string()),
    };
    let setup = BenchSetup {
        model_id: file_id(&args.model),
        baseline_id: file_id(&args.baseline),
        mode,
        precision: F::NAME.to_owned(),
        batch_size: n,
        protocol,
        workers,
        chunk_rows: ms.chunk_rows(),
        model_multiplies,
        baseline_multiplies: baseline.count_multiplies(n),
        model_peak_bytes: ms.modeled_peak_bytes(n),
        baseline_peak_bytes: bs.modeled_peak_bytes(n),
    };
    let (tm, tb) = time_pair(&ms, &bs, &batch.view(), protocol)?;
    let mut report = BenchReport::new(setup, tm, tb)?;
    report.model_accuracy = accuracy(&ms, &batch, labels)?;
    report.baseline_accuracy = accuracy(&bs, &batch, labels)?;
    Ok(report)
}

fn file_id(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model_id: &'a str,
    baseline_id: &'a str,
    rep: usize,
    model_s: f64,
    baseline_s: f64,
}

fn write_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for (rep, (&m, &b)) in report.model_times_s.iter().zip(&report.baseline_times_s).enumerate() {
        w.serialize(CsvRow {
            model_id: &report.model_id,
            baseline_id: &report.baseline_id,
            rep,
            model_s: m,
            baseline_s: b,
        })?;
    }
    w.flush()?;
    Ok(())
}
