//! `freqchain infer`: batch predictions as JSON lines.

use anyhow::{Context, Result};
use freqchain_core::data::{parse_idx_images, parse_idx_labels};
use freqchain_core::runtime::{argmax_rows, InferenceSession, Real};
use ndarray::{s, Array2};
use serde::Serialize;

use crate::args::{parse_inline, InferArgs, Precision};
use crate::exit::usage;
use crate::{load_model, print_json_line, session_for};

#[derive(Serialize)]
struct Prediction {
    index: usize,
    prediction: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
}

pub fn run(args: &InferArgs) -> Result<()> {
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    let model = load_model(&args.model)?;
    let inputs = read_inputs(&args.input)?;
    let labels = match &args.labels {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let labels = parse_idx_labels(&bytes).with_context(|| format!("parsing {}", p.display()))?;
            if labels.len() != inputs.nrows() {
                return Err(usage(format!("{} labels for {} inputs", labels.len(), inputs.nrows())));
            }
            Some(labels)
        }
        None => None,
    };
    match args.precision {
        Precision::F64 => emit(&session_for::<f64>(&model)?, &inputs, labels.as_deref(), args),
        Precision::F32 => emit(&session_for::<f32>(&model)?, &inputs, labels.as_deref(), args),
    }
}

fn emit<F: Real>(session: &InferenceSession<F>, inputs: &Array2<f64>, labels: Option<&[u8]>, args: &InferArgs) -> Result<()> {
    let mut hits = 0usize;
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + args.batch_size).min(inputs.nrows());
        let batch = inputs.slice(s![start..end, ..]).mapv(F::from_f64);
        let scores = session.infer_batch(&batch.view())?;
        for (offset, (pred, row)) in argmax_rows(&scores.view()).into_iter().zip(scores.rows()).enumerate() {
            let index = start + offset;
            let label = labels.map(|l| l[index] as usize);
            hits += usize::from(label == Some(pred));
            print_json_line(&Prediction {
                index,
                prediction: pred,
                label,
                scores: args.scores.then(|| row.iter().map(|v| v.to_f64()).collect()),
            })?;
        }
        start = end;
    }
    if labels.is_some() {
        eprintln!("accuracy {:.4} over {} inputs", hits as f64 / inputs.nrows() as f64, inputs.nrows());
    }
    Ok(())
}

/// Inline rows are used as given; IDX pixels are scaled to `[0, 1]`.
fn read_inputs(spec: &str) -> Result<Array2<f64>> {
    if let Some(rows) = spec.strip_prefix("inline:") {
        let rows = parse_inline(rows).map_err(usage)?;
        let (n, d) = (rows.len(), rows[0].len());
        return Ok(Array2::from_shape_vec((n, d), rows.concat()).expect("rows have equal length"));
    }
    let bytes = std::fs::read(spec).with_context(|| format!("reading {spec}"))?;
    let images = parse_idx_images(&bytes).with_context(|| format!("parsing {spec}"))?;
    let (n, r, c) = images.dim();
    Ok(images
        .mapv(|p| p as f64 / 255.0)
        .into_shape_with_order((n, r * c))
        .expect("contiguous"))
}
