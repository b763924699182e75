//! `freqchain train`: fit a model and write a spatial checkpoint.

use anyhow::{Context, Result};
use freqchain_core::compile::{compile_model, CompileMode, CountMultiplies};
use freqchain_core::data::{load_mnist, make_synthetic, Dataset, SyntheticKind};
use freqchain_core::format::ModelFile;
use freqchain_core::freqreg::{MaskFamily, ScheduleConfig};
use freqchain_core::nn::{evaluate, Activation, EpochMetrics, HiddenBlock, SpatialModel, TrainConfig, Trainer};
use serde::Serialize;

use crate::args::TrainArgs;
use crate::exit::usage;
use crate::print_json_line;

#[derive(Serialize)]
struct EpochLine<'a> {
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
    test_accuracy: Option<f64>,
    /// Dense over narrow-compiled linear multiplies at the current masks.
    multiply_ratio: Option<f64>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let widths = &args.arch.0;
    let (input, classes) = (widths[0], *widths.last().expect("arch has two widths"));
    let (train, test) = load_data(args, input, classes)?;
    let train = match args.train_limit {
        Some(n) => train.head(n),
        None => train,
    };
    if let MaskFamily::Rectangular { keeps } = &args.mask {
        if keeps.len() != widths.len() - 1 {
            return Err(usage(format!(
                "rect mask lists {} keep pairs for {} linear layers",
                keeps.len(),
                widths.len() - 1
            )));
        }
    }

    let hidden = HiddenBlock {
        batchnorm: !args.no_batchnorm,
        activation: match args.leaky_slope {
            Some(slope) => Activation::Leaky { slope },
            None => Activation::Relu,
        },
    };
    let model = SpatialModel::mlp(widths, hidden, args.bias_mask, args.seed)?;
    let eps_final = args.eps_final.unwrap_or(args.eps_init);
    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        schedule: ScheduleConfig::new(args.eps_init, eps_final, args.decay_end, args.decay.into())?,
        mask: args.mask.clone(),
        bias_masking: args.bias_mask,
    };
    let mut trainer = Trainer::new(model, cfg)?;
    for epoch in 0..args.epochs {
        let metrics = trainer.train_epoch(&train, epoch)?;
        let test_accuracy = match &test {
            Some(t) => Some(evaluate(trainer.model(), t, trainer.plans())?),
            None => None,
        };
        print_json_line(&EpochLine {
            metrics: &metrics,
            test_accuracy,
            multiply_ratio: multiply_ratio(trainer.model()),
        })?;
    }

    let model = trainer.into_model();
    ModelFile::Spatial(model)
        .write(&args.out)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn load_data(args: &TrainArgs, input: usize, classes: usize) -> Result<(Dataset, Option<Dataset>)> {
    if args.synthetic {
        let kind = SyntheticKind::RandomLinearTeacher { classes };
        return Ok((make_synthetic(kind, args.samples, input, args.seed)?, None));
    }
    let dir = args
        .data_dir
        .as_ref()
        .ok_or_else(|| usage("no data source: pass --data-dir or --synthetic"))?;
    let train = load_mnist(dir, true).with_context(|| format!("loading MNIST from {}", dir.display()))?;
    let test = load_mnist(dir, false).with_context(|| format!("loading MNIST from {}", dir.display()))?;
    if input != train.dims() || classes != train.classes() {
        return Err(usage(format!(
            "--arch must start at {} and end at {} for MNIST",
            train.dims(),
            train.classes()
        )));
    }
    Ok((train, Some(test)))
}

/// Only defined when the model compiles in narrow mode.
fn multiply_ratio(model: &SpatialModel) -> Option<f64> {
    let compiled = compile_model(model, CompileMode::Narrow).ok()?;
    let c = compiled.count_multiplies(1).linear;
    (c > 0).then(|| model.count_multiplies(1).linear as f64 / c as f64)
}
