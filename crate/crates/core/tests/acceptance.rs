//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 7 and 8 need the MNIST IDX files in `$FREQCHAIN_MNIST_DIR`, or
//! in `data/mnist` at the repository root.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqchain_core::bench::{median, time_pair, TimingProtocol};
use freqchain_core::compile::{compile_model, count_params, frequency_operator, CompileMode, CountMultiplies};
use freqchain_core::data::{
    encode_idx_images, encode_idx_labels, load_mnist, make_synthetic, parse_idx_images, parse_idx_labels, Dataset,
    SyntheticKind,
};
use freqchain_core::dct::{dct_nd, dct_rows, idct_nd, idct_rows, DctPlan, PlanCache};
use freqchain_core::format::ModelFile;
use freqchain_core::freqreg::{DecayPolicy, FreqParam, MaskFamily, MaskStrategy, ScheduleConfig, ZigzagMask};
use freqchain_core::nn::{
    evaluate, loss_softmax_ce, Activation, HiddenBlock, Layer, LayerGrad, Linear, Mode, SpatialModel, TrainConfig,
    Trainer,
};
use freqchain_core::runtime::{predict, InferenceSession};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn inf_norm(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn run(results: &mut Vec<bool>, id: usize, name: &str, limit_s: f64, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    let outcome = match outcome {
        Ok(msg) if secs > limit_s => Err(format!("{msg}; took {secs:.1}s, limit {limit_s:.0}s")),
        other => other,
    };
    let (tag, msg) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("criterion {id} [{name}] {tag} ({secs:.1}s): {msg}");
    results.push(outcome.is_ok());
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn direct_dct(x: &[f64]) -> Vec<f64> {
    let m = x.len() as f64;
    (0..x.len())
        .map(|j| {
            x.iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI / m * (i as f64 + 0.5) * j as f64).cos())
                .sum()
        })
        .collect()
}

fn dct_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut roundtrip: f64 = 0.0;
    let mut gram_err: f64 = 0.0;
    let mut oracle: f64 = 0.0;
    for &m in &[1usize, 2, 3, 5, 8, 17, 64, 100, 257, 512, 784, 1024] {
        let plan = DctPlan::new(m).unwrap();
        let x = random_matrix(&mut rng, 4, m);
        let back = idct_rows(&dct_rows(&x, &plan).unwrap(), &plan).unwrap();
        roundtrip = roundtrip.max(max_abs(&back, &x));

        let d = plan.forward_basis();
        let gram = d.t().dot(d);
        for ((i, j), v) in gram.indexed_iter() {
            let expected = match (i == j, i) {
                (true, 0) => m as f64,
                (true, _) => m as f64 / 2.0,
                (false, _) => 0.0,
            };
            gram_err = gram_err.max((v - expected).abs());
        }

        let fast = dct_rows(&x, &plan).unwrap();
        for (r, row) in x.rows().into_iter().enumerate() {
            for (j, v) in direct_dct(row.as_slice().unwrap()).iter().enumerate() {
                oracle = oracle.max((fast[[r, j]] - v).abs());
            }
        }
    }
    // Separable transforms over a 3-D tensor.
    let dims = [6, 9, 4];
    let plans: Vec<DctPlan> = dims.iter().map(|&d| DctPlan::new(d).unwrap()).collect();
    let refs: Vec<&DctPlan> = plans.iter().collect();
    let t = ArrayD::from_shape_fn(IxDyn(&dims), |_| rng.random_range(-1.0..1.0));
    let back = idct_nd(&dct_nd(&t, &refs).unwrap(), &refs).unwrap();
    roundtrip = roundtrip.max((&back - &t).iter().fold(0.0, |m: f64, v| m.max(v.abs())));

    check(roundtrip <= 1e-12, || format!("roundtrip error {roundtrip:e} > 1e-12"))?;
    check(gram_err <= 1e-9, || format!("DᵀD differs from Λ by {gram_err:e}"))?;
    check(oracle <= 1e-10, || format!("direct-summation mismatch {oracle:e}"))?;
    Ok(format!(
        "roundtrip {roundtrip:.1e}, DᵀD vs Λ {gram_err:.1e}, direct summation {oracle:.1e} (sizes 1..=1024)"
    ))
}

fn random_mask(rng: &mut ChaCha8Rng, m: usize, k: usize) -> ZigzagMask {
    let strategy = match rng.random_range(0..4) {
        0 => MaskStrategy::RawL1 {
            threshold: rng.random_range(1.0..(m + k) as f64),
        },
        1 => MaskStrategy::NormalizedL1 {
            threshold: rng.random_range(0.2..2.0),
        },
        2 => MaskStrategy::Rectangular {
            keep: vec![rng.random_range(1..=m), rng.random_range(1..=k)],
        },
        _ => return ZigzagMask::full(&[m, k]).unwrap(),
    };
    ZigzagMask::new(&[m, k], strategy).unwrap()
}

fn random_linear(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Linear {
    let freq = ArrayD::from_shape_fn(IxDyn(&[m, k]), |_| rng.random_range(-2.0..2.0));
    Linear {
        weight: FreqParam::new(freq, random_mask(rng, m, k)).unwrap(),
        bias: Array1::from_shape_fn(k, |_| rng.random_range(-1.0..1.0)),
    }
}

fn linear_chain_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..=24)).collect();
        let layers = dims
            .windows(2)
            .map(|w| Layer::Linear(random_linear(&mut rng, w[0], w[1])))
            .collect();
        let model = SpatialModel::new(dims[0], layers, false).unwrap();
        let plans = model.plans().unwrap();
        let x = random_matrix(&mut rng, 16, dims[0]);
        let spatial = model.forward(&x.view(), Mode::Eval, &plans).unwrap();
        let session = InferenceSession::<f64>::compiled(&compile_model(&model, CompileMode::Exact).unwrap()).unwrap();
        let chain = session.infer_batch(&x.view()).unwrap();
        let scale = inf_norm(&spatial).max(f64::MIN_POSITIVE);
        worst = worst.max(max_abs(&spatial, &chain) / scale);
    }
    check(worst <= 1e-9, || format!("relative error {worst:e} > 1e-9"))?;
    Ok(format!("100 random 3-layer linear models, worst relative error {worst:.1e}"))
}

fn train_small(widths: &[usize], hidden: HiddenBlock, seed: u64) -> (SpatialModel, Dataset) {
    let data = make_synthetic(
        SyntheticKind::RandomLinearTeacher {
            classes: *widths.last().unwrap(),
        },
        400,
        widths[0],
        seed,
    )
    .unwrap();
    let model = SpatialModel::mlp(widths, hidden, false, seed).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        epochs: 4,
        batch_size: 32,
        seed,
        schedule: ScheduleConfig::new(20.0, 6.0, 2, DecayPolicy::Linear).unwrap(),
        mask: MaskFamily::RawL1,
        bias_masking: false,
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    t.fit(&data, |_, _| {}).unwrap();
    (t.into_model(), data)
}

fn full_model_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut depths = Vec::new();
    let configs: [(&[usize], HiddenBlock); 3] = [
        (&[16, 12, 8, 4], HiddenBlock::default()),
        (&[16, 14, 12, 10, 8, 4], HiddenBlock::default()),
        (
            &[16, 10, 4],
            HiddenBlock {
                batchnorm: true,
                activation: Activation::Leaky { slope: 0.1 },
            },
        ),
    ];
    for (i, (widths, hidden)) in configs.into_iter().enumerate() {
        let (model, data) = train_small(widths, hidden, 30 + i as u64);
        let plans = model.plans().unwrap();
        let x = data.features();
        let expected = model.forward(&x.view(), Mode::Eval, &plans).unwrap();
        let session = InferenceSession::<f64>::compiled(&compile_model(&model, CompileMode::Exact).unwrap()).unwrap();
        let got = session.infer_batch(&x.view()).unwrap();
        worst = worst.max(max_abs(&got, &expected));
        let c = session.transform_counts();
        check(c.forward_calls == 1 && c.inverse_calls == 1, || {
            format!("depth {}: {c:?} transform calls for one batch", widths.len() - 1)
        })?;
        check(c.forward_rows == x.nrows() as u64 && c.inverse_rows == x.nrows() as u64, || {
            format!("transform row counts {c:?} for {} rows", x.nrows())
        })?;
        let preds = predict(&session, &x.view()).unwrap();
        let reference = freqchain_core::nn::predict(&model, &x.view(), &plans).unwrap();
        check(preds == reference, || "argmax predictions disagree".into())?;
        depths.push(widths.len() - 1);
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e} > 1e-9"))?;
    Ok(format!(
        "trained models with depths {depths:?}: max deviation {worst:.1e}; one DCT and one IDCT per batch"
    ))
}

fn support_containment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut outside: f64 = 0.0;
    let mut layers = 0;
    for &(m, k) in &[(5, 5), (8, 3), (17, 11), (64, 32), (100, 40)] {
        for _ in 0..6 {
            let lin = random_linear(&mut rng, m, k);
            let plans = PlanCache::with_sizes([m, k]).unwrap();
            let a = frequency_operator(&lin, &plans).unwrap();
            let gram = plans.get(m).unwrap().gram_diagonal();
            let masked = lin.weight.freq();
            for ((i, j), v) in a.indexed_iter() {
                worst = worst.max((v - masked[[i, j]] / gram[i]).abs());
                if !lin.weight.mask().contains(&[i, j]) {
                    outside = outside.max(v.abs());
                }
            }
            layers += 1;
        }
    }
    check(worst <= 1e-10, || format!("Ã deviates from Λ⁻¹·(W̃⊙mask) by {worst:e}"))?;
    check(outside <= 1e-10, || format!("Ã has support outside the mask ({outside:e})"))?;
    Ok(format!("{layers} masked layers: max deviation {worst:.1e}, max |Ã| outside mask {outside:.1e}"))
}

fn rectangular_model(widths: &[usize], keeps: &[[usize; 2]]) -> SpatialModel {
    let hidden = HiddenBlock {
        batchnorm: false,
        activation: Activation::Relu,
    };
    let mut model = SpatialModel::mlp(widths, hidden, true, 5).unwrap();
    let mut it = keeps.iter();
    for layer in model.layers_mut() {
        if let Layer::Linear(l) = layer {
            let keep = it.next().unwrap().to_vec();
            let mask = ZigzagMask::new(l.weight.dims(), MaskStrategy::Rectangular { keep }).unwrap();
            l.weight.set_mask(mask).unwrap();
        }
    }
    model
}

fn parameter_accounting() -> Outcome {
    let full: [&[usize]; 5] = [&[20, 1, 5, 5], &[50, 20, 5, 5], &[800, 500], &[500, 300], &[300, 10]];
    let cut: [&[usize]; 5] = [&[2, 1, 5, 5], &[5, 2, 5, 5], &[80, 16], &[16, 30], &[30, 2]];
    let (pf, pc) = (count_params(&full), count_params(&cut));
    check(pf == 578_500, || format!("full parameter count {pf} != 578,500"))?;
    check(pc == 2_120, || format!("truncated parameter count {pc} != 2,120"))?;

    let model = rectangular_model(&[800, 500, 300, 10], &[[80, 16], [16, 30], [30, 2]]);
    let dense = model.count_multiplies(1).linear;
    let compiled = compile_model(&model, CompileMode::Narrow).unwrap().count_multiplies(1).linear;
    check(dense == 553_000 && compiled == 1_820, || {
        format!("FC multiplies {dense}/{compiled}, expected 553,000/1,820")
    })?;
    Ok(format!(
        "params {pf} / {pc}; FC multiplies {dense} / {compiled} (ratio {:.1})",
        dense as f64 / compiled as f64
    ))
}

fn gradient_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = SpatialModel::mlp(&[6, 4, 3], HiddenBlock::default(), false, 6).unwrap();
    for layer in model.layers_mut() {
        match layer {
            Layer::Linear(l) => l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5)),
            Layer::FreqBatchNorm(bn) => {
                bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
                bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            _ => {}
        }
    }
    let x = random_matrix(&mut rng, 8, 6);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
    let plans = model.plans().unwrap();
    let loss = |m: &SpatialModel| {
        let s = m.forward(&x.view(), Mode::Train, &plans).unwrap();
        loss_softmax_ce(&s.view(), &labels).unwrap().0
    };
    let (scores, tape) = model.clone().forward_train(&x.view(), &plans).unwrap();
    let (_, g) = loss_softmax_ce(&scores.view(), &labels).unwrap();
    let grads = model.backward(&tape, &g, &plans).unwrap();

    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (li, grad) in grads.layers.iter().enumerate() {
        match grad {
            LayerGrad::Linear { weight_freq, bias } => {
                for ((i, j), &a) in weight_freq.indexed_iter() {
                    let fd = central(&model, h, |m, d| {
                        if let Layer::Linear(l) = &mut m.layers_mut()[li] {
                            l.weight.update(|w| w[[i, j]] += d);
                        }
                    }, &loss);
                    analytic.push(a);
                    numeric.push(fd);
                }
                for (j, &a) in bias.iter().enumerate() {
                    let fd = central(&model, h, |m, d| {
                        if let Layer::Linear(l) = &mut m.layers_mut()[li] {
                            l.bias[j] += d;
                        }
                    }, &loss);
                    analytic.push(a);
                    numeric.push(fd);
                }
            }
            LayerGrad::BatchNorm { gamma, beta } => {
                for (j, (&ga, &ba)) in gamma.iter().zip(beta).enumerate() {
                    for (which, a) in [(0, ga), (1, ba)] {
                        let fd = central(&model, h, |m, d| {
                            if let Layer::FreqBatchNorm(bn) = &mut m.layers_mut()[li] {
                                if which == 0 {
                                    bn.gamma[j] += d;
                                } else {
                                    bn.beta[j] += d;
                                }
                            }
                        }, &loss);
                        analytic.push(a);
                        numeric.push(fd);
                    }
                }
            }
            LayerGrad::None => {}
        }
    }
    let a = Array1::from(analytic);
    let n = Array1::from(numeric);
    let diff = (&a - &n).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(n.mapv(|v| v * v).sum().sqrt());
    let rel = diff / scale;
    check(rel <= 1e-4, || format!("relative gradient error {rel:e} > 1e-4"))?;
    Ok(format!("{} parameters of a 6-4-3 batchnorm/relu model, relative error {rel:.1e}", a.len()))
}

fn central(
    model: &SpatialModel,
    h: f64,
    perturb: impl Fn(&mut SpatialModel, f64),
    loss: &impl Fn(&SpatialModel) -> f64,
) -> f64 {
    let mut plus = model.clone();
    perturb(&mut plus, h);
    let mut minus = model.clone();
    perturb(&mut minus, -h);
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("FREQCHAIN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct MnistModels {
    dense: SpatialModel,
    x100: SpatialModel,
    test: Dataset,
}

const ARCH: [usize; 4] = [784, 256, 128, 10];
const KEEPS_20X: [[usize; 2]; 3] = [[100, 96], [96, 16], [16, 10]];
const KEEPS_100X: [[usize; 2]; 3] = [[40, 40], [40, 12], [12, 10]];

fn train_mnist(train: &Dataset, keeps: Option<&[[usize; 2]]>, epochs: usize) -> SpatialModel {
    let masked = keeps.is_some();
    let model = SpatialModel::mlp(&ARCH, HiddenBlock::default(), masked, 1).unwrap();
    let (schedule, mask) = match keeps {
        Some(k) => (
            ScheduleConfig::new(1.0, 0.0, 3, DecayPolicy::Linear).unwrap(),
            MaskFamily::Rectangular {
                keeps: k.iter().map(|v| v.to_vec()).collect(),
            },
        ),
        None => (ScheduleConfig::constant(1e9), MaskFamily::RawL1),
    };
    let cfg = TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        epochs,
        batch_size: 128,
        seed: 7,
        schedule,
        mask,
        bias_masking: masked,
    };
    let mut t = Trainer::new(model, cfg).unwrap();
    t.fit(train, |_, _| {}).unwrap();
    t.into_model()
}

fn layer_ratio(model: &SpatialModel) -> f64 {
    let dense = model.count_multiplies(1).linear;
    let compiled = compile_model(model, CompileMode::Narrow).unwrap().count_multiplies(1).linear;
    dense as f64 / compiled as f64
}

fn narrow_accuracy(model: &SpatialModel, test: &Dataset) -> f64 {
    let session = InferenceSession::<f64>::compiled(&compile_model(model, CompileMode::Narrow).unwrap()).unwrap();
    let preds = predict(&session, &test.features().view()).unwrap();
    preds.iter().zip(test.labels()).filter(|(p, l)| p == l).count() as f64 / test.len() as f64
}

fn mnist_compression(slot: &mut Option<MnistModels>) -> Outcome {
    let dir = mnist_dir();
    let train = load_mnist(&dir, true).map_err(|e| format!("MNIST training split unavailable in {}: {e}", dir.display()))?;
    let test = load_mnist(&dir, false).map_err(|e| format!("MNIST test split unavailable in {}: {e}", dir.display()))?;

    let dense = train_mnist(&train, None, 3);
    let plans = dense.plans().unwrap();
    let dense_acc = evaluate(&dense, &test, &plans).unwrap();

    let x20 = train_mnist(&train, Some(&KEEPS_20X), 8);
    let (r20, a20) = (layer_ratio(&x20), narrow_accuracy(&x20, &test));
    let x100 = train_mnist(&train, Some(&KEEPS_100X), 20);
    let (r100, a100) = (layer_ratio(&x100), narrow_accuracy(&x100, &test));
    let summary = format!(
        "dense {:.2}%; {r20:.1}x -> {:.2}%; {r100:.1}x -> {:.2}%",
        dense_acc * 100.0,
        a20 * 100.0,
        a100 * 100.0
    );
    *slot = Some(MnistModels { dense, x100, test });

    check(dense_acc >= 0.97, || format!("dense accuracy below 97%: {summary}"))?;
    check(r20 >= 20.0 && a20 >= 0.90, || format!("20x model misses target: {summary}"))?;
    check(r100 >= 100.0 && a100 >= 0.85, || format!("100x model misses target: {summary}"))?;
    Ok(summary)
}

fn wall_clock_speedup(models: Option<&MnistModels>) -> Outcome {
    let m = models.ok_or("no MNIST models; criterion 7 could not train them")?;
    let fm = compile_model(&m.x100, CompileMode::Narrow).unwrap();
    let compiled = InferenceSession::<f64>::compiled(&fm).unwrap();
    let dense = InferenceSession::<f64>::dense(&m.dense).unwrap();
    let batch = m.test.features().slice(ndarray::s![..10_000, ..]).to_owned();
    let protocol = TimingProtocol::new(3, 10).unwrap();
    let (tc, td) = time_pair(&compiled, &dense, &batch.view(), protocol).unwrap();
    let (mc, md) = (median(&tc), median(&td));
    let speedup = md / mc;
    let ratio = layer_ratio(&m.x100);
    let summary = format!(
        "{ratio:.1}x layer reduction, batch 10000, median {:.1} ms vs dense {:.1} ms over {} reps: {speedup:.2}x",
        mc * 1e3,
        md * 1e3,
        protocol.reps
    );
    check(ratio >= 100.0, || format!("model below 100x: {summary}"))?;
    check(speedup >= 5.0, || format!("speedup below 5x: {summary}"))?;
    Ok(summary)
}

fn serialization() -> Outcome {
    let mut files = Vec::new();
    let (trained, _) = train_small(&[16, 12, 8, 4], HiddenBlock::default(), 50);
    files.push(ModelFile::Spatial(trained.clone()));
    files.push(ModelFile::Freq(compile_model(&trained, CompileMode::Exact).unwrap()));
    let narrow = rectangular_model(&[12, 9, 5], &[[6, 4], [4, 3]]);
    files.push(ModelFile::Freq(compile_model(&narrow, CompileMode::Narrow).unwrap()));
    files.push(ModelFile::Spatial(narrow));
    for f in &files {
        let a = f.to_bytes().unwrap();
        let b = ModelFile::from_bytes(&a).unwrap().to_bytes().unwrap();
        check(a == b, || format!("{:?} model does not re-encode byte-identically", f.kind()))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = Array3::from_shape_fn((3, 4, 5), |_| rng.random::<u8>());
    let seeds = [encode_idx_images(&images), encode_idx_labels(&[1, 2, 3])];
    let mut cases = 0;
    let mut accepted = 0;
    for i in 0..4000 {
        let bytes: Vec<u8> = if i % 4 == 0 {
            (0..rng.random_range(0..48)).map(|_| rng.random()).collect()
        } else {
            let mut b = seeds[i % 2].clone();
            match rng.random_range(0..3) {
                0 => b.truncate(rng.random_range(0..=b.len())),
                1 => b.extend((0..rng.random_range(1..8)).map(|_| rng.random::<u8>())),
                _ => {
                    for _ in 0..rng.random_range(1..4) {
                        let at = rng.random_range(0..b.len());
                        b[at] = rng.random();
                    }
                }
            }
            b
        };
        let result = catch_unwind(|| {
            let imgs = parse_idx_images(&bytes).ok().map(|a| encode_idx_images(&a) == bytes);
            let labs = parse_idx_labels(&bytes).ok().map(|l| encode_idx_labels(&l) == bytes);
            (imgs, labs)
        });
        let (imgs, labs) = result.map_err(|_| format!("IDX parser panicked on case {i}"))?;
        for ok in [imgs, labs].into_iter().flatten() {
            check(ok, || format!("case {i} parsed but does not re-encode to the same bytes"))?;
            accepted += 1;
        }
        cases += 1;
    }
    Ok(format!(
        "{} model files re-encode identically; {cases} fuzzed IDX inputs, {accepted} accepted, none panicked",
        files.len()
    ))
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "dct-correctness", 60.0, dct_correctness);
    run(&mut results, 2, "linear-chain-equivalence", 60.0, linear_chain_equivalence);
    run(&mut results, 3, "full-model-equivalence", 120.0, full_model_equivalence);
    run(&mut results, 4, "support-containment", 60.0, support_containment);
    run(&mut results, 5, "parameter-accounting", 5.0, parameter_accounting);
    run(&mut results, 6, "gradient-integrity", 60.0, gradient_integrity);
    let mut models = None;
    run(&mut results, 7, "mnist-compression", 1200.0, || mnist_compression(&mut models));
    run(&mut results, 8, "wall-clock-speedup", 300.0, || wall_clock_speedup(models.as_ref()));
    run(&mut results, 9, "serialization", 60.0, serialization);
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
