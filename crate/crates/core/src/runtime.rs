//! Batch execution of frequency chains and of their dense counterparts.
//!
//! A compiled session runs one forward DCT on the input rows, the truncated
//! layer chain on frequency data, and one IDCT on the final activations.
//! A dense session runs the same function with every transform folded into
//! the neighbouring weight matrices, which is what plain spatial inference
//! costs: one full GEMM per layer and elementwise nonlinearities.
//!
//! Rows are processed in fixed-size chunks. Each chunk uses two scratch
//! buffers that alternate between layers. With the `parallel` feature the
//! chunks are spread over the rayon pool; per-row arithmetic does not depend
//! on which worker runs it, so results are bitwise identical either way.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, LinalgScalar};

use crate::compile::{FreqLayer, FreqLinear, FreqModel};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Layer, SpatialModel};

pub const DEFAULT_CHUNK_ROWS: usize = 256;

/// Floating-point element types the runtime can execute in.
pub trait Real: LinalgScalar + PartialOrd + Send + Sync + fmt::Debug {
    const BYTES: usize;
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// Row chunks on the rayon pool. Runs sequentially when the crate is
    /// built without the `parallel` feature.
    #[default]
    Rayon,
}

/// Sizes the global rayon pool. Returns the worker count in effect, which is
/// always 1 without the `parallel` feature.
pub fn configure_workers(workers: Option<usize>) -> Result<usize> {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = workers {
            if n == 0 {
                return Err(Error::InvalidArgument("worker count must be >= 1".into()));
            }
            // A pool that was already initialised keeps its size.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        if workers == Some(0) {
            return Err(Error::InvalidArgument("worker count must be >= 1".into()));
        }
        Ok(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionKind {
    Compiled,
    Dense,
}

/// Transform applications observed since the last reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransformCounts {
    pub forward_calls: u64,
    pub inverse_calls: u64,
    pub forward_rows: u64,
    pub inverse_rows: u64,
}

#[derive(Debug, Default)]
struct Counters {
    forward_calls: AtomicU64,
    inverse_calls: AtomicU64,
    forward_rows: AtomicU64,
    inverse_rows: AtomicU64,
}

#[derive(Debug, Clone)]
enum Stage<F> {
    Linear { a: Array2<F>, bias: Array1<F> },
    Activation(Activation),
    Affine { scale: Array1<F>, shift: Array1<F> },
}

fn cast1<F: Real>(v: &Array1<f64>) -> Array1<F> {
    v.mapv(F::from_f64)
}

fn cast2<F: Real>(v: &Array2<f64>) -> Array2<F> {
    v.mapv(F::from_f64)
}

/// An immutable executable model. Safe to share between threads.
#[derive(Debug)]
pub struct InferenceSession<F: Real> {
    kind: SessionKind,
    input_dim: usize,
    output_dim: usize,
    input_transform: Option<Array2<F>>,
    stages: Vec<Stage<F>>,
    output_transform: Option<Array2<F>>,
    max_width: usize,
    chunk_rows: usize,
    parallelism: Parallelism,
    counters: Counters,
}

impl<F: Real> InferenceSession<F> {
    /// Session for a compiled chain. The input transform produces only the
    /// frequencies the first layer reads.
    pub fn compiled(model: &FreqModel) -> Result<Self> {
        let plans = crate::dct::PlanCache::with_sizes([model.input_dim(), model.output_dim()])?;
        let keep = model.input_keep();
        let fwd = plans.get(model.input_dim())?.forward_basis().slice(s![.., ..keep]).to_owned();
        let width = model.final_width();
        let inv = plans.get(model.output_dim())?.inverse_basis().slice(s![..width, ..]).to_owned();
        let stages = model
            .layers()
            .iter()
            .map(|l| match l {
                FreqLayer::Linear(lin) => Stage::Linear {
                    a: cast2(&lin.a_block),
                    bias: cast1(&lin.b_freq),
                },
                FreqLayer::Activation(a) => Stage::Activation(*a),
                FreqLayer::Affine(a) => Stage::Affine {
                    scale: cast1(&a.scale),
                    shift: cast1(&a.shift),
                },
            })
            .collect();
        Ok(Self::assemble(
            SessionKind::Compiled,
            model.input_dim(),
            model.output_dim(),
            Some(cast2(&fwd)),
            stages,
            Some(cast2(&inv)),
        ))
    }

    /// Dense session computing the spatial model's eval-mode function.
    ///
    /// Each linear layer absorbs the IDCT of its input (when the previous
    /// layer left frequency data) and the DCT of its output (when a
    /// nonlinearity follows), so no transform is ever run on activations.
    pub fn dense(model: &SpatialModel) -> Result<Self> {
        let plans = model.plans()?;
        let layers = model.layers();
        let mut stages = Vec::with_capacity(layers.len() + 2);
        let mut width = model.input_dim();
        let mut in_freq = false;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    let mut a = l.spatial_weight(&plans)?;
                    let mut bias = l.bias.clone();
                    if in_freq {
                        a = plans.get(l.in_dim())?.inverse_basis().dot(&a);
                    }
                    let to_freq = matches!(layers.get(i + 1), Some(next) if !matches!(next, Layer::Linear(_)));
                    if to_freq {
                        let d = plans.get(l.out_dim())?.forward_basis();
                        a = a.dot(d);
                        bias = bias.dot(d);
                    }
                    stages.push(Stage::Linear {
                        a: cast2(&a),
                        bias: cast1(&bias),
                    });
                    in_freq = to_freq;
                    width = l.out_dim();
                }
                other => {
                    if !in_freq {
                        stages.push(Stage::Linear {
                            a: cast2(plans.get(width)?.forward_basis()),
                            bias: Array1::zeros(width),
                        });
                        in_freq = true;
                    }
                    stages.push(match other {
                        Layer::FreqRelu => Stage::Activation(Activation::Relu),
                        Layer::FreqLeakyRelu { slope } => Stage::Activation(Activation::Leaky { slope: *slope }),
                        Layer::FreqBatchNorm(bn) => {
                            let f = crate::compile::fold_batchnorm(bn);
                            Stage::Affine {
                                scale: cast1(&f.scale),
                                shift: cast1(&f.shift),
                            }
                        }
                        Layer::Linear(_) => unreachable!(),
                    });
                }
            }
        }
        if in_freq {
            stages.push(Stage::Linear {
                a: cast2(plans.get(width)?.inverse_basis()),
                bias: Array1::zeros(width),
            });
        }
        Ok(Self::assemble(SessionKind::Dense, model.input_dim(), model.output_dim(), None, stages, None))
    }

    fn assemble(
        kind: SessionKind,
        input_dim: usize,
        output_dim: usize,
        input_transform: Option<Array2<F>>,
        stages: Vec<Stage<F>>,
        output_transform: Option<Array2<F>>,
    ) -> Self {
        // Scratch only ever holds transformed inputs, raw inputs that feed a
        // non-linear first stage, and linear outputs.
        let mut max_width = match (&input_transform, stages.first()) {
            (Some(t), _) => t.ncols(),
            (None, Some(Stage::Linear { .. })) => 1,
            (None, _) => input_dim,
        };
        for st in &stages {
            if let Stage::Linear { bias, .. } = st {
                max_width = max_width.max(bias.len());
            }
        }
        Self {
            kind,
            input_dim,
            output_dim,
            input_transform,
            stages,
            output_transform,
            max_width,
            chunk_rows: DEFAULT_CHUNK_ROWS,
            parallelism: Parallelism::default(),
            counters: Counters::default(),
        }
    }

    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }

    /// Rows per work unit. Part of the determinism contract: outputs are
    /// bitwise reproducible for a fixed chunk size.
    pub fn with_chunk_rows(mut self, rows: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidArgument("chunk_rows must be >= 1".into()));
        }
        self.chunk_rows = rows;
        Ok(self)
    }

    pub fn kind(&self) -> SessionKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn parallelism(&self) -> Parallelism {
        self.parallelism
    }

    pub fn chunk_rows(&self) -> usize {
        self.chunk_rows
    }

    pub fn transform_counts(&self) -> TransformCounts {
        let c = &self.counters;
        TransformCounts {
            forward_calls: c.forward_calls.load(Ordering::Relaxed),
            inverse_calls: c.inverse_calls.load(Ordering::Relaxed),
            forward_rows: c.forward_rows.load(Ordering::Relaxed),
            inverse_rows: c.inverse_rows.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        let c = &self.counters;
        for a in [&c.forward_calls, &c.inverse_calls, &c.forward_rows, &c.inverse_rows] {
            a.store(0, Ordering::Relaxed);
        }
    }

    /// Number of stored scalars across weights, biases, affine maps and
    /// transform matrices.
    pub fn parameter_count(&self) -> usize {
        let stages: usize = self
            .stages
            .iter()
            .map(|s| match s {
                Stage::Linear { a, bias } => a.len() + bias.len(),
                Stage::Activation(_) => 0,
                Stage::Affine { scale, shift } => scale.len() + shift.len(),
            })
            .sum();
        stages
            + self.input_transform.as_ref().map_or(0, |t| t.len())
            + self.output_transform.as_ref().map_or(0, |t| t.len())
    }

    /// Bytes of live tensors while running `batch` rows: parameters, the
    /// input and output matrices, and two scratch buffers per worker.
    pub fn modeled_peak_bytes(&self, batch: usize) -> usize {
        let workers = match self.parallelism {
            Parallelism::Sequential => 1,
            Parallelism::Rayon => configure_workers(None).unwrap_or(1),
        };
        let chunks = batch.div_ceil(self.chunk_rows).max(1);
        let scratch = 2 * self.chunk_rows.min(batch.max(1)) * self.max_width * workers.min(chunks);
        F::BYTES * (self.parameter_count() + batch * (self.input_dim + self.output_dim) + scratch)
    }

    /// Class scores for each row of `batch`.
    pub fn infer_batch(&self, batch: &ArrayView2<'_, F>) -> Result<Array2<F>> {
        if batch.ncols() != self.input_dim {
            return shape_err(format!("batch width {} != model input {}", batch.ncols(), self.input_dim));
        }
        let n = batch.nrows();
        let c = self.output_dim;
        let mut out = Array2::<F>::zeros((n, c));
        if self.input_transform.is_some() {
            self.counters.forward_calls.fetch_add(1, Ordering::Relaxed);
        }
        if self.output_transform.is_some() {
            self.counters.inverse_calls.fetch_add(1, Ordering::Relaxed);
        }
        if n == 0 {
            return Ok(out);
        }
        let chunk = self.chunk_rows;
        let flat = out.as_slice_mut().expect("fresh array is contiguous");
        let work = |scratch: &mut Scratch<F>, (i, out_rows): (usize, &mut [F])| {
            let start = i * chunk;
            let rows = out_rows.len() / c;
            let x = batch.slice(s![start..start + rows, ..]);
            let dst = ArrayViewMut2::from_shape((rows, c), out_rows).expect("chunk shape");
            self.run_chunk(&x, dst, scratch);
        };
        match self.parallelism {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                flat.par_chunks_mut(chunk * c)
                    .enumerate()
                    .for_each_init(|| Scratch::new(chunk, self.max_width), work);
            }
            _ => {
                let mut scratch = Scratch::new(chunk, self.max_width);
                for item in flat.chunks_mut(chunk * c).enumerate() {
                    work(&mut scratch, item);
                }
            }
        }
        Ok(out)
    }

    fn run_chunk(&self, x: &ArrayView2<'_, F>, mut out: ArrayViewMut2<'_, F>, sc: &mut Scratch<F>) {
        let rows = x.nrows();
        let one = F::one();
        let mut width = self.input_dim;
        let mut in_x = true;
        if let Some(t) = &self.input_transform {
            width = t.ncols();
            let mut h = sc.cur_mut(rows, width);
            general_mat_mul(one, x, t, F::zero(), &mut h);
            self.counters.forward_rows.fetch_add(rows as u64, Ordering::Relaxed);
            in_x = false;
        }
        for stage in &self.stages {
            match stage {
                Stage::Linear { a, bias } => {
                    if in_x {
                        linear_into(x, a, bias, sc.next_mut(rows, bias.len()));
                    } else {
                        let (cur, next) = sc.split(rows, width, bias.len());
                        linear_into(&cur, a, bias, next);
                    }
                    sc.swap();
                    width = bias.len();
                    in_x = false;
                }
                Stage::Activation(act) => {
                    if in_x {
                        sc.cur_mut(rows, width).assign(x);
                        in_x = false;
                    }
                    activation_inplace(&mut sc.cur_mut(rows, width), *act);
                }
                Stage::Affine { scale, shift } => {
                    if in_x {
                        sc.cur_mut(rows, width).assign(x);
                        in_x = false;
                    }
                    affine_inplace(&mut sc.cur_mut(rows, width), scale, shift);
                }
            }
        }
        let h = if in_x { x.view() } else { sc.cur(rows, width) };
        match &self.output_transform {
            Some(t) => {
                general_mat_mul(one, &h, t, F::zero(), &mut out);
                self.counters.inverse_rows.fetch_add(rows as u64, Ordering::Relaxed);
            }
            None => out.assign(&h),
        }
    }
}

/// Two activation buffers that swap roles after each linear stage.
struct Scratch<F> {
    a: Vec<F>,
    b: Vec<F>,
}

impl<F: Real> Scratch<F> {
    fn new(rows: usize, width: usize) -> Self {
        Self {
            a: vec![F::zero(); rows * width],
            b: vec![F::zero(); rows * width],
        }
    }

    fn cur(&self, rows: usize, width: usize) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((rows, width), &self.a[..rows * width]).expect("scratch shape")
    }

    fn cur_mut(&mut self, rows: usize, width: usize) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((rows, width), &mut self.a[..rows * width]).expect("scratch shape")
    }

    fn split(&mut self, rows: usize, width: usize, next_width: usize) -> (ArrayView2<'_, F>, ArrayViewMut2<'_, F>) {
        let cur = ArrayView2::from_shape((rows, width), &self.a[..rows * width]).expect("scratch shape");
        let next =
            ArrayViewMut2::from_shape((rows, next_width), &mut self.b[..rows * next_width]).expect("scratch shape");
        (cur, next)
    }

    fn next_mut(&mut self, rows: usize, width: usize) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((rows, width), &mut self.b[..rows * width]).expect("scratch shape")
    }

    fn swap(&mut self) {
        std::mem::swap(&mut self.a, &mut self.b);
    }
}

/// `dst = src[:, ..m′]·a` in the first `k′` columns, plus `bias` everywhere.
fn linear_into<F: Real>(src: &ArrayView2<'_, F>, a: &Array2<F>, bias: &Array1<F>, mut dst: ArrayViewMut2<'_, F>) {
    for mut row in dst.rows_mut() {
        row.assign(bias);
    }
    let (m, k) = a.dim();
    let lhs = src.slice(s![.., ..m]);
    let mut head = dst.slice_mut(s![.., ..k]);
    general_mat_mul(F::one(), &lhs, a, F::one(), &mut head);
}

#[inline]
fn activate<F: Real>(act: Activation, v: F) -> F {
    match act {
        Activation::Relu => {
            if v > F::zero() {
                v
            } else {
                F::zero()
            }
        }
        Activation::Leaky { slope } => {
            if v >= F::zero() {
                v
            } else {
                F::from_f64(slope) * v
            }
        }
    }
}

fn activation_inplace<F: Real>(x: &mut ArrayViewMut2<'_, F>, act: Activation) {
    x.mapv_inplace(|v| activate(act, v));
}

fn affine_inplace<F: Real>(x: &mut ArrayViewMut2<'_, F>, scale: &Array1<F>, shift: &Array1<F>) {
    for mut row in x.rows_mut() {
        ndarray::Zip::from(&mut row)
            .and(scale)
            .and(shift)
            .for_each(|v, &s, &t| *v = *v * s + t);
    }
}

/// One truncated layer on frequency rows: reads the first `m′` columns of
/// `x_freq` and returns `bias.len()` columns.
pub fn truncated_matmul(x_freq: &ArrayView2<'_, f64>, layer: &FreqLinear) -> Result<Array2<f64>> {
    if x_freq.ncols() < layer.in_keep() {
        return shape_err(format!("input width {} < kept rows {}", x_freq.ncols(), layer.in_keep()));
    }
    let mut out = Array2::zeros((x_freq.nrows(), layer.out_width()));
    linear_into(x_freq, &layer.a_block, &layer.b_freq, out.view_mut());
    Ok(out)
}

pub fn apply_activation<F: Real>(x_freq: &ArrayView2<'_, F>, act: Activation) -> Array2<F> {
    x_freq.mapv(|v| activate(act, v))
}

pub fn apply_affine<F: Real>(x_freq: &ArrayView2<'_, F>, scale: &Array1<F>, shift: &Array1<F>) -> Result<Array2<F>> {
    if scale.len() != x_freq.ncols() || shift.len() != x_freq.ncols() {
        return shape_err(format!(
            "affine widths {}/{} != input width {}",
            scale.len(),
            shift.len(),
            x_freq.ncols()
        ));
    }
    let mut out = x_freq.to_owned();
    affine_inplace(&mut out.view_mut(), scale, shift);
    Ok(out)
}

/// Index of the largest score in each row, lowest index on ties.
pub fn argmax_rows<F: Real>(scores: &ArrayView2<'_, F>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v: Option<F> = None;
            for (i, &v) in row.iter().enumerate() {
                if best_v.is_none_or(|b| v > b) {
                    best = i;
                    best_v = Some(v);
                }
            }
            best
        })
        .collect()
}

pub fn predict<F: Real>(session: &InferenceSession<F>, batch: &ArrayView2<'_, F>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&session.infer_batch(batch)?.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{compile_model, CompileMode, FreqAffine};
    use crate::freqreg::{FreqParam, MaskStrategy, ZigzagMask};
    use crate::nn::{HiddenBlock, Linear, Mode};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn identity_model(n: usize) -> FreqModel {
        // Ã = I, so the chain is a DCT followed by its inverse.
        let lin = FreqLinear {
            a_block: Array2::eye(n),
            b_freq: Array1::zeros(n),
            full_dims: (n, n),
        };
        FreqModel::new(n, CompileMode::Exact, vec![FreqLayer::Linear(lin)], String::new()).unwrap()
    }

    #[test]
    fn identity_network() {
        let s = InferenceSession::<f64>::compiled(&identity_model(6)).unwrap();
        let x = random(5, 6, 1);
        assert_abs_diff_eq!(s.infer_batch(&x.view()).unwrap(), x, epsilon = 1e-10);
        assert!(s.infer_batch(&random(2, 5, 1).view()).is_err());
    }

    #[test]
    fn activation_and_affine_examples() {
        let r = apply_activation(&arr2(&[[-1.0, 2.0, 0.0]]).view(), Activation::Relu);
        assert_eq!(r, arr2(&[[0.0, 2.0, 0.0]]));
        let l = apply_activation(&arr2(&[[-4.0, 4.0]]).view(), Activation::Leaky { slope: 0.5 });
        assert_eq!(l, arr2(&[[-2.0, 4.0]]));
        let a = apply_affine(&arr2(&[[0.0, 3.0]]).view(), &arr1(&[2.0, 2.0]), &arr1(&[-1.0, -1.0])).unwrap();
        assert_eq!(a, arr2(&[[-1.0, 5.0]]));
        assert!(apply_affine(&arr2(&[[0.0]]).view(), &arr1(&[1.0, 1.0]), &arr1(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn truncated_matmul_oracles() {
        let x = random(4, 5, 2);
        let full = FreqLinear {
            a_block: random(5, 3, 3),
            b_freq: arr1(&[0.1, 0.2, 0.3]),
            full_dims: (5, 3),
        };
        let plain = x.dot(&full.a_block) + &full.b_freq;
        assert_abs_diff_eq!(truncated_matmul(&x.view(), &full).unwrap(), plain, epsilon = 1e-12);

        let zero = FreqLinear {
            a_block: Array2::zeros((2, 2)),
            b_freq: arr1(&[1.0, 2.0, 3.0]),
            full_dims: (5, 3),
        };
        let out = truncated_matmul(&x.view(), &zero).unwrap();
        for row in out.rows() {
            assert_eq!(row, arr1(&[1.0, 2.0, 3.0]));
        }

        // Zero-padding oracle.
        let block = FreqLinear {
            a_block: random(3, 2, 4),
            b_freq: arr1(&[0.5, -0.5, 0.25]),
            full_dims: (5, 3),
        };
        let mut padded = Array2::zeros((5, 3));
        padded.slice_mut(s![..3, ..2]).assign(&block.a_block);
        let expected = x.dot(&padded) + &block.b_freq;
        assert_abs_diff_eq!(truncated_matmul(&x.view(), &block).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn argmax_tie_break() {
        let s = arr2(&[[0.0; 10]]);
        assert_eq!(argmax_rows(&s.view()), vec![0]);
        let mut t = Array2::<f32>::zeros((1, 10));
        t[[0, 7]] = 1.0;
        assert_eq!(argmax_rows(&t.view()), vec![7]);
    }

    fn trained_like_model(seed: u64, bias_masked: bool) -> SpatialModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SpatialModel::mlp(&[8, 6, 5, 4], HiddenBlock::default(), bias_masked, seed).unwrap();
        for layer in m.layers_mut() {
            match layer {
                Layer::Linear(l) => l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5)),
                Layer::FreqBatchNorm(bn) => {
                    bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
                    bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
                    bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
                }
                _ => {}
            }
        }
        m
    }

    #[test]
    fn sessions_match_training_forward() {
        let m = trained_like_model(5, false);
        let plans = m.plans().unwrap();
        let x = random(300, 8, 6).mapv(f64::abs);
        let expected = m.forward(&x.view(), Mode::Eval, &plans).unwrap();
        let compiled = InferenceSession::<f64>::compiled(&compile_model(&m, CompileMode::Exact).unwrap()).unwrap();
        assert_abs_diff_eq!(compiled.infer_batch(&x.view()).unwrap(), expected, epsilon = 1e-9);
        let dense = InferenceSession::<f64>::dense(&m).unwrap();
        assert_abs_diff_eq!(dense.infer_batch(&x.view()).unwrap(), expected, epsilon = 1e-9);
        assert_eq!(dense.transform_counts(), TransformCounts::default());
    }

    #[test]
    fn one_transform_each_way_per_batch() {
        let m = trained_like_model(7, false);
        let s = InferenceSession::<f64>::compiled(&compile_model(&m, CompileMode::Exact).unwrap())
            .unwrap()
            .with_chunk_rows(16)
            .unwrap();
        s.infer_batch(&random(100, 8, 1).view()).unwrap();
        let c = s.transform_counts();
        assert_eq!((c.forward_calls, c.inverse_calls), (1, 1));
        assert_eq!((c.forward_rows, c.inverse_rows), (100, 100));
        s.reset_counters();
        assert_eq!(s.transform_counts(), TransformCounts::default());
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let m = trained_like_model(9, false);
        let fm = compile_model(&m, CompileMode::Exact).unwrap();
        let x = random(1000, 8, 2);
        let seq = InferenceSession::<f64>::compiled(&fm).unwrap().with_parallelism(Parallelism::Sequential);
        let par = InferenceSession::<f64>::compiled(&fm).unwrap().with_parallelism(Parallelism::Rayon);
        let a = seq.infer_batch(&x.view()).unwrap();
        assert_eq!(a, par.infer_batch(&x.view()).unwrap());
        assert_eq!(a, seq.infer_batch(&x.view()).unwrap());
    }

    #[test]
    fn narrow_matches_exact_on_kept_frequencies() {
        let mut m = trained_like_model(11, true);
        let plans = m.plans().unwrap();
        let keeps = [(5, 3), (3, 2), (2, 4)];
        let mut idx = 0;
        for layer in m.layers_mut() {
            if let Layer::Linear(l) = layer {
                let (mk, kk) = keeps[idx];
                idx += 1;
                let mask = ZigzagMask::new(l.weight.dims(), MaskStrategy::Rectangular { keep: vec![mk, kk] }).unwrap();
                l.weight.set_mask(mask).unwrap();
            }
        }
        m.project_constraints(&plans).unwrap();
        let exact = compile_model(&m, CompileMode::Exact).unwrap();
        let narrow = compile_model(&m, CompileMode::Narrow).unwrap();
        assert_eq!(narrow.final_width(), 4);
        let x = random(50, 8, 3).mapv(f64::abs);
        let se = InferenceSession::<f64>::compiled(&exact).unwrap();
        let sn = InferenceSession::<f64>::compiled(&narrow).unwrap();
        let expected = m.forward(&x.view(), Mode::Eval, &plans).unwrap();
        assert_abs_diff_eq!(se.infer_batch(&x.view()).unwrap(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(sn.infer_batch(&x.view()).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn f32_close_to_f64() {
        let m = trained_like_model(13, false);
        let fm = compile_model(&m, CompileMode::Exact).unwrap();
        let x = random(20, 8, 4);
        let s64 = InferenceSession::<f64>::compiled(&fm).unwrap();
        let s32 = InferenceSession::<f32>::compiled(&fm).unwrap();
        let a = s64.infer_batch(&x.view()).unwrap();
        let b = s32.infer_batch(&x.mapv(|v| v as f32).view()).unwrap().mapv(f64::from);
        assert_abs_diff_eq!(a, b, epsilon = 1e-4);
    }

    #[test]
    fn dense_handles_leading_nonlinearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let freq = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |_| rng.random_range(-1.0..1.0));
        let lin = Linear {
            weight: FreqParam::new(freq, ZigzagMask::full(&[4, 3]).unwrap()).unwrap(),
            bias: arr1(&[0.1, -0.2, 0.3]),
        };
        let m = SpatialModel::new(4, vec![Layer::FreqRelu, Layer::Linear(lin), Layer::FreqRelu], false).unwrap();
        let plans = m.plans().unwrap();
        let x = random(7, 4, 8);
        let expected = m.forward(&x.view(), Mode::Eval, &plans).unwrap();
        let dense = InferenceSession::<f64>::dense(&m).unwrap();
        assert_abs_diff_eq!(dense.infer_batch(&x.view()).unwrap(), expected, epsilon = 1e-10);
        let compiled = InferenceSession::<f64>::compiled(&compile_model(&m, CompileMode::Exact).unwrap()).unwrap();
        assert_abs_diff_eq!(compiled.infer_batch(&x.view()).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn affine_only_chain() {
        let fm = FreqModel::new(
            3,
            CompileMode::Exact,
            vec![FreqLayer::Affine(FreqAffine {
                scale: arr1(&[1.0, 1.0, 1.0]),
                shift: arr1(&[0.0, 0.0, 0.0]),
            })],
            String::new(),
        )
        .unwrap();
        let s = InferenceSession::<f64>::compiled(&fm).unwrap();
        let x = random(4, 3, 5);
        assert_abs_diff_eq!(s.infer_batch(&x.view()).unwrap(), x, epsilon = 1e-12);
        assert_eq!(s.infer_batch(&Array2::zeros((0, 3)).view()).unwrap().dim(), (0, 3));
    }

    #[test]
    fn peak_bytes_grow_with_batch() {
        let s = InferenceSession::<f64>::compiled(&identity_model(4)).unwrap();
        assert!(s.modeled_peak_bytes(10) < s.modeled_peak_bytes(1000));
        assert_eq!(s.parameter_count(), 16 + 4 + 16 + 16);
    }
}
