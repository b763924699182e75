//! Spatial-domain training of fully-connected networks with frequency
//! weights and frequency nonlinearities.
//!
//! Linear layers compute `x·W + B` with `W` spatialized from a masked
//! frequency tensor. Every nonlinearity computes `IDCT(σ(DCT(a)))` row-wise,
//! so the trained function is exactly the frequency chain with `σ` applied
//! directly to frequency data.

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dct::{DctPlan, PlanCache};
use crate::error::{shape_err, Error, Result};
use crate::freqreg::{threshold_schedule, FreqParam, MaskFamily, ScheduleConfig, ZigzagMask};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Leaky { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Leaky { slope } => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Leaky { slope } => {
                if v >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: FreqParam,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Number of leading output frequencies the weight can reach.
    pub fn out_keep(&self) -> usize {
        self.weight.mask().bounding_box()[1]
    }

    pub fn spatial_weight(&self, plans: &PlanCache) -> Result<Array2<f64>> {
        self.weight
            .spatialize_matrix(plans.get(self.in_dim())?, plans.get(self.out_dim())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Eval-mode normalization of frequency features.
    pub fn apply_eval(&self, f: &ArrayView2<'_, f64>) -> Array2<f64> {
        let scale = &self.gamma / &self.running_var.mapv(|v| (v + self.epsilon).sqrt());
        let mut out = f.to_owned();
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row)
                .and(&scale)
                .and(&self.running_mean)
                .and(&self.beta)
                .for_each(|v, &s, &m, &b| *v = s * (*v - m) + b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    FreqRelu,
    FreqLeakyRelu { slope: f64 },
    FreqBatchNorm(BatchNorm),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::FreqRelu => "freq-relu",
            Layer::FreqLeakyRelu { .. } => "freq-leaky-relu",
            Layer::FreqBatchNorm(_) => "freq-batchnorm",
        }
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            Layer::FreqRelu => Some(Activation::Relu),
            Layer::FreqLeakyRelu { slope } => Some(Activation::Leaky { slope: *slope }),
            _ => None,
        }
    }
}

/// Hidden block inserted between consecutive linear layers by [`SpatialModel::mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenBlock {
    pub batchnorm: bool,
    pub activation: Activation,
}

impl Default for HiddenBlock {
    fn default() -> Self {
        Self {
            batchnorm: true,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialModel {
    input_dim: usize,
    layers: Vec<Layer>,
    bias_masked: bool,
}

impl SpatialModel {
    pub fn new(input_dim: usize, layers: Vec<Layer>, bias_masked: bool) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    if l.weight.dims().len() != 2 || l.in_dim() != width {
                        return shape_err(format!(
                            "layer {i}: linear weight {:?} cannot take width {width}",
                            l.weight.dims()
                        ));
                    }
                    if l.bias.len() != l.out_dim() {
                        return shape_err(format!("layer {i}: bias length {} != {}", l.bias.len(), l.out_dim()));
                    }
                    width = l.out_dim();
                }
                Layer::FreqRelu => {}
                Layer::FreqLeakyRelu { slope } => {
                    if !(*slope > 0.0 && *slope < 1.0) {
                        return Err(Error::InvalidArgument(format!("layer {i}: leaky slope {slope} not in (0, 1)")));
                    }
                }
                Layer::FreqBatchNorm(bn) => {
                    let w = bn.width();
                    if [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()] != [w, w, w] || w != width {
                        return shape_err(format!("layer {i}: batchnorm width does not match {width}"));
                    }
                    if bn.running_var.iter().any(|&v| !(v >= 0.0)) {
                        return Err(Error::InvalidArgument(format!("layer {i}: negative running variance")));
                    }
                }
            }
        }
        Ok(Self {
            input_dim,
            layers,
            bias_masked,
        })
    }

    /// Fully-connected network over `widths` (input first), with `hidden`
    /// between consecutive linear layers and full masks.
    ///
    /// Frequency weights are drawn uniformly from `[-s, s]` with
    /// `s = √(6/(M+K))·√(M·K)/2`, which gives the spatialized weights the
    /// usual Glorot variance.
    pub fn mlp(widths: &[usize], hidden: HiddenBlock, bias_masked: bool, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (m, k) = (pair[0], pair[1]);
            if m == 0 || k == 0 {
                return Err(Error::InvalidArgument(format!("zero width in {widths:?}")));
            }
            let bound = (6.0 / (m + k) as f64).sqrt() * ((m * k) as f64).sqrt() / 2.0;
            let freq = ArrayD::from_shape_fn(ndarray::IxDyn(&[m, k]), |_| rng.random_range(-bound..=bound));
            let weight = FreqParam::new(freq, ZigzagMask::full(&[m, k])?)?;
            layers.push(Layer::Linear(Linear {
                weight,
                bias: Array1::zeros(k),
            }));
            if i + 2 < widths.len() {
                if hidden.batchnorm {
                    layers.push(Layer::FreqBatchNorm(BatchNorm::new(k)));
                }
                layers.push(match hidden.activation {
                    Activation::Relu => Layer::FreqRelu,
                    Activation::Leaky { slope } => Layer::FreqLeakyRelu { slope },
                });
            }
        }
        Self::new(widths[0], layers, bias_masked)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.widths().last().copied().unwrap_or(self.input_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn bias_masked(&self) -> bool {
        self.bias_masked
    }

    /// Activation width after each layer.
    pub fn widths(&self) -> Vec<usize> {
        let mut width = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                if let Layer::Linear(lin) = l {
                    width = lin.out_dim();
                }
                width
            })
            .collect()
    }

    /// Width entering each layer.
    fn input_widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim).chain(self.widths()).take(self.layers.len()).collect()
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        })
    }

    /// DCT sizes needed by training-time forward and backward passes.
    pub fn plan_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = std::iter::once(self.input_dim).chain(self.widths()).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    pub fn plans(&self) -> Result<PlanCache> {
        PlanCache::with_sizes(self.plan_sizes())
    }

    /// Installs per-layer masks from `family` at `threshold` and re-applies
    /// the bias constraints.
    pub fn apply_masks(&mut self, family: &MaskFamily, threshold: f64, plans: &PlanCache) -> Result<()> {
        let mut idx = 0;
        for layer in &mut self.layers {
            if let Layer::Linear(lin) = layer {
                let mask = family.mask(idx, lin.weight.dims(), threshold)?;
                lin.weight.set_mask(mask)?;
                idx += 1;
            }
        }
        self.project_constraints(plans)
    }

    /// With bias masking on, restricts each bias (and the shift of any
    /// batchnorm fed by it) to the frequencies its weight can reach.
    pub fn project_constraints(&mut self, plans: &PlanCache) -> Result<()> {
        if !self.bias_masked {
            return Ok(());
        }
        let mut keep: Option<usize> = None;
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(lin) => {
                    let k = lin.out_keep();
                    let plan = plans.get(lin.out_dim())?;
                    let mut freq = lin.bias.dot(plan.forward_basis());
                    freq.slice_mut(s![k..]).fill(0.0);
                    lin.bias = freq.dot(plan.inverse_basis());
                    keep = Some(k);
                }
                Layer::FreqBatchNorm(bn) => {
                    if let Some(k) = keep {
                        bn.beta.slice_mut(s![k..]).fill(0.0);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim {
            return shape_err(format!("batch width {} != input_dim {}", batch.ncols(), self.input_dim));
        }
        Ok(())
    }

    /// Class scores. `Mode::Train` normalizes with batch statistics without
    /// touching the running statistics; use [`SpatialModel::forward_train`]
    /// for a training step.
    pub fn forward(&self, batch: &ArrayView2<'_, f64>, mode: Mode, plans: &PlanCache) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut x = batch.to_owned();
        for (layer, width) in self.layers.iter().zip(self.input_widths()) {
            x = match layer {
                Layer::Linear(lin) => x.dot(&lin.spatial_weight(plans)?) + &lin.bias,
                Layer::FreqRelu | Layer::FreqLeakyRelu { .. } => {
                    let act = layer.activation().expect("activation layer");
                    freq_activation(&x.view(), act, plans.get(width)?)
                }
                Layer::FreqBatchNorm(bn) => match mode {
                    Mode::Eval => freq_batchnorm_eval(&x.view(), bn, plans.get(width)?),
                    Mode::Train => freq_batchnorm_batch(&x.view(), bn, plans.get(width)?)?.0,
                },
            };
        }
        Ok(x)
    }

    /// Train-mode forward that updates batchnorm running statistics and
    /// records what the backward pass needs.
    pub fn forward_train(&mut self, batch: &ArrayView2<'_, f64>, plans: &PlanCache) -> Result<(Array2<f64>, Tape)> {
        self.check_batch(batch)?;
        let widths = self.input_widths();
        let mut x = batch.to_owned();
        let mut records = Vec::with_capacity(self.layers.len());
        for (layer, width) in self.layers.iter_mut().zip(widths) {
            let plan = plans.get(width)?;
            let (next, record) = match layer {
                Layer::Linear(lin) => {
                    let w = lin.spatial_weight(plans)?;
                    let out = x.dot(&w) + &lin.bias;
                    (out, Record::Linear { input: x, weight: w })
                }
                Layer::FreqRelu | Layer::FreqLeakyRelu { .. } => {
                    let act = layer.activation().expect("activation layer");
                    let freq = x.dot(plan.forward_basis());
                    let out = freq.mapv(|v| act.apply(v)).dot(plan.inverse_basis());
                    (out, Record::Activation { freq, act })
                }
                Layer::FreqBatchNorm(bn) => {
                    let (out, stats) = freq_batchnorm_batch(&x.view(), bn, plan)?;
                    let m = bn.momentum;
                    bn.running_mean = &bn.running_mean * (1.0 - m) + &stats.mean * m;
                    bn.running_var = &bn.running_var * (1.0 - m) + &stats.var * m;
                    (out, Record::BatchNorm { xhat: stats.xhat, inv_std: stats.inv_std })
                }
            };
            records.push(record);
            x = next;
        }
        Ok((x, Tape { records }))
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// scores produced by the forward pass recorded in `tape`.
    pub fn backward(&self, tape: &Tape, grad_scores: &Array2<f64>, plans: &PlanCache) -> Result<Gradients> {
        if tape.records.len() != self.layers.len() {
            return shape_err("tape does not belong to this model");
        }
        let first_linear = self.layers.iter().position(|l| matches!(l, Layer::Linear(_)));
        let mut g = grad_scores.clone();
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for (i, (layer, record)) in self.layers.iter().zip(&tape.records).enumerate().rev() {
            let need_input_grad = first_linear.is_none_or(|f| i > f);
            match (layer, record) {
                (Layer::Linear(lin), Record::Linear { input, weight }) => {
                    let gw = input.t().dot(&g);
                    let gb = g.sum_axis(Axis(0));
                    let gw_freq = lin.weight.adjoint_matrix(
                        &gw.view(),
                        plans.get(lin.in_dim())?,
                        plans.get(lin.out_dim())?,
                    )?;
                    if need_input_grad {
                        g = g.dot(&weight.t());
                    }
                    grads[i] = LayerGrad::Linear {
                        weight_freq: gw_freq,
                        bias: gb,
                    };
                }
                (_, Record::Activation { freq, act }) => {
                    if need_input_grad {
                        let plan = plans.get(freq.ncols())?;
                        let mut gf = g.dot(&plan.inverse_basis().t());
                        ndarray::Zip::from(&mut gf).and(freq).for_each(|gv, &f| *gv *= act.derivative(f));
                        g = gf.dot(&plan.forward_basis().t());
                    }
                }
                (Layer::FreqBatchNorm(bn), Record::BatchNorm { xhat, inv_std }) => {
                    let plan = plans.get(bn.width())?;
                    let gy = g.dot(&plan.inverse_basis().t());
                    let ggamma = (&gy * xhat).sum_axis(Axis(0));
                    let gbeta = gy.sum_axis(Axis(0));
                    if need_input_grad {
                        let n = gy.nrows() as f64;
                        let gxhat = &gy * &bn.gamma;
                        let sum_g = gxhat.sum_axis(Axis(0));
                        let sum_gx = (&gxhat * xhat).sum_axis(Axis(0));
                        let mut gf = gxhat * n - &sum_g - &(xhat * &sum_gx);
                        gf *= &(inv_std / n);
                        g = gf.dot(&plan.forward_basis().t());
                    }
                    grads[i] = LayerGrad::BatchNorm {
                        gamma: ggamma,
                        beta: gbeta,
                    };
                }
                _ => return shape_err("tape does not belong to this model"),
            }
        }
        Ok(Gradients { layers: grads })
    }
}

#[derive(Debug, Clone)]
enum Record {
    Linear { input: Array2<f64>, weight: Array2<f64> },
    Activation { freq: Array2<f64>, act: Activation },
    BatchNorm { xhat: Array2<f64>, inv_std: Array1<f64> },
}

/// Intermediate values from [`SpatialModel::forward_train`].
#[derive(Debug, Clone)]
pub struct Tape {
    records: Vec<Record>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    None,
    Linear { weight_freq: Array2<f64>, bias: Array1<f64> },
    BatchNorm { gamma: Array1<f64>, beta: Array1<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

/// `IDCT(σ(DCT(a)))` applied to each row.
pub fn freq_activation(a: &ArrayView2<'_, f64>, act: Activation, plan: &DctPlan) -> Array2<f64> {
    a.dot(plan.forward_basis()).mapv(|v| act.apply(v)).dot(plan.inverse_basis())
}

pub fn freq_relu_train(a: &ArrayView2<'_, f64>, plan: &DctPlan) -> Result<Array2<f64>> {
    check_width(a, plan)?;
    Ok(freq_activation(a, Activation::Relu, plan))
}

pub fn freq_leaky_relu_train(a: &ArrayView2<'_, f64>, slope: f64, plan: &DctPlan) -> Result<Array2<f64>> {
    check_width(a, plan)?;
    Ok(freq_activation(a, Activation::Leaky { slope }, plan))
}

/// Train-mode frequency batchnorm; updates `bn`'s running statistics.
pub fn freq_batchnorm_train(a: &ArrayView2<'_, f64>, bn: &mut BatchNorm, plan: &DctPlan) -> Result<Array2<f64>> {
    check_width(a, plan)?;
    let (out, stats) = freq_batchnorm_batch(a, bn, plan)?;
    let m = bn.momentum;
    bn.running_mean = &bn.running_mean * (1.0 - m) + &stats.mean * m;
    bn.running_var = &bn.running_var * (1.0 - m) + &stats.var * m;
    Ok(out)
}

fn check_width(a: &ArrayView2<'_, f64>, plan: &DctPlan) -> Result<()> {
    if a.ncols() != plan.size() {
        return shape_err(format!("row width {} != plan size {}", a.ncols(), plan.size()));
    }
    Ok(())
}

struct BatchStats {
    mean: Array1<f64>,
    var: Array1<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn freq_batchnorm_batch(a: &ArrayView2<'_, f64>, bn: &BatchNorm, plan: &DctPlan) -> Result<(Array2<f64>, BatchStats)> {
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("batchnorm in train mode needs a nonempty batch".into()));
    }
    let f = a.dot(plan.forward_basis());
    let mean = f.mean_axis(Axis(0)).expect("nonempty");
    let centered = &f - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty");
    let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &bn.gamma + &bn.beta;
    let out = y.dot(plan.inverse_basis());
    Ok((out, BatchStats { mean, var, xhat, inv_std }))
}

fn freq_batchnorm_eval(a: &ArrayView2<'_, f64>, bn: &BatchNorm, plan: &DctPlan) -> Array2<f64> {
    let f = a.dot(plan.forward_basis());
    bn.apply_eval(&f.view()).dot(plan.inverse_basis())
}

/// Mean softmax cross-entropy and its gradient with respect to the scores.
pub fn loss_softmax_ce(scores: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = scores.dim();
    if labels.len() != n {
        return shape_err(format!("{} labels for {n} score rows", labels.len()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Array2::zeros((n, c));
    let mut total = 0.0;
    for ((row, mut g), &label) in scores.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<'a>(row: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn argmax_rows(scores: &ArrayView2<'_, f64>) -> Vec<usize> {
    scores.rows().into_iter().map(|r| argmax(r.iter())).collect()
}

const EVAL_CHUNK: usize = 2048;

/// Eval-mode predictions, processed in row chunks.
pub fn predict(model: &SpatialModel, features: &ArrayView2<'_, f64>, plans: &PlanCache) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(features.nrows());
    for chunk in features.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let scores = model.forward(&chunk, Mode::Eval, plans)?;
        out.extend(argmax_rows(&scores.view()));
    }
    Ok(out)
}

/// Fraction of samples whose eval-mode argmax matches the label.
pub fn evaluate(model: &SpatialModel, data: &Dataset, plans: &PlanCache) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(model, &data.features().view(), plans)?;
    let hits = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub mask: MaskFamily,
    pub bias_masking: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        ScheduleConfig::new(
            self.schedule.eps_init,
            self.schedule.eps_final,
            self.schedule.decay_end,
            self.schedule.policy,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub threshold: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub kept_weights: usize,
}

#[derive(Debug, Clone)]
enum Velocity {
    None,
    Linear { weight: Array2<f64>, bias: Array1<f64> },
    BatchNorm { gamma: Array1<f64>, beta: Array1<f64> },
}

/// SGD with momentum over a [`SpatialModel`].
///
/// Frequency-weight gradients are scaled by `Λ_M ⊗ Λ_K` before the update,
/// which makes a full-mask step identical to plain SGD on the spatial weight.
/// Out-of-mask entries are re-zeroed after every step.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: SpatialModel,
    cfg: TrainConfig,
    plans: PlanCache,
    velocity: Vec<Velocity>,
}

impl Trainer {
    pub fn new(model: SpatialModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.bias_masking != model.bias_masked() {
            return Err(Error::InvalidConfig("bias_masking must match the model's bias_masked flag".into()));
        }
        let plans = model.plans()?;
        let velocity = model
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Linear(lin) => Velocity::Linear {
                    weight: Array2::zeros((lin.in_dim(), lin.out_dim())),
                    bias: Array1::zeros(lin.out_dim()),
                },
                Layer::FreqBatchNorm(bn) => Velocity::BatchNorm {
                    gamma: Array1::zeros(bn.width()),
                    beta: Array1::zeros(bn.width()),
                },
                _ => Velocity::None,
            })
            .collect();
        Ok(Self {
            model,
            cfg,
            plans,
            velocity,
        })
    }

    pub fn model(&self) -> &SpatialModel {
        &self.model
    }

    pub fn into_model(self) -> SpatialModel {
        self.model
    }

    pub fn plans(&self) -> &PlanCache {
        &self.plans
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over `data` in seeded shuffled order.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        let threshold = threshold_schedule(epoch, &self.cfg.schedule);
        self.model.apply_masks(&self.cfg.mask, threshold, &self.plans)?;
        for (layer, vel) in self.model.layers().iter().zip(&mut self.velocity) {
            if let (Layer::Linear(lin), Velocity::Linear { weight, .. }) = (layer, vel) {
                let kept = lin.weight.mask().kept().view().into_dimensionality::<Ix2>().expect("2-D mask");
                ndarray::Zip::from(weight).and(&kept).for_each(|v, &k| {
                    if !k {
                        *v = 0.0;
                    }
                });
            }
        }

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for idx in order.chunks(self.cfg.batch_size) {
            let x = data.features().select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let (scores, tape) = self.model.forward_train(&x.view(), &self.plans)?;
            let (loss, grad) = loss_softmax_ce(&scores.view(), &labels)?;
            loss_sum += loss * idx.len() as f64;
            hits += argmax_rows(&scores.view()).iter().zip(&labels).filter(|(p, l)| p == l).count();
            let grads = self.model.backward(&tape, &grad, &self.plans)?;
            self.step(&grads)?;
        }
        let kept_weights = self.model.linear_layers().map(|l| l.weight.mask().kept_count()).sum();
        Ok(EpochMetrics {
            epoch,
            threshold,
            loss: loss_sum / data.len() as f64,
            train_accuracy: hits as f64 / data.len() as f64,
            kept_weights,
        })
    }

    fn step(&mut self, grads: &Gradients) -> Result<()> {
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        for ((layer, grad), vel) in self.model.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            match (layer, grad, vel) {
                (Layer::Linear(lin), LayerGrad::Linear { weight_freq, bias }, Velocity::Linear { weight: vw, bias: vb }) => {
                    let rows = self.plans.get(lin.in_dim())?.gram_diagonal();
                    let cols = self.plans.get(lin.out_dim())?.gram_diagonal();
                    for ((i, j), v) in vw.indexed_iter_mut() {
                        *v = mu * *v + rows[i] * cols[j] * weight_freq[[i, j]];
                    }
                    ndarray::Zip::from(&mut *vb).and(bias).for_each(|v, &g| *v = mu * *v + g);
                    let vw2 = &*vw;
                    lin.weight.update(|w| {
                        ndarray::Zip::from(w).and(&vw2.view().into_dyn()).for_each(|p, &v| *p -= lr * v);
                    });
                    lin.bias.scaled_add(-lr, vb);
                }
                (Layer::FreqBatchNorm(bn), LayerGrad::BatchNorm { gamma, beta }, Velocity::BatchNorm { gamma: vg, beta: vb }) => {
                    ndarray::Zip::from(&mut *vg).and(gamma).for_each(|v, &g| *v = mu * *v + g);
                    ndarray::Zip::from(&mut *vb).and(beta).for_each(|v, &g| *v = mu * *v + g);
                    bn.gamma.scaled_add(-lr, vg);
                    bn.beta.scaled_add(-lr, vb);
                }
                (_, LayerGrad::None, _) => {}
                _ => return shape_err("gradient layout does not match model"),
            }
        }
        self.model.project_constraints(&self.plans)
    }

    /// Runs every configured epoch, calling `on_epoch` after each.
    pub fn fit(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&EpochMetrics, &SpatialModel)) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let m = self.train_epoch(data, epoch)?;
            on_epoch(&m, &self.model);
            history.push(m);
        }
        Ok(history)
    }
}
