//! Compilation of a trained [`SpatialModel`] into a frequency inference
//! chain.
//!
//! For a linear layer `x·W + B` the chain stores `Ã = D_M⁻¹·W·D_K` and
//! `B̃ = B·D_K`, so that `DCT(x·W + B) = DCT(x)·Ã + B̃`. When `W` is the
//! spatialized form of a masked frequency tensor `W̃`, `Ã = Λ_M⁻¹·W̃`, and
//! only the mask's bounding box needs to be multiplied.

use ndarray::{s, Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::dct::PlanCache;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, BatchNorm, Layer, Linear, SpatialModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompileMode {
    /// Full-width activations; matches the training graph exactly.
    Exact,
    /// Activations truncated to each layer's kept output frequencies.
    Narrow,
}

impl std::fmt::Display for CompileMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CompileMode::Exact => "exact",
            CompileMode::Narrow => "narrow",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqLinear {
    pub a_block: Array2<f64>,
    pub b_freq: Array1<f64>,
    pub full_dims: (usize, usize),
}

impl FreqLinear {
    pub fn in_keep(&self) -> usize {
        self.a_block.nrows()
    }

    pub fn out_keep(&self) -> usize {
        self.a_block.ncols()
    }

    /// Activation width this layer emits.
    pub fn out_width(&self) -> usize {
        self.b_freq.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqAffine {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl FreqAffine {
    pub fn width(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FreqLayer {
    Linear(FreqLinear),
    Activation(Activation),
    Affine(FreqAffine),
}

/// Scalar multiplications for one batch, split by where they happen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultiplyCount {
    pub linear: u64,
    pub affine: u64,
    pub transforms: u64,
}

impl MultiplyCount {
    pub fn total(&self) -> u64 {
        self.linear + self.affine + self.transforms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqModel {
    input_dim: usize,
    output_dim: usize,
    mode: CompileMode,
    layers: Vec<FreqLayer>,
    provenance: String,
    multiplies_per_row: MultiplyCount,
}

impl FreqModel {
    /// Validates the width chain and computes multiply metadata.
    pub fn new(input_dim: usize, mode: CompileMode, layers: Vec<FreqLayer>, provenance: String) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        let mut width = input_keep_of(input_dim, &layers);
        let mut full = input_dim;
        let mut counts = MultiplyCount {
            transforms: (input_dim * width) as u64,
            ..Default::default()
        };
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                FreqLayer::Linear(l) => {
                    let (m, k) = l.full_dims;
                    if m != full || l.in_keep() > m || l.out_keep() > k || l.in_keep() > width {
                        return shape_err(format!(
                            "layer {i}: block {:?} of {:?} cannot follow width {width} (full {full})",
                            l.a_block.dim(),
                            l.full_dims
                        ));
                    }
                    let expected = match mode {
                        CompileMode::Exact => k,
                        CompileMode::Narrow => l.out_keep(),
                    };
                    if l.out_width() != expected {
                        return shape_err(format!("layer {i}: bias length {} in {mode} mode", l.out_width()));
                    }
                    counts.linear += (l.in_keep() * l.out_keep()) as u64;
                    width = expected;
                    full = k;
                }
                FreqLayer::Activation(_) => {}
                FreqLayer::Affine(a) => {
                    if a.width() != width || a.shift.len() != width {
                        return shape_err(format!("layer {i}: affine width {} != {width}", a.width()));
                    }
                    counts.affine += width as u64;
                }
            }
        }
        counts.transforms += (width * full) as u64;
        Ok(Self {
            input_dim,
            output_dim: full,
            mode,
            layers,
            provenance,
            multiplies_per_row: counts,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mode(&self) -> CompileMode {
        self.mode
    }

    pub fn layers(&self) -> &[FreqLayer] {
        &self.layers
    }

    /// Digest of the spatial checkpoint this chain was compiled from.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Number of input frequencies the chain reads.
    pub fn input_keep(&self) -> usize {
        input_keep_of(self.input_dim, &self.layers)
    }

    /// Width of the last frequency activation, fed to the output IDCT.
    pub fn final_width(&self) -> usize {
        let mut width = self.input_keep();
        for layer in &self.layers {
            if let FreqLayer::Linear(l) = layer {
                width = l.out_width();
            }
        }
        width
    }

    /// Stored weight block shapes, in layer order.
    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                FreqLayer::Linear(lin) => Some(vec![lin.in_keep(), lin.out_keep()]),
                _ => None,
            })
            .collect()
    }
}

fn input_keep_of(input_dim: usize, layers: &[FreqLayer]) -> usize {
    match layers.first() {
        Some(FreqLayer::Linear(l)) => l.in_keep(),
        _ => input_dim,
    }
}

/// `D_M⁻¹·W·D_K` for the spatialized weight, before any truncation.
pub fn frequency_operator(lin: &Linear, plans: &PlanCache) -> Result<Array2<f64>> {
    let rows = plans.get(lin.in_dim())?;
    let cols = plans.get(lin.out_dim())?;
    let w = lin.spatial_weight(plans)?;
    Ok(rows.inverse_basis().dot(&w).dot(cols.forward_basis()))
}

/// Compiles one linear layer. Narrow mode requires a bias trained under
/// frequency masking, since it truncates `B̃` to the kept outputs.
pub fn compile_linear(lin: &Linear, plans: &PlanCache, mode: CompileMode, bias_masked: bool) -> Result<FreqLinear> {
    if mode == CompileMode::Narrow && !bias_masked {
        return Err(Error::InvalidConfig(
            "narrow compilation needs a model trained with bias masking".into(),
        ));
    }
    let full = frequency_operator(lin, plans)?;
    let (mk, kk) = {
        let bb = lin.weight.mask().bounding_box();
        (bb[0], bb[1])
    };
    let kept = lin.weight.mask().kept().view().into_dimensionality::<Ix2>().expect("2-D mask");
    let mut a_block = full.slice(s![..mk, ..kk]).to_owned();
    ndarray::Zip::from(&mut a_block)
        .and(kept.slice(s![..mk, ..kk]))
        .for_each(|a, &k| {
            if !k {
                *a = 0.0;
            }
        });
    let b_full = lin.bias.dot(plans.get(lin.out_dim())?.forward_basis());
    let b_freq = match mode {
        CompileMode::Exact => b_full,
        CompileMode::Narrow => b_full.slice(s![..kk]).to_owned(),
    };
    Ok(FreqLinear {
        a_block,
        b_freq,
        full_dims: (lin.in_dim(), lin.out_dim()),
    })
}

/// Eval-mode batchnorm as a per-feature affine map.
pub fn fold_batchnorm(bn: &BatchNorm) -> FreqAffine {
    let scale = &bn.gamma / &bn.running_var.mapv(|v| (v + bn.epsilon).sqrt());
    let shift = &bn.beta - &(&scale * &bn.running_mean);
    FreqAffine { scale, shift }
}

/// Builds the frequency inference chain for `model`.
pub fn compile_model(model: &SpatialModel, mode: CompileMode) -> Result<FreqModel> {
    let plans = model.plans()?;
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut width = model.input_dim();
    for layer in model.layers() {
        let compiled = match layer {
            Layer::Linear(lin) => {
                let mut fl = compile_linear(lin, &plans, mode, model.bias_masked())?;
                if fl.in_keep() > width {
                    // Columns past the incoming narrow width are zero.
                    fl.a_block = fl.a_block.slice(s![..width, ..]).to_owned();
                }
                width = fl.out_width();
                FreqLayer::Linear(fl)
            }
            Layer::FreqRelu => FreqLayer::Activation(Activation::Relu),
            Layer::FreqLeakyRelu { slope } => FreqLayer::Activation(Activation::Leaky { slope: *slope }),
            Layer::FreqBatchNorm(bn) => {
                let mut affine = fold_batchnorm(bn);
                if affine.width() > width {
                    affine.scale = affine.scale.slice(s![..width]).to_owned();
                    affine.shift = affine.shift.slice(s![..width]).to_owned();
                }
                FreqLayer::Affine(affine)
            }
        };
        layers.push(compiled);
    }
    FreqModel::new(model.input_dim(), mode, layers, crate::format::spatial_digest(model))
}

/// Sum over weight tensors of the product of their extents.
pub fn count_params<S: AsRef<[usize]>>(shapes: &[S]) -> u64 {
    shapes
        .iter()
        .map(|s| s.as_ref().iter().map(|&d| d as u64).product::<u64>())
        .sum()
}

/// Bounding-box shapes of the kept frequency weights of a spatial model.
pub fn kept_shapes(model: &SpatialModel) -> Vec<Vec<usize>> {
    model
        .linear_layers()
        .map(|l| l.weight.mask().bounding_box().to_vec())
        .collect()
}

/// Full weight shapes of a spatial model.
pub fn full_shapes(model: &SpatialModel) -> Vec<Vec<usize>> {
    model.linear_layers().map(|l| l.weight.dims().to_vec()).collect()
}

/// Multiplications needed to run a batch of `batch` rows.
pub trait CountMultiplies {
    fn count_multiplies(&self, batch: usize) -> MultiplyCount;
}

impl CountMultiplies for SpatialModel {
    /// Dense accounting: `N·M·K` per linear layer, `N·width` per batchnorm,
    /// nothing for activations.
    fn count_multiplies(&self, batch: usize) -> MultiplyCount {
        let n = batch as u64;
        let mut width = self.input_dim();
        let mut out = MultiplyCount::default();
        for layer in self.layers() {
            match layer {
                Layer::Linear(l) => {
                    out.linear += n * (l.in_dim() * l.out_dim()) as u64;
                    width = l.out_dim();
                }
                Layer::FreqBatchNorm(_) => out.affine += n * width as u64,
                _ => {}
            }
        }
        out
    }
}

impl CountMultiplies for FreqModel {
    /// Truncated blocks `N·m′·k′`, affine maps `N·width`, plus the input DCT
    /// (`N·M·m′`) and output IDCT (`N·width·K`) as plain matrix products.
    fn count_multiplies(&self, batch: usize) -> MultiplyCount {
        let n = batch as u64;
        let c = self.multiplies_per_row;
        MultiplyCount {
            linear: n * c.linear,
            affine: n * c.affine,
            transforms: n * c.transforms,
        }
    }
}
