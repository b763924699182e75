//! Zigzag truncation masks and frequency-domain parameters.
//!
//! A weight tensor is stored in the frequency domain (`W̃`) together with a
//! mask of kept low-frequency indices. The spatial weight the network uses is
//! the N-dimensional inverse DCT of the masked tensor.

use ndarray::{s, Array2, ArrayD, ArrayView2, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::dct::{apply_axis, DctPlan};
use crate::error::{shape_err, Error, Result};

/// How a mask decides which frequency index vectors survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskStrategy {
    /// Keep `v` when `Σ vᵢ < threshold`.
    RawL1 { threshold: f64 },
    /// Keep `v` when `Σ vᵢ / Dᵢ < threshold`.
    NormalizedL1 { threshold: f64 },
    /// Keep `v` when `vᵢ < keep[i]` for every axis.
    Rectangular { keep: Vec<usize> },
}

impl MaskStrategy {
    fn keeps(&self, v: &[usize], dims: &[usize]) -> bool {
        match self {
            MaskStrategy::RawL1 { threshold } => (v.iter().sum::<usize>() as f64) < *threshold,
            MaskStrategy::NormalizedL1 { threshold } => {
                let norm: f64 = v.iter().zip(dims).map(|(&a, &d)| a as f64 / d as f64).sum();
                norm < *threshold
            }
            MaskStrategy::Rectangular { keep } => v.iter().zip(keep).all(|(a, k)| a < k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZigzagMask {
    dims: Vec<usize>,
    strategy: MaskStrategy,
    kept: ArrayD<bool>,
    bounding_box: Vec<usize>,
    count: usize,
}

impl ZigzagMask {
    pub fn new(dims: &[usize], strategy: MaskStrategy) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("mask dims must all be >= 1, got {dims:?}")));
        }
        let mut strategy = strategy;
        match &mut strategy {
            MaskStrategy::RawL1 { threshold } | MaskStrategy::NormalizedL1 { threshold } => {
                if !(*threshold >= 0.0) {
                    return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {threshold}")));
                }
            }
            MaskStrategy::Rectangular { keep } => {
                if keep.len() != dims.len() {
                    return Err(Error::InvalidArgument(format!(
                        "rectangular mask has {} keep counts for {} dims",
                        keep.len(),
                        dims.len()
                    )));
                }
                if let Some((k, d)) = keep.iter().zip(dims).find(|(k, d)| k > d) {
                    return Err(Error::InvalidArgument(format!("keep count {k} exceeds dimension {d}")));
                }
            }
        }
        // Thresholds past the largest index norm keep everything; store the
        // smallest such value so the strategy stays finite.
        match &mut strategy {
            MaskStrategy::RawL1 { threshold } => {
                let cap = dims.iter().map(|d| d - 1).sum::<usize>() as f64 + 1.0;
                *threshold = threshold.min(cap);
            }
            MaskStrategy::NormalizedL1 { threshold } => {
                *threshold = threshold.min(dims.len() as f64);
            }
            MaskStrategy::Rectangular { .. } => {}
        }
        let kept = ArrayD::from_shape_fn(IxDyn(dims), |idx| strategy.keeps(idx.slice(), dims));
        let mut bounding_box = vec![0; dims.len()];
        let mut count = 0;
        for (idx, &k) in kept.indexed_iter() {
            if k {
                count += 1;
                for (b, &v) in bounding_box.iter_mut().zip(idx.slice()) {
                    *b = (*b).max(v + 1);
                }
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            strategy,
            kept,
            bounding_box,
            count,
        })
    }

    /// Mask keeping every index.
    pub fn full(dims: &[usize]) -> Result<Self> {
        Self::new(dims, MaskStrategy::Rectangular { keep: dims.to_vec() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strategy(&self) -> &MaskStrategy {
        &self.strategy
    }

    pub fn kept_count(&self) -> usize {
        self.count
    }

    pub fn is_full(&self) -> bool {
        self.count == self.kept.len()
    }

    /// Per-axis maxima of kept indices plus one; all zeros for an empty mask.
    pub fn bounding_box(&self) -> &[usize] {
        &self.bounding_box
    }

    pub fn contains(&self, v: &[usize]) -> bool {
        self.kept.get(IxDyn(v)).copied().unwrap_or(false)
    }

    pub fn kept(&self) -> &ArrayD<bool> {
        &self.kept
    }

    pub fn kept_indices(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        self.kept
            .indexed_iter()
            .filter(|(_, &k)| k)
            .map(|(idx, _)| idx.slice().to_vec())
    }

    /// Zeroes every entry outside the kept set.
    pub fn project(&self, t: &mut ArrayD<f64>) -> Result<()> {
        if t.shape() != self.dims.as_slice() {
            return shape_err(format!("tensor shape {:?} does not match mask dims {:?}", t.shape(), self.dims));
        }
        ndarray::Zip::from(t).and(&self.kept).for_each(|v, &k| {
            if !k {
                *v = 0.0;
            }
        });
        Ok(())
    }

    fn kept_2d(&self) -> ArrayView2<'_, bool> {
        self.kept.view().into_dimensionality().expect("2-D mask")
    }
}

/// Convenience wrapper matching [`ZigzagMask::new`].
pub fn build_mask(dims: &[usize], strategy: MaskStrategy) -> Result<ZigzagMask> {
    ZigzagMask::new(dims, strategy)
}

pub fn kept_count(mask: &ZigzagMask) -> usize {
    mask.kept_count()
}

/// A frequency-domain weight tensor and its truncation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqParam {
    freq: ArrayD<f64>,
    mask: ZigzagMask,
}

impl FreqParam {
    /// Entries outside the mask are zeroed on construction.
    pub fn new(mut freq: ArrayD<f64>, mask: ZigzagMask) -> Result<Self> {
        mask.project(&mut freq)?;
        Ok(Self { freq, mask })
    }

    pub fn freq(&self) -> &ArrayD<f64> {
        &self.freq
    }

    pub fn mask(&self) -> &ZigzagMask {
        &self.mask
    }

    pub fn dims(&self) -> &[usize] {
        self.mask.dims()
    }

    pub fn set_mask(&mut self, mask: ZigzagMask) -> Result<()> {
        mask.project(&mut self.freq)?;
        self.mask = mask;
        Ok(())
    }

    /// Applies `f` to the frequency tensor and re-projects onto the mask.
    pub fn update(&mut self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.freq);
        self.mask.project(&mut self.freq).expect("shape unchanged");
    }

    fn as_matrix(&self) -> Result<ArrayView2<'_, f64>> {
        self.freq
            .view()
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("expected a 2-D parameter, got dims {:?}", self.dims())))
    }

    /// Spatial weight `(D_M⁻¹)ᵀ·W̃·D_K⁻¹` of a 2-D parameter, touching only
    /// the mask's bounding box.
    pub fn spatialize_matrix(&self, rows: &DctPlan, cols: &DctPlan) -> Result<Array2<f64>> {
        let w = self.as_matrix()?;
        let (m, k) = w.dim();
        if rows.size() != m || cols.size() != k {
            return shape_err(format!("plans ({}, {}) do not match parameter ({m}, {k})", rows.size(), cols.size()));
        }
        let (mk, kk) = (self.mask.bounding_box[0], self.mask.bounding_box[1]);
        if mk == 0 || kk == 0 {
            return Ok(Array2::zeros((m, k)));
        }
        let block = w.slice(s![..mk, ..kk]);
        let right = block.dot(&cols.inverse_basis().slice(s![..kk, ..]));
        Ok(rows.inverse_basis().slice(s![..mk, ..]).t().dot(&right))
    }

    /// Gradient with respect to `W̃` given the gradient with respect to the
    /// spatial matrix: `mask ⊙ (D_M⁻¹·G·(D_K⁻¹)ᵀ)`.
    pub fn adjoint_matrix(&self, grad_spatial: &ArrayView2<'_, f64>, rows: &DctPlan, cols: &DctPlan) -> Result<Array2<f64>> {
        let dims = self.dims();
        if grad_spatial.dim() != (dims[0], dims[1]) || rows.size() != dims[0] || cols.size() != dims[1] {
            return shape_err(format!("gradient shape {:?} does not match parameter {dims:?}", grad_spatial.dim()));
        }
        let mut out = Array2::zeros((dims[0], dims[1]));
        let (mk, kk) = (self.mask.bounding_box[0], self.mask.bounding_box[1]);
        if mk == 0 || kk == 0 {
            return Ok(out);
        }
        let left = rows.inverse_basis().slice(s![..mk, ..]).dot(grad_spatial);
        let block = left.dot(&cols.inverse_basis().slice(s![..kk, ..]).t());
        let kept = self.mask.kept_2d();
        ndarray::Zip::from(out.slice_mut(s![..mk, ..kk]))
            .and(&block)
            .and(kept.slice(s![..mk, ..kk]))
            .for_each(|o, &g, &k| {
                if k {
                    *o = g;
                }
            });
        Ok(out)
    }
}

fn check_plans(dims: &[usize], plans: &[&DctPlan]) -> Result<()> {
    if plans.len() != dims.len() || plans.iter().zip(dims).any(|(p, &d)| p.size() != d) {
        let sizes: Vec<usize> = plans.iter().map(|p| p.size()).collect();
        return shape_err(format!("plan sizes {sizes:?} do not match dims {dims:?}"));
    }
    Ok(())
}

/// `IDCTᴺ(W̃ ⊙ mask)` for a parameter of any rank.
pub fn spatialize(p: &FreqParam, plans: &[&DctPlan]) -> Result<ArrayD<f64>> {
    check_plans(p.dims(), plans)?;
    let mut t = p.freq.clone();
    p.mask.project(&mut t)?;
    for (axis, plan) in plans.iter().enumerate() {
        t = apply_axis(t.view(), axis, plan.inverse_basis().view());
    }
    Ok(t)
}

/// Transpose of the [`spatialize`] map followed by mask projection.
pub fn grad_adjoint(grad_spatial: &ArrayD<f64>, mask: &ZigzagMask, plans: &[&DctPlan]) -> Result<ArrayD<f64>> {
    if grad_spatial.shape() != mask.dims() {
        return shape_err(format!("gradient shape {:?} does not match mask dims {:?}", grad_spatial.shape(), mask.dims()));
    }
    check_plans(mask.dims(), plans)?;
    let mut t = grad_spatial.clone();
    for (axis, plan) in plans.iter().enumerate() {
        t = apply_axis(t.view(), axis, plan.inverse_basis().t());
    }
    mask.project(&mut t)?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayPolicy {
    Linear,
    /// `ε_final + (ε_init − ε_final)·exp(−5·epoch/decay_end)` until `decay_end`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub eps_init: f64,
    pub eps_final: f64,
    pub decay_end: usize,
    pub policy: DecayPolicy,
}

impl ScheduleConfig {
    pub fn new(eps_init: f64, eps_final: f64, decay_end: usize, policy: DecayPolicy) -> Result<Self> {
        if !(eps_final >= 0.0) || !(eps_init >= eps_final) {
            return Err(Error::InvalidConfig(format!(
                "schedule needs eps_init >= eps_final >= 0, got {eps_init} and {eps_final}"
            )));
        }
        if decay_end == 0 {
            return Err(Error::InvalidConfig("decay_end must be >= 1".into()));
        }
        Ok(Self {
            eps_init,
            eps_final,
            decay_end,
            policy,
        })
    }

    /// A schedule that stays at `eps` for every epoch.
    pub fn constant(eps: f64) -> Self {
        Self {
            eps_init: eps,
            eps_final: eps,
            decay_end: 1,
            policy: DecayPolicy::Linear,
        }
    }
}

/// Truncation threshold for `epoch`: decays from `eps_init` at epoch 0 to
/// `eps_final` at `decay_end`, then stays flat for fine-tuning.
pub fn threshold_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch >= cfg.decay_end || cfg.eps_init == cfg.eps_final {
        return cfg.eps_final;
    }
    let progress = epoch as f64 / cfg.decay_end as f64;
    let span = cfg.eps_init - cfg.eps_final;
    match cfg.policy {
        DecayPolicy::Linear => cfg.eps_init - span * progress,
        DecayPolicy::Exponential => cfg.eps_final + span * (-5.0 * progress).exp(),
    }
}

/// Mask geometry used for every weight of a network during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskFamily {
    RawL1,
    NormalizedL1,
    /// Final per-layer keep counts. The scheduled threshold is read as a
    /// fraction in `[0, 1]` of the way from these counts back to the full
    /// dimensions.
    Rectangular { keeps: Vec<Vec<usize>> },
}

impl MaskFamily {
    pub fn strategy(&self, layer: usize, dims: &[usize], threshold: f64) -> Result<MaskStrategy> {
        Ok(match self {
            MaskFamily::RawL1 => MaskStrategy::RawL1 { threshold },
            MaskFamily::NormalizedL1 => MaskStrategy::NormalizedL1 { threshold },
            MaskFamily::Rectangular { keeps } => {
                let last = keeps.get(layer).ok_or_else(|| {
                    Error::InvalidConfig(format!("no rectangular keep counts given for linear layer {layer}"))
                })?;
                if last.len() != dims.len() {
                    return Err(Error::InvalidConfig(format!(
                        "linear layer {layer}: keep counts {last:?} do not match dims {dims:?}"
                    )));
                }
                let frac = threshold.clamp(0.0, 1.0);
                let keep = last
                    .iter()
                    .zip(dims)
                    .map(|(&k, &d)| {
                        let k = k.min(d);
                        k + (frac * (d - k) as f64).round() as usize
                    })
                    .collect();
                MaskStrategy::Rectangular { keep }
            }
        })
    }

    pub fn mask(&self, layer: usize, dims: &[usize], threshold: f64) -> Result<ZigzagMask> {
        ZigzagMask::new(dims, self.strategy(layer, dims, threshold)?)
    }
}
