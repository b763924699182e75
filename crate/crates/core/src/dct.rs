//! Unnormalized DCT-II along tensor axes.
//!
//! A length-`M` fiber `x` (treated as a row vector) maps to `x·D` with
//! `D(i, j) = cos[(π/M)(i + ½)j]`. No orthonormal scaling is applied, so
//! `D` is not orthogonal: `DᵀD = Λ = diag(M, M/2, …, M/2)` while `D·Dᵀ` is
//! dense. The inverse is the exact matrix inverse `D⁻¹ = Λ⁻¹·Dᵀ`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array, Array1, Array2, ArrayBase, ArrayD, ArrayView2, ArrayViewD, Data, Dimension, IxDyn};

use crate::error::{shape_err, Error, Result};

/// Precomputed basis algebra for one signal length.
#[derive(Debug, Clone)]
pub struct DctPlan {
    size: usize,
    forward: Array2<f64>,
    inverse: Array2<f64>,
    gram: Array1<f64>,
    t_correction: Array1<f64>,
}

impl DctPlan {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("DCT size must be at least 1".into()));
        }
        let m = size as f64;
        let forward = Array2::from_shape_fn((size, size), |(i, j)| {
            (PI / m * (i as f64 + 0.5) * j as f64).cos()
        });
        // Rows of the inverse are indexed by frequency, columns by sample.
        let inverse = Array2::from_shape_fn((size, size), |(j, i)| {
            let c = if j == 0 { 0.5 } else { 1.0 };
            2.0 / m * c * (PI / m * (i as f64 + 0.5) * j as f64).cos()
        });
        let gram = Array1::from_shape_fn(size, |j| if j == 0 { m } else { m / 2.0 });
        let mut t_correction = Array1::ones(size);
        t_correction[0] = inverse[[0, 0]] / 2.0;
        Ok(Self {
            size,
            forward,
            inverse,
            gram,
            t_correction,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `D`, so that `DCT(x) = x·D`.
    pub fn forward_basis(&self) -> &Array2<f64> {
        &self.forward
    }

    /// `D⁻¹`, so that `IDCT(X) = X·D⁻¹`.
    pub fn inverse_basis(&self) -> &Array2<f64> {
        &self.inverse
    }

    /// Diagonal of `DᵀD`.
    pub fn gram_diagonal(&self) -> &Array1<f64> {
        &self.gram
    }

    /// Identity except for the DC entry, which is `D⁻¹(0,0)/2`.
    pub fn t_correction(&self) -> &Array1<f64> {
        &self.t_correction
    }
}

/// Plans keyed by size, built once and shared.
#[derive(Debug, Clone, Default)]
pub struct PlanCache {
    plans: BTreeMap<usize, Arc<DctPlan>>,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut cache = Self::new();
        for s in sizes {
            cache.get_or_build(s)?;
        }
        Ok(cache)
    }

    pub fn get_or_build(&mut self, size: usize) -> Result<Arc<DctPlan>> {
        if let Some(p) = self.plans.get(&size) {
            return Ok(p.clone());
        }
        let plan = Arc::new(DctPlan::new(size)?);
        self.plans.insert(size, plan.clone());
        Ok(plan)
    }

    pub fn get(&self, size: usize) -> Result<&DctPlan> {
        self.plans
            .get(&size)
            .map(|p| p.as_ref())
            .ok_or_else(|| Error::Shape(format!("no DCT plan cached for size {size}")))
    }

    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.plans.keys().copied()
    }
}

/// Right-multiplies every fiber along `axis` by `matrix` (`M × M'`).
pub(crate) fn apply_axis(t: ArrayViewD<'_, f64>, axis: usize, matrix: ArrayView2<'_, f64>) -> ArrayD<f64> {
    let ndim = t.ndim();
    let mut perm: Vec<usize> = (0..ndim).filter(|&a| a != axis).collect();
    perm.push(axis);
    let moved = t.permuted_axes(perm.clone());
    let moved = moved.as_standard_layout();
    let len = moved.shape()[ndim - 1];
    let rest = moved.len() / len;
    let flat = moved
        .view()
        .into_shape_with_order((rest, len))
        .expect("standard layout reshapes");
    let out = flat.dot(&matrix);
    let mut shape = moved.shape().to_vec();
    shape[ndim - 1] = matrix.ncols();
    let out = out
        .into_shape_with_order(IxDyn(&shape))
        .expect("row count preserved");
    let mut inverse = vec![0; ndim];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    out.permuted_axes(inverse).as_standard_layout().into_owned()
}

fn check_axis(shape: &[usize], axis: usize, size: usize) -> Result<()> {
    match shape.get(axis) {
        None => shape_err(format!("axis {axis} out of range for rank {}", shape.len())),
        Some(&n) if n != size => shape_err(format!("axis {axis} has extent {n}, plan size is {size}")),
        Some(_) => Ok(()),
    }
}

fn transform_axis<S, D>(t: &ArrayBase<S, D>, axis: usize, plan: &DctPlan, inverse: bool) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    check_axis(t.shape(), axis, plan.size)?;
    let basis = if inverse { &plan.inverse } else { &plan.forward };
    let out = apply_axis(t.view().into_dyn(), axis, basis.view());
    Ok(out.into_dimensionality::<D>().expect("rank preserved"))
}

/// Forward DCT of every fiber along `axis`.
pub fn dct_axis<S, D>(t: &ArrayBase<S, D>, axis: usize, plan: &DctPlan) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    transform_axis(t, axis, plan, false)
}

/// Inverse DCT of every fiber along `axis`.
pub fn idct_axis<S, D>(t: &ArrayBase<S, D>, axis: usize, plan: &DctPlan) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    transform_axis(t, axis, plan, true)
}

fn transform_nd<S, D>(t: &ArrayBase<S, D>, plans: &[&DctPlan], inverse: bool) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if plans.len() != t.ndim() {
        return shape_err(format!("{} plans supplied for a rank-{} tensor", plans.len(), t.ndim()));
    }
    let mut out = t.to_owned();
    for (axis, plan) in plans.iter().enumerate() {
        out = transform_axis(&out, axis, plan, inverse)?;
    }
    Ok(out)
}

/// Separable N-dimensional forward DCT, one plan per axis.
pub fn dct_nd<S, D>(t: &ArrayBase<S, D>, plans: &[&DctPlan]) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    transform_nd(t, plans, false)
}

pub fn idct_nd<S, D>(t: &ArrayBase<S, D>, plans: &[&DctPlan]) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    transform_nd(t, plans, true)
}

/// DCT of each row of a matrix: `x·D`.
pub fn dct_rows<S: Data<Elem = f64>>(x: &ArrayBase<S, ndarray::Ix2>, plan: &DctPlan) -> Result<Array2<f64>> {
    dct_axis(x, 1, plan)
}

/// IDCT of each row of a matrix: `X·D⁻¹`.
pub fn idct_rows<S: Data<Elem = f64>>(x: &ArrayBase<S, ndarray::Ix2>, plan: &DctPlan) -> Result<Array2<f64>> {
    idct_axis(x, 1, plan)
}
