//! Descriptor correlation along epipolar grids, spatial softmax and
//! soft-argmax localization.

use nalgebra::{DMatrix, Vector2};
use thiserror::Error;

use crate::geometry::EpipolarSampleGrid;
use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("invalid descriptor field: {0}")]
    InvalidField(String),
    #[error("sample ({u}, {v}) lies outside the descriptor field")]
    OutOfBounds { u: f64, v: f64 },
    #[error("descriptor dimension mismatch: field has {expected}, anchor has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("correlation map has no valid samples")]
    EmptyMap,
    #[error("probability map has {got} entries, grid has {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Tolerance on the unit-norm check of every grid descriptor.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Dense unit descriptors on a grid with stride `stride` relative to image
/// pixels. Grid node `(row, col)` sits at image pixel `(col * stride, row * stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField<T: Real> {
    height: usize,
    width: usize,
    dim: usize,
    stride: usize,
    values: Vec<T>,
}

impl<T: Real> DescriptorField<T> {
    pub fn new(height: usize, width: usize, dim: usize, stride: usize, values: Vec<T>) -> Result<Self, MatchError> {
        if dim < 2 {
            return Err(MatchError::InvalidField(format!("descriptor dimension {dim} < 2")));
        }
        if height == 0 || width == 0 || stride == 0 {
            return Err(MatchError::InvalidField("grid size and stride must be non-zero".into()));
        }
        if values.len() != height * width * dim {
            return Err(MatchError::InvalidField(format!(
                "{} values for a {}x{}x{} field",
                values.len(),
                height,
                width,
                dim
            )));
        }
        for (i, d) in values.chunks_exact(dim).enumerate() {
            let norm = d.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(MatchError::InvalidField(format!(
                    "descriptor at node ({}, {}) has norm {norm}",
                    i / width,
                    i % width
                )));
            }
        }
        Ok(Self { height, width, dim, stride, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn node(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Four grid nodes and bilinear weights for image pixel `p`, or `None`
    /// when `p / stride` falls outside the grid.
    fn bilinear_taps(&self, p: &Vector2<T>) -> Option<[(usize, T); 4]> {
        let s = T::from_usize(self.stride)?;
        let gx = p.x / s;
        let gy = p.y / s;
        let max_x = T::from_usize(self.width - 1)?;
        let max_y = T::from_usize(self.height - 1)?;
        if !(gx >= T::zero() && gy >= T::zero() && gx <= max_x && gy <= max_y) {
            return None;
        }
        let x0 = gx.floor();
        let y0 = gy.floor();
        let fx = gx - x0;
        let fy = gy - y0;
        let c0 = x0.as_f64() as usize;
        let r0 = y0.as_f64() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let one = T::one();
        Some([
            (r0 * self.width + c0, (one - fx) * (one - fy)),
            (r0 * self.width + c1, fx * (one - fy)),
            (r1 * self.width + c0, (one - fx) * fy),
            (r1 * self.width + c1, fx * fy),
        ])
    }

    pub fn contains(&self, p: &Vector2<T>) -> bool {
        self.bilinear_taps(p).is_some()
    }

    fn dot_node(&self, node: usize, desc: &[T]) -> T {
        let d = &self.values[node * self.dim..(node + 1) * self.dim];
        d.iter().zip(desc).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }
}

/// Bilinearly interpolated descriptor at image pixel `p`; not renormalized.
pub fn bilinear_sample<T: Real>(field: &DescriptorField<T>, p: &Vector2<T>) -> Result<Vec<T>, MatchError> {
    let taps = field
        .bilinear_taps(p)
        .ok_or(MatchError::OutOfBounds { u: p.x.as_f64(), v: p.y.as_f64() })?;
    let mut out = vec![T::zero(); field.dim];
    for (node, w) in taps {
        if w == T::zero() {
            continue;
        }
        let d = &field.values[node * field.dim..(node + 1) * field.dim];
        for (o, &v) in out.iter_mut().zip(d) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Raw correlation of one anchor descriptor along an epipolar grid.
///
/// Samples that are invalid in the grid, or fall outside the field, carry the
/// `-inf` sentinel and `false` in the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap<T: Real> {
    values: Vec<T>,
    valid: Vec<bool>,
    grid: EpipolarSampleGrid<T>,
}

impl<T: Real> CorrelationMap<T> {
    /// Builds a map from explicit values; entries that are not finite or are
    /// masked out by `grid` become invalid.
    pub fn from_values(values: Vec<T>, grid: EpipolarSampleGrid<T>) -> Result<Self, MatchError> {
        if values.len() != grid.len() {
            return Err(MatchError::ShapeMismatch { expected: grid.len(), got: values.len() });
        }
        let valid: Vec<bool> = values
            .iter()
            .zip(grid.valid_mask())
            .map(|(v, &m)| m && v.is_finite_val())
            .collect();
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(v, &m)| if m { v } else { T::neg_infinity() })
            .collect();
        Ok(Self { values, valid, grid })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn grid(&self) -> &EpipolarSampleGrid<T> {
        &self.grid
    }

    pub fn n_cols(&self) -> usize {
        self.grid.n_cols()
    }

    pub fn n_rows(&self) -> usize {
        self.grid.n_rows()
    }

    /// First maximum over valid samples in storage order.
    pub fn argmax(&self) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for (i, (&v, &m)) in self.values.iter().zip(&self.valid).enumerate() {
            if m && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best
    }
}

pub fn correlate<T: Real>(
    anchor_desc: &[T],
    field: &DescriptorField<T>,
    grid: &EpipolarSampleGrid<T>,
) -> Result<CorrelationMap<T>, MatchError> {
    if anchor_desc.len() != field.dim {
        return Err(MatchError::DimensionMismatch { expected: field.dim, got: anchor_desc.len() });
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut valid = Vec::with_capacity(grid.len());
    for (p, &ok) in grid.samples().iter().zip(grid.valid_mask()) {
        let taps = if ok { field.bilinear_taps(p) } else { None };
        match taps {
            Some(taps) => {
                let c = taps.iter().fold(T::zero(), |acc, &(node, w)| {
                    if w == T::zero() {
                        acc
                    } else {
                        acc + w * field.dot_node(node, anchor_desc)
                    }
                });
                values.push(c);
                valid.push(true);
            }
            None => {
                values.push(T::neg_infinity());
                valid.push(false);
            }
        }
    }
    Ok(CorrelationMap { values, valid, grid: grid.clone() })
}

/// Max-shifted softmax over the valid samples; invalid samples get 0.
pub fn spatial_softmax<T: Real>(map: &CorrelationMap<T>) -> Result<Vec<T>, MatchError> {
    softmax_masked(&map.values, &map.valid)
}

fn softmax_masked<T: Real>(values: &[T], valid: &[bool]) -> Result<Vec<T>, MatchError> {
    let max = values
        .iter()
        .zip(valid)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .reduce(|a, b| if b > a { b } else { a })
        .ok_or(MatchError::EmptyMap)?;
    let mut out: Vec<T> = values
        .iter()
        .zip(valid)
        .map(|(&v, &m)| if m { (v - max).exp() } else { T::zero() })
        .collect();
    let total = out.iter().fold(T::zero(), |acc, &v| acc + v);
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Probability-weighted mean of the grid's sample coordinates.
pub fn soft_argmax<T: Real>(probabilities: &[T], grid: &EpipolarSampleGrid<T>) -> Result<Vector2<T>, MatchError> {
    if probabilities.len() != grid.len() {
        return Err(MatchError::ShapeMismatch { expected: grid.len(), got: probabilities.len() });
    }
    let mut acc = Vector2::zeros();
    for (&p, s) in probabilities.iter().zip(grid.samples()) {
        if p != T::zero() {
            acc += s * p;
        }
    }
    Ok(acc)
}

/// Conditioning applied to raw correlations before the softmax.
///
/// `gain` is a fixed affine scale standing in for an inference-time batch
/// normalization (its shift cancels in the softmax). `gain = 1` with the
/// clamp off is the plain softmax of the raw correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig<T: Real> {
    pub gain: T,
    pub clamp_correlation_nonneg: bool,
}

impl<T: Real> Default for MatchConfig<T> {
    fn default() -> Self {
        Self { gain: T::one(), clamp_correlation_nonneg: false }
    }
}

impl<T: Real> MatchConfig<T> {
    pub fn condition(&self, map: &CorrelationMap<T>) -> CorrelationMap<T> {
        let values = map
            .values
            .iter()
            .zip(&map.valid)
            .map(|(&v, &m)| {
                if !m {
                    T::neg_infinity()
                } else if self.clamp_correlation_nonneg && v < T::zero() {
                    T::zero()
                } else {
                    v * self.gain
                }
            })
            .collect();
        CorrelationMap { values, valid: map.valid.clone(), grid: map.grid.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T: Real> {
    /// Soft-argmax position in the auxiliary image.
    pub position: Vector2<T>,
    /// Maximum raw correlation, used as the view's triangulation weight.
    pub confidence: T,
    /// Storage index of the (first) raw maximum.
    pub confidence_index: usize,
    /// Normalized map, same layout as the grid.
    pub probabilities: Vec<T>,
}

pub fn match_point<T: Real>(
    anchor_desc: &[T],
    field: &DescriptorField<T>,
    grid: &EpipolarSampleGrid<T>,
    config: &MatchConfig<T>,
) -> Result<MatchResult<T>, MatchError> {
    let raw = correlate(anchor_desc, field, grid)?;
    match_from_correlation(&raw, config)
}

pub fn match_from_correlation<T: Real>(
    raw: &CorrelationMap<T>,
    config: &MatchConfig<T>,
) -> Result<MatchResult<T>, MatchError> {
    let (confidence_index, confidence) = raw.argmax().ok_or(MatchError::EmptyMap)?;
    let probabilities = spatial_softmax(&config.condition(raw))?;
    let position = soft_argmax(&probabilities, &raw.grid)?;
    Ok(MatchResult { position, confidence, confidence_index, probabilities })
}

/// Jacobian of the soft-argmax position with respect to every raw
/// correlation value: a `2 x n` matrix with zero columns for invalid samples.
///
/// `dx/dC_p = gain * P_p * (r_p - x)`, masked by the clamp when enabled.
pub fn soft_argmax_jacobian<T: Real>(
    raw: &CorrelationMap<T>,
    config: &MatchConfig<T>,
) -> Result<(Vector2<T>, DMatrix<T>), MatchError> {
    let probabilities = spatial_softmax(&config.condition(raw))?;
    let x = soft_argmax(&probabilities, &raw.grid)?;
    let n = raw.values.len();
    let mut jac = DMatrix::zeros(2, n);
    for i in 0..n {
        if !raw.valid[i] {
            continue;
        }
        if config.clamp_correlation_nonneg && raw.values[i] < T::zero() {
            continue;
        }
        let d = (raw.grid.samples()[i] - x) * (probabilities[i] * config.gain);
        jac[(0, i)] = d.x;
        jac[(1, i)] = d.y;
    }
    Ok((x, jac))
}
