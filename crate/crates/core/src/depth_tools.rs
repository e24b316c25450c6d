//! Sparse depth imputation, a plumbing densifier, training loss terms and
//! depth evaluation metrics.

use nalgebra::Vector2;
use thiserror::Error;

use crate::real::{pairwise_mean, pairwise_sum, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("invalid depth image: {0}")]
    InvalidImage(String),
    #[error("point {index} has non-positive depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("resolution mismatch: {0}x{1} vs {2}x{3}")]
    ResolutionMismatch(usize, usize, usize, usize),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("no jointly valid pixels")]
    NoJointlyValidPixels,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} at cell {cell} outside [0, {max}]")]
    LabelOutOfRange { cell: usize, label: usize, max: usize },
    #[error("pyramid has {got} levels, configuration expects {expected}")]
    ScaleMismatch { expected: usize, got: usize },
    #[error("loss component {0} is not finite")]
    NonFinite(&'static str),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// Depth in meters with a validity mask; invalid entries hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage<T: Real> {
    width: usize,
    height: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> DepthImage<T> {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![T::zero(); width * height], valid: vec![false; width * height] }
    }

    /// Every pixel valid.
    pub fn dense(width: usize, height: usize, values: Vec<T>) -> Result<Self, DepthError> {
        let valid = vec![true; values.len()];
        Self::new(width, height, values, valid)
    }

    pub fn new(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self, DepthError> {
        if values.len() != width * height || valid.len() != values.len() {
            return Err(DepthError::InvalidImage(format!(
                "{} values / {} mask entries for {}x{}",
                values.len(),
                valid.len(),
                width,
                height
            )));
        }
        for (i, (&v, &m)) in values.iter().zip(&valid).enumerate() {
            if m && !(v.is_finite_val() && v > T::zero()) {
                return Err(DepthError::InvalidImage(format!("valid pixel {i} has depth {v}")));
            }
            if !m && v != T::zero() {
                return Err(DepthError::InvalidImage(format!("invalid pixel {i} holds {v}, expected 0")));
            }
        }
        Ok(Self { width, height, values, valid })
    }

    /// Treats every finite positive value as valid and everything else as a hole.
    pub fn from_raw(width: usize, height: usize, raw: Vec<T>) -> Result<Self, DepthError> {
        let valid: Vec<bool> = raw.iter().map(|v| v.is_finite_val() && *v > T::zero()).collect();
        let values = raw.into_iter().zip(&valid).map(|(v, &m)| if m { v } else { T::zero() }).collect();
        Self::new(width, height, values, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> Option<T> {
        let i = row * self.width + col;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn set(&mut self, i: usize, v: T) {
        self.values[i] = v;
        self.valid[i] = true;
    }

    pub fn map_values<U: Real>(&self, f: impl Fn(T) -> U) -> DepthImage<U> {
        DepthImage {
            width: self.width,
            height: self.height,
            values: self.values.iter().zip(&self.valid).map(|(&v, &m)| if m { f(v) } else { U::zero() }).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Grayscale intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T: Real> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePoint<T: Real> {
    pub pixel: Vector2<T>,
    pub depth: T,
    pub confidence: T,
}

/// Imputed sparse depth plus the routing record mapping each pixel back to
/// the source point written there.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth<T: Real> {
    pub image: DepthImage<T>,
    /// Source index per pixel (row-major), `None` for holes.
    pub routing: Vec<Option<usize>>,
    /// Destination pixel per source point, `None` if it lost a collision or
    /// fell outside the image.
    pub destinations: Vec<Option<usize>>,
}

impl<T: Real> SparseDepth<T> {
    /// Routes a per-pixel gradient back to the source points; points that do
    /// not own a pixel receive 0.
    pub fn backpropagate(&self, pixel_grad: &[T]) -> Result<Vec<T>, DepthError> {
        if pixel_grad.len() != self.routing.len() {
            return Err(DepthError::LengthMismatch(pixel_grad.len(), self.routing.len()));
        }
        Ok(self.destinations.iter().map(|d| d.map_or(T::zero(), |i| pixel_grad[i])).collect())
    }
}

/// Round to nearest with ties toward +infinity.
fn round_half_up<T: Real>(x: T) -> T {
    (x + T::lit(0.5)).floor()
}

/// Writes each point's depth at its rounded pixel. On collisions the higher
/// confidence wins, then the smaller depth, then the earlier point.
pub fn impute_sparse_depth<T: Real>(
    points: &[SparsePoint<T>],
    width: usize,
    height: usize,
) -> Result<SparseDepth<T>, DepthError> {
    let mut image = DepthImage::invalid(width, height);
    let mut routing: Vec<Option<usize>> = vec![None; width * height];
    let mut destinations = vec![None; points.len()];
    for (index, p) in points.iter().enumerate() {
        if !(p.depth > T::zero() && p.depth.is_finite_val()) {
            return Err(DepthError::NonPositiveDepth { index, depth: p.depth.as_f64() });
        }
        let u = round_half_up(p.pixel.x);
        let v = round_half_up(p.pixel.y);
        if !(u >= T::zero() && v >= T::zero()) {
            continue;
        }
        let (col, row) = (u.as_f64() as usize, v.as_f64() as usize);
        if col >= width || row >= height {
            continue;
        }
        let i = row * width + col;
        let wins = match routing[i] {
            None => true,
            Some(other) => {
                let q = &points[other];
                p.confidence > q.confidence || (p.confidence == q.confidence && p.depth < q.depth)
            }
        };
        if wins {
            if let Some(other) = routing[i] {
                destinations[other] = None;
            }
            routing[i] = Some(index);
            destinations[index] = Some(i);
            image.set(i, p.depth);
        }
    }
    Ok(SparseDepth { image, routing, destinations })
}

/// Fills every hole with the inverse-distance-weighted mean of its
/// `k_neighbors` nearest valid pixels (ties by row-major index).
pub fn densify_idw<T: Real>(sparse: &DepthImage<T>, power: T, k_neighbors: usize) -> Result<DepthImage<T>, DepthError> {
    let sources: Vec<(usize, usize, T)> = (0..sparse.height)
        .flat_map(|r| (0..sparse.width).map(move |c| (r, c)))
        .filter_map(|(r, c)| sparse.get(r, c).map(|d| (r, c, d)))
        .collect();
    if sources.is_empty() {
        return Err(DepthError::NoValidPixels);
    }
    let k = k_neighbors.max(1).min(sources.len());
    let mut out = sparse.clone();
    let mut dists: Vec<(i64, usize)> = Vec::with_capacity(sources.len());
    for row in 0..sparse.height {
        for col in 0..sparse.width {
            let i = row * sparse.width + col;
            if sparse.valid[i] {
                continue;
            }
            dists.clear();
            for (s, &(r, c, _)) in sources.iter().enumerate() {
                let dr = r as i64 - row as i64;
                let dc = c as i64 - col as i64;
                dists.push((dr * dr + dc * dc, s));
            }
            dists.select_nth_unstable(k - 1);
            let mut nearest = dists[..k].to_vec();
            nearest.sort_unstable();
            let mut weights = Vec::with_capacity(k);
            let mut weighted = Vec::with_capacity(k);
            // Weights relative to the nearest source, so a single source is reproduced exactly.
            let d_near = T::from_i64(nearest[0].0).unwrap().sqrt();
            for &(d2, s) in &nearest {
                let d = T::from_i64(d2).unwrap().sqrt();
                let w = (d_near / d).powf(power);
                weights.push(w);
                weighted.push(w * sources[s].2);
            }
            out.set(i, pairwise_sum(&weighted) / pairwise_sum(&weights));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport<T: Real> {
    pub abs_rel: T,
    pub abs_diff: T,
    pub sq_rel: T,
    pub rmse: T,
    pub rmse_log: T,
    pub delta1: T,
    pub delta2: T,
    pub delta3: T,
    pub n_valid: usize,
}

impl<T: Real> MetricsReport<T> {
    pub const CSV_HEADER: &'static str = "n_valid,abs_rel,abs_diff,sq_rel,rmse,rmse_log,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n_valid,
            self.abs_rel,
            self.abs_diff,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }

    /// Header line and one data line, each newline terminated.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Standard depth metrics over pixels valid in both images. Reductions use
/// pairwise summation in row-major order.
pub fn depth_metrics<T: Real>(pred: &DepthImage<T>, gt: &DepthImage<T>) -> Result<MetricsReport<T>, DepthError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(DepthError::ResolutionMismatch(pred.width, pred.height, gt.width, gt.height));
    }
    let n = pred.values.len();
    let mut abs_rel = Vec::new();
    let mut abs_diff = Vec::new();
    let mut sq_rel = Vec::new();
    let mut sq = Vec::new();
    let mut sq_log = Vec::new();
    let mut d = [Vec::new(), Vec::new(), Vec::new()];
    let thresholds = [T::lit(1.25), T::lit(1.25 * 1.25), T::lit(1.25 * 1.25 * 1.25)];
    for i in 0..n {
        if !(pred.valid[i] && gt.valid[i]) {
            continue;
        }
        let (p, g) = (pred.values[i], gt.values[i]);
        let diff = p - g;
        abs_rel.push(diff.abs() / g);
        abs_diff.push(diff.abs());
        sq_rel.push(diff * diff / g);
        sq.push(diff * diff);
        let l = p.ln() - g.ln();
        sq_log.push(l * l);
        let ratio = if p / g > g / p { p / g } else { g / p };
        for (slot, th) in d.iter_mut().zip(&thresholds) {
            slot.push(if ratio < *th { T::one() } else { T::zero() });
        }
    }
    let mean = |v: &[T]| pairwise_mean(v).ok_or(DepthError::NoJointlyValidPixels);
    Ok(MetricsReport {
        abs_rel: mean(&abs_rel)?,
        abs_diff: mean(&abs_diff)?,
        sq_rel: mean(&sq_rel)?,
        rmse: mean(&sq)?.sqrt(),
        rmse_log: mean(&sq_log)?.sqrt(),
        delta1: mean(&d[0])?,
        delta2: mean(&d[1])?,
        delta3: mean(&d[2])?,
        n_valid: abs_rel.len(),
    })
}

/// Mean Huber / smooth-L1 loss; 0 for empty input.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T], beta: T) -> Result<T, DepthError> {
    if pred.len() != target.len() {
        return Err(DepthError::LengthMismatch(pred.len(), target.len()));
    }
    let half = T::lit(0.5);
    let terms: Vec<T> = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t).abs();
            if d < beta {
                half * d * d / beta
            } else {
                d - half * beta
            }
        })
        .collect();
    Ok(pairwise_mean(&terms).unwrap_or_else(T::zero))
}

/// `mean_x(|dx d| exp(-|dx I|)) + mean_y(|dy d| exp(-|dy I|))` with forward
/// differences over the raw depth values.
pub fn edge_aware_smoothness<T: Real>(depth: &DepthImage<T>, image: &GrayImage<T>) -> Result<T, DepthError> {
    if depth.width != image.width || depth.height != image.height || image.values.len() != depth.values.len() {
        return Err(DepthError::ResolutionMismatch(depth.width, depth.height, image.width, image.height));
    }
    let (w, h) = (depth.width, depth.height);
    let d = &depth.values;
    let im = &image.values;
    let mut gx = Vec::with_capacity(h * w.saturating_sub(1));
    let mut gy = Vec::with_capacity(w * h.saturating_sub(1));
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                gx.push((d[i + 1] - d[i]).abs() * (-(im[i + 1] - im[i]).abs()).exp());
            }
            if r + 1 < h {
                gy.push((d[i + w] - d[i]).abs() * (-(im[i + w] - im[i]).abs()).exp());
            }
        }
    }
    let mx = pairwise_mean(&gx).unwrap_or_else(T::zero);
    let my = pairwise_mean(&gy).unwrap_or_else(T::zero);
    Ok(mx + my)
}

/// 64 in-cell positions plus one "no point" bin.
pub const DETECTOR_CLASSES: usize = 65;

/// Mean softmax cross-entropy over cells. `logits` is cell-major with
/// `n_classes` entries per cell.
pub fn detector_cross_entropy<T: Real>(logits: &[T], n_classes: usize, labels: &[usize]) -> Result<T, DepthError> {
    if n_classes == 0 || logits.len() != labels.len() * n_classes {
        return Err(DepthError::LengthMismatch(logits.len(), labels.len() * n_classes));
    }
    let mut terms = Vec::with_capacity(labels.len());
    for (cell, (&label, row)) in labels.iter().zip(logits.chunks_exact(n_classes)).enumerate() {
        if label >= n_classes {
            return Err(DepthError::LabelOutOfRange { cell, label, max: n_classes - 1 });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
        let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
        terms.push(lse - row[label]);
    }
    Ok(pairwise_mean(&terms).unwrap_or_else(T::zero))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T: Real> {
    pub w_ip: T,
    pub w_2d: T,
    pub w_3d: T,
    pub w_sm: T,
    pub w_d1: T,
    /// Multiplier applied to the depth weight at each coarser scale.
    pub scale_damping: T,
    pub n_scales: usize,
    pub huber_beta: T,
    /// Downsampling factor of each pyramid level relative to full resolution.
    pub scale_factors: Vec<usize>,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            w_ip: T::lit(0.1),
            w_2d: T::lit(1.0),
            w_3d: T::lit(2.0),
            w_sm: T::lit(1.0),
            w_d1: T::lit(2.0),
            scale_damping: T::lit(0.7),
            n_scales: 4,
            huber_beta: T::lit(1.0),
            scale_factors: vec![1, 2, 4, 16],
        }
    }
}

impl<T: Real> LossConfig<T> {
    pub fn validate(&self) -> Result<(), DepthError> {
        let weights = [self.w_ip, self.w_2d, self.w_3d, self.w_sm, self.w_d1];
        if weights.iter().any(|w| !(w.is_finite_val() && *w >= T::zero())) {
            return Err(DepthError::InvalidConfig("weights must be finite and >= 0".into()));
        }
        if self.n_scales < 1 {
            return Err(DepthError::InvalidConfig("n_scales must be >= 1".into()));
        }
        if !(self.scale_damping > T::zero() && self.scale_damping <= T::one()) {
            return Err(DepthError::InvalidConfig("scale_damping must lie in (0, 1]".into()));
        }
        if !(self.huber_beta > T::zero()) {
            return Err(DepthError::InvalidConfig("huber_beta must be > 0".into()));
        }
        if self.scale_factors.len() < self.n_scales || self.scale_factors.contains(&0) {
            return Err(DepthError::InvalidConfig("need a positive scale factor per scale".into()));
        }
        Ok(())
    }

    /// `w_d1 * damping^i` for `i = 0..n_scales`.
    pub fn depth_weights(&self) -> Vec<T> {
        let mut w = self.w_d1;
        (0..self.n_scales)
            .map(|_| {
                let out = w;
                w *= self.scale_damping;
                out
            })
            .collect()
    }

    /// Weighted sum of per-scale depth losses.
    pub fn weighted_depth_sum(&self, per_scale: &[T]) -> Result<T, DepthError> {
        if per_scale.len() != self.n_scales {
            return Err(DepthError::ScaleMismatch { expected: self.n_scales, got: per_scale.len() });
        }
        Ok(self
            .depth_weights()
            .iter()
            .zip(per_scale)
            .fold(T::zero(), |acc, (&w, &l)| acc + w * l))
    }
}

/// Downsamples by averaging the valid pixels of each `factor x factor` block
/// (partial blocks at the border included). Blocks with no valid pixel are holes.
pub fn downsample_valid_mean<T: Real>(img: &DepthImage<T>, factor: usize) -> DepthImage<T> {
    let w = img.width.div_ceil(factor);
    let h = img.height.div_ceil(factor);
    let mut out = DepthImage::invalid(w, h);
    let mut block = Vec::with_capacity(factor * factor);
    for r in 0..h {
        for c in 0..w {
            block.clear();
            for rr in r * factor..((r + 1) * factor).min(img.height) {
                for cc in c * factor..((c + 1) * factor).min(img.width) {
                    if let Some(v) = img.get(rr, cc) {
                        block.push(v);
                    }
                }
            }
            if let Some(m) = pairwise_mean(&block) {
                out.set(r * w + c, m);
            }
        }
    }
    out
}

/// Per-scale smooth-L1 losses between a prediction pyramid and the
/// downsampled ground truth, over jointly valid pixels.
pub fn per_scale_depth_losses<T: Real>(
    pred_pyramid: &[DepthImage<T>],
    gt: &DepthImage<T>,
    config: &LossConfig<T>,
) -> Result<Vec<T>, DepthError> {
    config.validate()?;
    if pred_pyramid.len() != config.n_scales {
        return Err(DepthError::ScaleMismatch { expected: config.n_scales, got: pred_pyramid.len() });
    }
    pred_pyramid
        .iter()
        .zip(&config.scale_factors)
        .map(|(pred, &factor)| {
            let gt_i = if factor == 1 { gt.clone() } else { downsample_valid_mean(gt, factor) };
            if pred.width != gt_i.width || pred.height != gt_i.height {
                return Err(DepthError::ResolutionMismatch(pred.width, pred.height, gt_i.width, gt_i.height));
            }
            let (p, t): (Vec<T>, Vec<T>) = (0..pred.values.len())
                .filter(|&i| pred.valid[i] && gt_i.valid[i])
                .map(|i| (pred.values[i], gt_i.values[i]))
                .unzip();
            smooth_l1(&p, &t, config.huber_beta)
        })
        .collect()
}

/// `sum_i w_{d,i} L_{d,i}` over the configured scales.
pub fn multiscale_depth_loss<T: Real>(
    pred_pyramid: &[DepthImage<T>],
    gt: &DepthImage<T>,
    config: &LossConfig<T>,
) -> Result<T, DepthError> {
    let losses = per_scale_depth_losses(pred_pyramid, gt, config)?;
    config.weighted_depth_sum(&losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents<T: Real> {
    pub interest_point: T,
    pub matching_2d: T,
    pub triangulation_3d: T,
    pub smoothness: T,
}

/// Overall objective: weighted component losses plus the damped per-scale
/// depth terms.
pub fn total_loss<T: Real>(
    components: &LossComponents<T>,
    depth_losses: &[T],
    config: &LossConfig<T>,
) -> Result<T, DepthError> {
    config.validate()?;
    let named = [
        ("interest_point", components.interest_point),
        ("matching_2d", components.matching_2d),
        ("triangulation_3d", components.triangulation_3d),
        ("smoothness", components.smoothness),
    ];
    for (name, v) in named {
        if !v.is_finite_val() {
            return Err(DepthError::NonFinite(name));
        }
    }
    if depth_losses.iter().any(|v| !v.is_finite_val()) {
        return Err(DepthError::NonFinite("depth"));
    }
    let depth = config.weighted_depth_sum(depth_losses)?;
    Ok(config.w_ip * components.interest_point
        + config.w_2d * components.matching_2d
        + config.w_3d * components.triangulation_3d
        + config.w_sm * components.smoothness
        + depth)
}
