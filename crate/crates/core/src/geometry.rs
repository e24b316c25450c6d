//! Pinhole cameras, fundamental matrices and depth-clamped epipolar sampling.
//!
//! Extrinsics are world to camera: `x_cam = R * x_world + t`. Pixel
//! coordinates put the origin at the center of the top-left pixel, so the
//! image spans `[0, width - 1] x [0, height - 1]`.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("camera centers coincide (baseline {baseline:e})")]
    DegenerateBaseline { baseline: f64 },
    #[error("epipolar segment lies entirely behind the auxiliary camera")]
    EmptySegment,
    #[error("invalid sampling parameters: {0}")]
    InvalidSampling(String),
}

/// Minimum projective depth accepted by [`CameraView::project`].
pub const MIN_DEPTH: f64 = 1e-9;
/// Baselines at or below this length are treated as coincident centers.
pub const MIN_BASELINE: f64 = 1e-12;

/// Tolerance for structural checks (orthonormality, determinant): 1e-9 in
/// `f64`, loosened to a few ulps for `f32`.
fn structural_tol<T: Real>() -> T {
    let eps = T::default_epsilon() * T::lit(64.0);
    if eps > T::lit(1e-9) {
        eps
    } else {
        T::lit(1e-9)
    }
}

/// Full projection matrix `K [R | t]`.
pub fn projection_matrix<T: Real>(
    k: &Matrix3<T>,
    r: &Matrix3<T>,
    t: &Vector3<T>,
) -> Result<Matrix3x4<T>, GeometryError> {
    validate_intrinsics(k)?;
    validate_rotation(r)?;
    Ok(compose_projection(k, r, t))
}

fn compose_projection<T: Real>(k: &Matrix3<T>, r: &Matrix3<T>, t: &Vector3<T>) -> Matrix3x4<T> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    rt.set_column(3, t);
    k * rt
}

fn validate_intrinsics<T: Real>(k: &Matrix3<T>) -> Result<(), GeometryError> {
    if k.iter().any(|v| !v.is_finite_val()) {
        return Err(GeometryError::InvalidCamera("intrinsics contain non-finite entries".into()));
    }
    if k[(1, 0)] != T::zero() || k[(2, 0)] != T::zero() || k[(2, 1)] != T::zero() {
        return Err(GeometryError::InvalidCamera("intrinsics are not upper triangular".into()));
    }
    if k[(2, 2)] != T::one() {
        return Err(GeometryError::InvalidCamera("intrinsics K[2][2] must be 1".into()));
    }
    if k[(0, 0)] <= T::zero() || k[(1, 1)] <= T::zero() {
        return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
    }
    Ok(())
}

fn validate_rotation<T: Real>(r: &Matrix3<T>) -> Result<(), GeometryError> {
    let tol = structural_tol::<T>();
    if r.iter().any(|v| !v.is_finite_val()) {
        return Err(GeometryError::InvalidCamera("rotation contains non-finite entries".into()));
    }
    let gram = r.transpose() * r - Matrix3::identity();
    if gram.amax() > tol {
        return Err(GeometryError::InvalidCamera(format!(
            "rotation is not orthonormal (|R^T R - I| = {:e})",
            gram.amax().as_f64()
        )));
    }
    let det = r.determinant();
    if (det - T::one()).abs() > tol {
        return Err(GeometryError::InvalidCamera(format!(
            "rotation determinant is {} (expected +1)",
            det.as_f64()
        )));
    }
    Ok(())
}

/// Pixel position and projective depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T: Real> {
    pub pixel: Vector2<T>,
    pub depth: T,
}

/// Calibrated pinhole view with its cached projection matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView<T: Real> {
    k: Matrix3<T>,
    k_inv: Matrix3<T>,
    r: Matrix3<T>,
    t: Vector3<T>,
    width: usize,
    height: usize,
    p: Matrix3x4<T>,
}

impl<T: Real> CameraView<T> {
    pub fn new(
        k: Matrix3<T>,
        r: Matrix3<T>,
        t: Vector3<T>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be non-zero".into()));
        }
        if t.iter().any(|v| !v.is_finite_val()) {
            return Err(GeometryError::InvalidCamera("translation contains non-finite entries".into()));
        }
        let p = projection_matrix(&k, &r, &t)?;
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("intrinsics are singular".into()))?;
        Ok(Self { k, k_inv, r, t, width, height, p })
    }

    pub fn intrinsics(&self) -> &Matrix3<T> {
        &self.k
    }

    pub fn intrinsics_inverse(&self) -> &Matrix3<T> {
        &self.k_inv
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.t
    }

    pub fn projection(&self) -> &Matrix3x4<T> {
        &self.p
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<T> {
        -(self.r.transpose() * self.t)
    }

    pub fn project(&self, x: &Vector3<T>) -> Result<Projection<T>, GeometryError> {
        let h = self.p * x.push(T::one());
        let depth = h[2];
        if !(depth > T::lit(MIN_DEPTH)) {
            return Err(GeometryError::BehindCamera { depth: depth.as_f64() });
        }
        Ok(Projection { pixel: Vector2::new(h[0] / depth, h[1] / depth), depth })
    }

    /// World point seen at `pixel` with projective depth `depth`.
    pub fn unproject(&self, pixel: &Vector2<T>, depth: T) -> Vector3<T> {
        let cam = self.k_inv * Vector3::new(pixel.x, pixel.y, T::one()) * depth;
        self.r.transpose() * (cam - self.t)
    }

    /// True when `pixel` lies inside `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        let w = T::from_usize(self.width - 1).unwrap_or_else(T::zero);
        let h = T::from_usize(self.height - 1).unwrap_or_else(T::zero);
        pixel.x >= T::zero() && pixel.y >= T::zero() && pixel.x <= w && pixel.y <= h
    }
}

fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Two-view epipolar relation `x_aux^T F x_anchor = 0`.
///
/// Stored with unit Frobenius norm; the largest-magnitude entry (first in
/// row-major order on ties) is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix<T: Real> {
    f: Matrix3<T>,
}

impl<T: Real> FundamentalMatrix<T> {
    fn normalized(f: Matrix3<T>) -> Self {
        let mut f = f / f.norm();
        let mut best = T::zero();
        let mut best_val = T::zero();
        for r in 0..3 {
            for c in 0..3 {
                let v = f[(r, c)];
                if v.abs() > best {
                    best = v.abs();
                    best_val = v;
                }
            }
        }
        if best_val < T::zero() {
            f = -f;
        }
        Self { f }
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.f
    }

    /// Epipolar line `F x` in the auxiliary image, as `(a, b, c)` with
    /// `a u + b v + c = 0`.
    pub fn line(&self, anchor_pixel: &Vector2<T>) -> Vector3<T> {
        self.f * Vector3::new(anchor_pixel.x, anchor_pixel.y, T::one())
    }

    pub fn residual(&self, aux_pixel: &Vector2<T>, anchor_pixel: &Vector2<T>) -> T {
        Vector3::new(aux_pixel.x, aux_pixel.y, T::one()).dot(&self.line(anchor_pixel))
    }
}

pub fn fundamental_matrix<T: Real>(
    anchor: &CameraView<T>,
    aux: &CameraView<T>,
) -> Result<FundamentalMatrix<T>, GeometryError> {
    let r_rel = aux.r * anchor.r.transpose();
    let t_rel = aux.t - r_rel * anchor.t;
    let baseline = t_rel.norm();
    if !(baseline > T::lit(MIN_BASELINE)) {
        return Err(GeometryError::DegenerateBaseline { baseline: baseline.as_f64() });
    }
    let f = aux.k_inv.transpose() * skew(&t_rel) * r_rel * anchor.k_inv;
    Ok(FundamentalMatrix::normalized(f))
}

/// Samples along the clamped epipolar segment of one anchor pixel.
///
/// Columns are depth hypotheses (uniform in inverse depth, increasing depth);
/// rows are perpendicular offsets `-offset..=offset` pixels along the unit
/// normal of the epipolar line. Storage is column-major over rows:
/// index `col * n_rows + row`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarSampleGrid<T: Real> {
    samples: Vec<Vector2<T>>,
    valid: Vec<bool>,
    depths: Vec<T>,
    n_cols: usize,
    offset: usize,
    normal: Vector2<T>,
}

impl<T: Real> EpipolarSampleGrid<T> {
    pub fn from_parts(
        samples: Vec<Vector2<T>>,
        valid: Vec<bool>,
        depths: Vec<T>,
        offset: usize,
        normal: Vector2<T>,
    ) -> Result<Self, GeometryError> {
        let n_cols = depths.len();
        let n_rows = 2 * offset + 1;
        if samples.len() != n_cols * n_rows || valid.len() != samples.len() {
            return Err(GeometryError::InvalidSampling(format!(
                "grid of {} samples does not match {} columns x {} rows",
                samples.len(),
                n_cols,
                n_rows
            )));
        }
        Ok(Self { samples, valid, depths, n_cols, offset, normal })
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        2 * self.offset + 1
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        col * self.n_rows() + row
    }

    /// Storage row holding the line itself (perpendicular offset 0).
    pub fn center_row(&self) -> usize {
        self.offset
    }

    pub fn samples(&self) -> &[Vector2<T>] {
        &self.samples
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn depths(&self) -> &[T] {
        &self.depths
    }

    pub fn normal(&self) -> &Vector2<T> {
        &self.normal
    }

    pub fn sample(&self, col: usize, row: usize) -> &Vector2<T> {
        &self.samples[self.index(col, row)]
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[self.index(col, row)]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Depth hypotheses uniform in inverse depth, from `depth_min` up to `depth_max`.
pub fn inverse_depth_hypotheses<T: Real>(depth_min: T, depth_max: T, n: usize) -> Vec<T> {
    let inv_near = T::one() / depth_min;
    let inv_far = T::one() / depth_max;
    let last = T::from_usize(n - 1).unwrap_or_else(T::one);
    (0..n)
        .map(|i| {
            if i == 0 {
                depth_min
            } else if i == n - 1 {
                depth_max
            } else {
                let a = T::from_usize(i).unwrap_or_else(T::zero) / last;
                T::one() / (inv_near + (inv_far - inv_near) * a)
            }
        })
        .collect()
}

/// Epipolar sampler for a fixed anchor/auxiliary pair; caches `F`.
#[derive(Debug, Clone)]
pub struct EpipolarSampler<'a, T: Real> {
    anchor: &'a CameraView<T>,
    aux: &'a CameraView<T>,
    fundamental: FundamentalMatrix<T>,
}

impl<'a, T: Real> EpipolarSampler<'a, T> {
    pub fn new(anchor: &'a CameraView<T>, aux: &'a CameraView<T>) -> Result<Self, GeometryError> {
        Ok(Self { anchor, aux, fundamental: fundamental_matrix(anchor, aux)? })
    }

    pub fn fundamental(&self) -> &FundamentalMatrix<T> {
        &self.fundamental
    }

    pub fn sample(
        &self,
        x: &Vector2<T>,
        depth_min: T,
        depth_max: T,
        n_samples: usize,
        offset_px: usize,
    ) -> Result<EpipolarSampleGrid<T>, GeometryError> {
        if !(depth_min > T::zero() && depth_min < depth_max && depth_max.is_finite_val()) {
            return Err(GeometryError::InvalidSampling(format!(
                "depth range must satisfy 0 < min < max, got [{}, {}]",
                depth_min, depth_max
            )));
        }
        if n_samples < 2 {
            return Err(GeometryError::InvalidSampling(format!(
                "need at least 2 samples along the line, got {n_samples}"
            )));
        }

        let line = self.fundamental.line(x);
        let ab = Vector2::new(line.x, line.y);
        let ab_norm = ab.norm();
        // At the epipole the line is undefined; fall back to a vertical normal.
        let normal = if ab_norm > T::zero() { ab / ab_norm } else { Vector2::new(T::zero(), T::one()) };

        let depths = inverse_depth_hypotheses(depth_min, depth_max, n_samples);
        let n_rows = 2 * offset_px + 1;
        let mut samples = Vec::with_capacity(n_samples * n_rows);
        let mut valid = Vec::with_capacity(n_samples * n_rows);
        let mut any_in_front = false;
        for &d in &depths {
            let world = self.anchor.unproject(x, d);
            match self.aux.project(&world) {
                Ok(proj) => {
                    any_in_front = true;
                    for row in 0..n_rows {
                        let k = T::from_usize(row).unwrap_or_else(T::zero)
                            - T::from_usize(offset_px).unwrap_or_else(T::zero);
                        let p = if row == offset_px { proj.pixel } else { proj.pixel + normal * k };
                        valid.push(self.aux.contains(&p));
                        samples.push(p);
                    }
                }
                Err(_) => {
                    for _ in 0..n_rows {
                        samples.push(Vector2::zeros());
                        valid.push(false);
                    }
                }
            }
        }
        if !any_in_front {
            return Err(GeometryError::EmptySegment);
        }
        Ok(EpipolarSampleGrid { samples, valid, depths, n_cols: n_samples, offset: offset_px, normal })
    }
}

/// One-shot form of [`EpipolarSampler::sample`].
pub fn sample_epipolar_segment<T: Real>(
    anchor: &CameraView<T>,
    aux: &CameraView<T>,
    x: &Vector2<T>,
    depth_min: T,
    depth_max: T,
    n_samples: usize,
    offset_px: usize,
) -> Result<EpipolarSampleGrid<T>, GeometryError> {
    EpipolarSampler::new(anchor, aux)?.sample(x, depth_min, depth_max, n_samples, offset_px)
}
