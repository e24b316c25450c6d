//! Confidence-weighted algebraic (DLT) triangulation and its Jacobians.
//!
//! Each observation with pixel `(u, v)`, projection rows `p1, p2, p3` and
//! weight `w` contributes the rows `w (u p3 - p1)` and `w (v p3 - p2)`. The
//! homogeneous point is the right singular vector of the stacked matrix for
//! its smallest singular value.

use nalgebra::{DMatrix, Matrix3x4, RowVector4, Vector2, Vector3, Vector4};
use thiserror::Error;

use crate::geometry::CameraView;
use crate::interest_points::InterestPointSet;
use crate::matching::MatchResult;
use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("need at least 2 observations with positive weight, got {0}")]
    Underdetermined(usize),
    #[error("invalid observation {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },
    #[error("solution is a point at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("smallest singular value is not separated (gap {gap} <= {threshold})")]
    NearDegenerate { gap: f64, threshold: f64 },
    #[error("singular value decomposition failed")]
    SvdFailed,
}

/// Homogeneous coordinates with `|w|` at or below this are points at infinity.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;
/// Default lower bound on `sigma_gap` for [`grad_triangulate`].
pub const DEFAULT_MIN_SIGMA_GAP: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<T: Real> {
    pub pixel: Vector2<T>,
    pub projection: Matrix3x4<T>,
    pub weight: T,
}

impl<T: Real> Observation<T> {
    pub fn new(pixel: Vector2<T>, projection: Matrix3x4<T>, weight: T) -> Self {
        Self { pixel, projection, weight }
    }

    /// Unweighted rows `u p3 - p1` and `v p3 - p2`.
    fn base_rows(&self) -> (RowVector4<T>, RowVector4<T>) {
        let p = &self.projection;
        let p3 = p.row(2).into_owned();
        (p3 * self.pixel.x - p.row(0), p3 * self.pixel.y - p.row(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulatedPoint<T: Real> {
    /// Unit-norm homogeneous solution with non-negative last coordinate.
    pub homogeneous: Vector4<T>,
    pub point: Vector3<T>,
    /// Second-smallest over smallest singular value; infinite for exact data.
    pub sigma_gap: T,
}

fn validate<T: Real>(obs: &[Observation<T>]) -> Result<(), TriangulationError> {
    for (index, o) in obs.iter().enumerate() {
        if !o.weight.is_finite_val() || o.weight < T::zero() {
            return Err(TriangulationError::InvalidObservation {
                index,
                reason: format!("weight {} must be finite and >= 0", o.weight),
            });
        }
        if o.projection.row(2).iter().all(|v| *v == T::zero()) {
            return Err(TriangulationError::InvalidObservation {
                index,
                reason: "projection row 3 is zero".into(),
            });
        }
        if !o.pixel.x.is_finite_val() || !o.pixel.y.is_finite_val() {
            return Err(TriangulationError::InvalidObservation { index, reason: "pixel is not finite".into() });
        }
    }
    let positive = obs.iter().filter(|o| o.weight > T::zero()).count();
    if positive < 2 {
        return Err(TriangulationError::Underdetermined(positive));
    }
    Ok(())
}

/// Stacked weighted system `A_w` with two rows per observation.
pub fn build_dlt_matrix<T: Real>(obs: &[Observation<T>]) -> Result<DMatrix<T>, TriangulationError> {
    validate(obs)?;
    Ok(stack_rows(obs))
}

fn stack_rows<T: Real>(obs: &[Observation<T>]) -> DMatrix<T> {
    let mut a = DMatrix::zeros(2 * obs.len(), 4);
    for (k, o) in obs.iter().enumerate() {
        let (r1, r2) = o.base_rows();
        a.set_row(2 * k, &(r1 * o.weight));
        a.set_row(2 * k + 1, &(r2 * o.weight));
    }
    a
}

/// Right singular vectors sorted by ascending singular value.
struct Spectrum<T: Real> {
    sigma: [T; 4],
    vectors: [Vector4<T>; 4],
}

fn spectrum<T: Real>(a: &DMatrix<T>) -> Result<Spectrum<T>, TriangulationError> {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(TriangulationError::SvdFailed)?;
    if svd.singular_values.len() != 4 || svd.singular_values.iter().any(|s| !s.is_finite_val()) {
        return Err(TriangulationError::SvdFailed);
    }
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sigma = order.map(|i| svd.singular_values[i]);
    let vectors = order.map(|i| Vector4::new(v_t[(i, 0)], v_t[(i, 1)], v_t[(i, 2)], v_t[(i, 3)]));
    Ok(Spectrum { sigma, vectors })
}

fn solve<T: Real>(obs: &[Observation<T>]) -> Result<(TriangulatedPoint<T>, Spectrum<T>, DMatrix<T>), TriangulationError> {
    let a = build_dlt_matrix(obs)?;
    let mut sv = spectrum(&a)?;
    let mut z = sv.vectors[0];
    z /= z.norm();
    if z[3] < T::zero() {
        z = -z;
    }
    sv.vectors[0] = z;
    if !(z[3].abs() > T::lit(MIN_HOMOGENEOUS_W)) {
        return Err(TriangulationError::PointAtInfinity(z[3].abs().as_f64()));
    }
    let point = Vector3::new(z[0] / z[3], z[1] / z[3], z[2] / z[3]);
    let sigma_gap = if sv.sigma[0] > T::zero() { sv.sigma[1] / sv.sigma[0] } else { T::infinity() };
    Ok((TriangulatedPoint { homogeneous: z, point, sigma_gap }, sv, a))
}

pub fn triangulate<T: Real>(obs: &[Observation<T>]) -> Result<TriangulatedPoint<T>, TriangulationError> {
    solve(obs).map(|(p, _, _)| p)
}

/// Derivatives of the Euclidean point with respect to one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationJacobian<T: Real> {
    pub d_u: Vector3<T>,
    pub d_v: Vector3<T>,
    pub d_weight: Vector3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulationJacobians<T: Real> {
    pub point: TriangulatedPoint<T>,
    pub per_observation: Vec<ObservationJacobian<T>>,
}

/// Analytic Jacobians of the triangulated point.
///
/// With `M = A^T A`, eigenpairs `(s_i^2, v_i)` and `z = v_min`, a perturbation
/// `dA` moves the null vector by
/// `dz = -sum_{i != min} v_i (v_i^T dM z) / (s_i^2 - s_min^2)`,
/// `dM z = dA^T (A z) + A^T (dA z)`. The Euclidean point follows from the
/// quotient rule on the homogeneous divide.
pub fn grad_triangulate<T: Real>(
    obs: &[Observation<T>],
    min_sigma_gap: T,
) -> Result<TriangulationJacobians<T>, TriangulationError> {
    let (point, sv, a) = solve(obs)?;
    if !(point.sigma_gap > min_sigma_gap) {
        return Err(TriangulationError::NearDegenerate {
            gap: point.sigma_gap.as_f64(),
            threshold: min_sigma_gap.as_f64(),
        });
    }
    let z = point.homogeneous;
    let residual = &a * z;
    let lambda_min = sv.sigma[0] * sv.sigma[0];

    // Packed pseudo-inverse action restricted to the complement of z.
    let dz_from = |dmz: Vector4<T>| -> Vector4<T> {
        let mut dz = Vector4::zeros();
        for i in 1..4 {
            let vi = sv.vectors[i];
            dz += vi * (vi.dot(&dmz) / (sv.sigma[i] * sv.sigma[i] - lambda_min));
        }
        -dz
    };
    let dpoint = |dz: Vector4<T>| -> Vector3<T> {
        Vector3::new(
            (dz[0] - point.point.x * dz[3]) / z[3],
            (dz[1] - point.point.y * dz[3]) / z[3],
            (dz[2] - point.point.z * dz[3]) / z[3],
        )
    };

    let mut per_observation = Vec::with_capacity(obs.len());
    for (k, o) in obs.iter().enumerate() {
        let row1 = a.row(2 * k).transpose();
        let row1 = Vector4::new(row1[0], row1[1], row1[2], row1[3]);
        let row2 = a.row(2 * k + 1).transpose();
        let row2 = Vector4::new(row2[0], row2[1], row2[2], row2[3]);
        let (r1, r2) = (residual[2 * k], residual[2 * k + 1]);
        // dM z for a change (d1, d2) of this observation's two rows.
        let dmz = |d1: Vector4<T>, d2: Vector4<T>| -> Vector4<T> {
            d1 * r1 + d2 * r2 + row1 * d1.dot(&z) + row2 * d2.dot(&z)
        };
        let p3 = o.projection.row(2).transpose() * o.weight;
        let zero = Vector4::zeros();
        let (b1, b2) = o.base_rows();
        let (b1, b2) = (b1.transpose(), b2.transpose());
        per_observation.push(ObservationJacobian {
            d_u: dpoint(dz_from(dmz(p3, zero))),
            d_v: dpoint(dz_from(dmz(zero, p3))),
            d_weight: dpoint(dz_from(dmz(b1, b2))),
        });
    }
    Ok(TriangulationJacobians { point, per_observation })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPoint<T: Real> {
    pub point_id: usize,
    pub result: Result<TriangulatedPoint<T>, TriangulationError>,
    /// Weight used for each auxiliary view (0 where matching failed).
    pub view_weights: Vec<T>,
}

impl<T: Real> BatchPoint<T> {
    pub fn is_valid(&self) -> bool {
        self.result.is_ok()
    }
}

/// Observations for one anchor point: the anchor pixel at weight 1, then each
/// auxiliary match at its clamped confidence `max(confidence, 0)`. Views with
/// no match contribute zero-weight rows.
pub fn point_observations<T: Real>(
    anchor_pixel: &Vector2<T>,
    matches: &[Option<MatchResult<T>>],
    views: &[CameraView<T>],
) -> Vec<Observation<T>> {
    let mut obs = Vec::with_capacity(views.len());
    obs.push(Observation::new(*anchor_pixel, *views[0].projection(), T::one()));
    for (m, view) in matches.iter().zip(&views[1..]) {
        obs.push(match m {
            Some(m) if m.confidence.is_finite_val() => {
                let w = if m.confidence > T::zero() { m.confidence } else { T::zero() };
                Observation::new(m.position, *view.projection(), w)
            }
            _ => Observation::new(*anchor_pixel, *view.projection(), T::zero()),
        });
    }
    obs
}

/// Triangulates every anchor point independently; failures are carried as
/// invalid entries rather than aborting the batch.
///
/// `matches[j][k]` is the match of point `j` in auxiliary view `k + 1`.
pub fn triangulate_batch<T: Real>(
    anchor_points: &InterestPointSet<T>,
    matches: &[Vec<Option<MatchResult<T>>>],
    views: &[CameraView<T>],
) -> Vec<BatchPoint<T>> {
    anchor_points
        .points
        .iter()
        .zip(matches)
        .enumerate()
        .map(|(point_id, (p, m))| triangulate_one(point_id, &p.pixel, m, views))
        .collect()
}

pub fn triangulate_one<T: Real>(
    point_id: usize,
    anchor_pixel: &Vector2<T>,
    matches: &[Option<MatchResult<T>>],
    views: &[CameraView<T>],
) -> BatchPoint<T> {
    let obs = point_observations(anchor_pixel, matches, views);
    let view_weights = obs[1..].iter().map(|o| o.weight).collect();
    BatchPoint { point_id, result: triangulate(&obs), view_weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraView;
    use crate::interest_points::{InterestPoint, PointSource};
    use nalgebra::{Matrix3, Rotation3};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::rng;

    fn k() -> Matrix3<f64> {
        Matrix3::new(300.0, 0.0, 159.5, 0.0, 300.0, 119.5, 0.0, 0.0, 1.0)
    }

    fn cam_at(center: Vector3<f64>, axis_angle: Vector3<f64>) -> CameraView<f64> {
        let r = *Rotation3::from_scaled_axis(axis_angle).matrix();
        CameraView::new(k(), r, -(r * center), 320, 240).unwrap()
    }

    fn observe(cams: &[CameraView<f64>], x: &Vector3<f64>) -> Vec<Observation<f64>> {
        cams.iter()
            .map(|c| Observation::new(c.project(x).unwrap().pixel, *c.projection(), 1.0))
            .collect()
    }

    fn random_rig(seed: u64, n: usize) -> Vec<CameraView<f64>> {
        let mut r = rng::stream(seed, "tri-test");
        (0..n)
            .map(|i| {
                if i == 0 {
                    cam_at(Vector3::zeros(), Vector3::zeros())
                } else {
                    let c = Vector3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.2..0.2));
                    let aa = Vector3::new(r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), r.random_range(-0.05..0.05));
                    cam_at(c, aa)
                }
            })
            .collect()
    }

    #[test]
    fn dlt_rows_vanish_on_exact_point() {
        let cams = [cam_at(Vector3::zeros(), Vector3::zeros()), cam_at(Vector3::new(0.2, 0.0, 0.0), Vector3::zeros())];
        let x = Vector3::new(0.3, -0.2, 2.0);
        let obs = observe(&cams, &x);
        let a = build_dlt_matrix(&obs).unwrap();
        assert_eq!(a.shape(), (4, 4));
        assert!((&a * x.push(1.0)).amax() < 1e-12);

        let mut zero = obs.clone();
        zero.push(Observation::new(Vector2::new(3.0, 4.0), *cams[1].projection(), 0.0));
        let a0 = build_dlt_matrix(&zero).unwrap();
        assert!(a0.rows(4, 2).iter().all(|v| *v == 0.0));

        let doubled: Vec<_> = obs.iter().map(|o| Observation { weight: 2.0, ..*o }).collect();
        let a2 = build_dlt_matrix(&doubled).unwrap();
        assert_eq!(a2, &a * 2.0);
        assert_eq!(triangulate(&doubled).unwrap().point, triangulate(&obs).unwrap().point);
    }

    #[test]
    fn underdetermined_and_invalid() {
        let cams = [cam_at(Vector3::zeros(), Vector3::zeros()), cam_at(Vector3::new(0.2, 0.0, 0.0), Vector3::zeros())];
        let mut obs = observe(&cams, &Vector3::new(0.0, 0.0, 3.0));
        obs[1].weight = 0.0;
        assert_eq!(triangulate(&obs), Err(TriangulationError::Underdetermined(1)));
        obs[1].weight = -1.0;
        assert!(matches!(triangulate(&obs), Err(TriangulationError::InvalidObservation { index: 1, .. })));
        obs[1].weight = 1.0;
        obs[1].projection = Matrix3x4::zeros();
        assert!(matches!(triangulate(&obs), Err(TriangulationError::InvalidObservation { .. })));
    }

    #[test]
    fn two_view_exact_recovery() {
        let cams = [cam_at(Vector3::zeros(), Vector3::zeros()), cam_at(Vector3::new(0.2, 0.05, 0.0), Vector3::new(0.0, 0.02, 0.0))];
        let x = Vector3::new(0.3, -0.2, 2.0);
        let tp = triangulate(&observe(&cams, &x)).unwrap();
        assert!((tp.point - x).norm() < 1e-9);
        assert!((tp.homogeneous.norm() - 1.0).abs() < 1e-12);
        assert!(tp.homogeneous[3] > 0.0);
        assert!(tp.sigma_gap > 1e6);
    }

    #[test]
    fn parallel_rays_give_point_at_infinity() {
        let cams = [cam_at(Vector3::zeros(), Vector3::zeros()), cam_at(Vector3::new(0.2, 0.0, 0.0), Vector3::zeros())];
        // Both cameras see the principal point: rays are parallel.
        let obs: Vec<_> = cams.iter().map(|c| Observation::new(Vector2::new(159.5, 119.5), *c.projection(), 1.0)).collect();
        assert!(matches!(triangulate(&obs), Err(TriangulationError::PointAtInfinity(_))));
    }

    #[test]
    fn zero_weight_masks_corrupted_view() {
        let cams = random_rig(11, 3);
        let x = Vector3::new(-0.2, 0.1, 3.5);
        let clean = triangulate(&observe(&cams[..2], &x)).unwrap();
        let mut obs = observe(&cams, &x);
        obs[2].pixel += Vector2::new(7.0, -3.0);
        obs[2].weight = 0.0;
        let masked = triangulate(&obs).unwrap();
        assert!((masked.point - clean.point).norm() < 1e-9);
    }

    #[test]
    fn k_view_exact_recovery() {
        for n in 3..=7 {
            for seed in 0..20 {
                let cams = random_rig(seed * 10 + n as u64, n);
                let x = Vector3::new(0.1 * seed as f64 - 1.0, 0.3, 1.5 + 0.2 * seed as f64);
                let tp = triangulate(&observe(&cams, &x)).unwrap();
                assert!((tp.point - x).norm() < 1e-9, "n={n} seed={seed} err={}", (tp.point - x).norm());
            }
        }
    }

    fn noisy(cams: &[CameraView<f64>], x: &Vector3<f64>, seed: u64) -> Vec<Observation<f64>> {
        let mut r = rng::stream(seed, "tri-noise");
        observe(cams, x)
            .into_iter()
            .enumerate()
            .map(|(i, mut o)| {
                let n: f64 = StandardNormal.sample(&mut r);
                let m: f64 = StandardNormal.sample(&mut r);
                o.pixel += Vector2::new(n, m) * 0.5;
                if i > 0 {
                    o.weight = r.random_range(0.3..1.0);
                }
                o
            })
            .collect()
    }

    fn finite_difference(obs: &[Observation<f64>], h: f64) -> Vec<[Vector3<f64>; 3]> {
        let eval = |o: &[Observation<f64>]| triangulate(o).unwrap().point;
        (0..obs.len())
            .map(|k| {
                let mut out = [Vector3::zeros(); 3];
                for (which, slot) in out.iter_mut().enumerate() {
                    let mut p = obs.to_vec();
                    let mut m = obs.to_vec();
                    match which {
                        0 => {
                            p[k].pixel.x += h;
                            m[k].pixel.x -= h;
                        }
                        1 => {
                            p[k].pixel.y += h;
                            m[k].pixel.y -= h;
                        }
                        _ => {
                            p[k].weight += h;
                            m[k].weight -= h;
                        }
                    }
                    *slot = (eval(&p) - eval(&m)) / (2.0 * h);
                }
                out
            })
            .collect()
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cams = random_rig(5, 3);
        let x = Vector3::new(0.2, -0.1, 3.0);
        let obs = noisy(&cams, &x, 9);
        let jac = grad_triangulate(&obs, DEFAULT_MIN_SIGMA_GAP).unwrap();
        let fd = finite_difference(&obs, 1e-6);
        for (a, n) in jac.per_observation.iter().zip(&fd) {
            for (av, nv) in [a.d_u, a.d_v, a.d_weight].iter().zip(n) {
                assert!((av - nv).norm() <= 1e-4 * nv.norm().max(1e-6), "{av} vs {nv}");
            }
        }
    }

    #[test]
    fn consistent_observation_has_zero_weight_gradient() {
        let cams = random_rig(21, 3);
        let x = Vector3::new(0.0, 0.2, 2.5);
        let obs = observe(&cams, &x);
        let jac = grad_triangulate(&obs, DEFAULT_MIN_SIGMA_GAP).unwrap();
        let fd = finite_difference(&obs, 1e-6);
        for (a, n) in jac.per_observation.iter().zip(&fd) {
            assert!(a.d_weight.norm() < 1e-6);
            assert!(n[2].norm() < 1e-6);
        }
    }

    #[test]
    fn global_weight_scaling_direction_is_neutral() {
        let cams = random_rig(8, 4);
        let obs = noisy(&cams, &Vector3::new(-0.3, 0.1, 4.0), 2);
        let jac = grad_triangulate(&obs, DEFAULT_MIN_SIGMA_GAP).unwrap();
        let dir: Vector3<f64> = jac
            .per_observation
            .iter()
            .zip(&obs)
            .map(|(j, o)| j.d_weight * o.weight)
            .sum();
        assert!(dir.norm() < 1e-9, "{}", dir.norm());
    }

    #[test]
    fn near_degenerate_gradient_is_an_error() {
        let cams = random_rig(8, 2);
        let obs = noisy(&cams, &Vector3::new(-0.3, 0.1, 4.0), 2);
        let res = grad_triangulate(&obs, 1e30);
        assert!(matches!(res, Err(TriangulationError::NearDegenerate { .. })));
    }

    #[test]
    fn batch_matches_per_point_loop_and_flags_failures() {
        let cams = random_rig(3, 3);
        let mut set = InterestPointSet::empty(320, 240);
        let mut matches = Vec::new();
        let pts = [Vector3::new(0.1, 0.1, 2.0), Vector3::new(-0.4, 0.2, 5.0), Vector3::new(0.0, 0.0, 3.0)];
        for (j, x) in pts.iter().enumerate() {
            set.points.push(InterestPoint {
                pixel: cams[0].project(x).unwrap().pixel,
                score: 1.0,
                source: PointSource::Detected,
            });
            let per_view: Vec<Option<MatchResult<f64>>> = cams[1..]
                .iter()
                .map(|c| {
                    Some(MatchResult {
                        position: c.project(x).unwrap().pixel,
                        confidence: if j == 2 { 0.0 } else { 0.9 },
                        confidence_index: 0,
                        probabilities: vec![],
                    })
                })
                .collect();
            matches.push(per_view);
        }
        let batch = triangulate_batch(&set, &matches, &cams);
        assert_eq!(batch.len(), 3);
        for (j, b) in batch.iter().enumerate().take(2) {
            assert!((b.result.as_ref().unwrap().point - pts[j]).norm() < 1e-9);
            let single = triangulate_one(j, &set.points[j].pixel, &matches[j], &cams);
            assert_eq!(&single, b);
        }
        assert_eq!(batch[2].result, Err(TriangulationError::Underdetermined(1)));
        assert!(!batch[2].is_valid());
    }

    proptest! {
        #[test]
        fn weight_scale_invariance(seed in 0u64..500, c in 0.01f64..100.0) {
            let cams = random_rig(seed, 4);
            let obs = noisy(&cams, &Vector3::new(0.1, 0.1, 3.0), seed);
            let scaled: Vec<_> = obs.iter().map(|o| Observation { weight: o.weight * c, ..*o }).collect();
            let a = triangulate(&obs).unwrap().point;
            let b = triangulate(&scaled).unwrap().point;
            prop_assert!((a - b).norm() < 1e-12 * a.norm().max(1.0) * 10.0);
        }

        #[test]
        fn rigid_equivariance(seed in 0u64..500, aa in prop::array::uniform3(-1.0f64..1.0), t in prop::array::uniform3(-2.0f64..2.0)) {
            let cams = random_rig(seed, 3);
            let x = Vector3::new(0.2, -0.1, 2.5);
            let obs = observe(&cams, &x);
            let rot = Rotation3::from_scaled_axis(Vector3::from(aa));
            let tr = Vector3::from(t);
            // World moves by X' = rot X + tr; each camera's extrinsics follow.
            let moved: Vec<Observation<f64>> = cams.iter().zip(&obs).map(|(c, o)| {
                let r = c.rotation() * rot.matrix().transpose();
                let tt = c.translation() - r * tr;
                let c2 = CameraView::new(*c.intrinsics(), r, tt, 320, 240).unwrap();
                Observation { projection: *c2.projection(), ..*o }
            }).collect();
            let a = triangulate(&obs).unwrap().point;
            let b = triangulate(&moved).unwrap().point;
            prop_assert!((rot * a + tr - b).norm() < 1e-9);
        }
    }
}
