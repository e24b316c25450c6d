//! Synthetic multi-view scenes with exact ground truth.
//!
//! Points are sampled on the anchor's integer pixel lattice at depths uniform
//! in `[depth_min, depth_max]`, with a minimum pixel separation enforced in
//! every view. Each view's descriptor field is a sum of Gaussian splats of
//! the point descriptors plus a weighted random per-cell background,
//! renormalized per cell, so the correlation peak of point `j` sits at its
//! projection. Descriptor coordinates are split into three disjoint blocks:
//! point descriptors, anchor background and auxiliary background. Background
//! therefore never correlates with a point or across the anchor/auxiliary
//! boundary, and the correlation peak around a match is smooth.
//! Descriptor and score values are rounded through `f32` so that a scene
//! written to disk and read back is identical to the in-memory one.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, SymmetricEigen, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::depth_tools::DepthImage;
use crate::geometry::{CameraView, GeometryError};
use crate::interest_points::{InterestPointError, ScoreMap};
use crate::matching::{DescriptorField, MatchError};
use crate::rng::{self, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place point {point} visibly in all views after {rounds} rejection rounds")]
    InfeasibleVisibility { point: usize, rounds: usize },
    #[error("point {point} is not visible in view {view}")]
    NotVisible { point: usize, view: usize },
    #[error("need at least 2 observations, got {0}")]
    Underdetermined(usize),
    #[error("point is at infinity")]
    PointAtInfinity,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    InterestPoint(#[from] InterestPointError),
}

/// Rejection rounds allowed per point before giving up.
pub const MAX_REJECTION_ROUNDS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_points: usize,
    pub n_views: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Distance of each auxiliary camera center from the anchor center.
    pub baseline: f64,
    /// Per-axis bound (radians) of the random rotation of auxiliary views.
    pub rotation_jitter: f64,
    pub descriptor_dim: usize,
    /// Standard deviation (pixels) of descriptor splats.
    pub peak_sharpness: f64,
    /// Standard deviation (pixels) of score-map peaks.
    pub score_sharpness: f64,
    /// Weight of the background texture added to every cell before
    /// renormalization.
    pub background_weight: f64,
    /// Standard deviation (pixels) of the displacement of planted peaks in
    /// auxiliary views.
    pub pixel_noise: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub descriptor_stride: usize,
    /// Minimum distance (pixels) between projections of distinct points in
    /// every view.
    pub min_separation: f64,
    /// Projections must stay this many pixels inside the image border.
    pub border_margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 300,
            n_views: 2,
            depth_min: 0.5,
            depth_max: 10.0,
            baseline: 0.1,
            rotation_jitter: 0.0,
            descriptor_dim: 64,
            peak_sharpness: 1.5,
            score_sharpness: 1.0,
            background_weight: 1.0,
            pixel_noise: 0.0,
            seed: 0,
            width: 320,
            height: 240,
            focal: 300.0,
            descriptor_stride: 1,
            min_separation: 8.0,
            border_margin: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.n_views < 2 {
            return fail("n_views must be >= 2");
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max && self.depth_max.is_finite()) {
            return fail("depth range must satisfy 0 < min < max < inf");
        }
        if self.descriptor_dim < 4 {
            return fail("descriptor_dim must be >= 4 to hold point and background blocks");
        }
        if !(self.baseline > 0.0) {
            return fail("baseline must be > 0");
        }
        if !(self.peak_sharpness > 0.0 && self.score_sharpness > 0.0) {
            return fail("peak and score sharpness must be > 0");
        }
        if !(self.background_weight > 0.0) || self.pixel_noise < 0.0 || self.rotation_jitter < 0.0 {
            return fail("background_weight must be > 0; noise and jitter >= 0");
        }
        if self.width < 2 || self.height < 2 || self.descriptor_stride == 0 || !(self.focal > 0.0) {
            return fail("image size, stride and focal length must be positive");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub points: Vec<Vector3<f64>>,
    /// View 0 is the anchor.
    pub views: Vec<CameraView<f64>>,
    pub descriptors: Vec<DescriptorField<f64>>,
    pub score_maps: Vec<ScoreMap<f64>>,
    /// Ground-truth depth at the rounded projection of every point.
    pub gt_depth: Vec<DepthImage<f64>>,
    pub point_descriptors: Vec<Vec<f64>>,
    /// Planted (possibly noise-displaced) peak position per point per view.
    pub planted: Vec<Vec<Vector2<f64>>>,
}

fn gaussian(r: &mut StreamRng) -> f64 {
    StandardNormal.sample(r)
}

/// Random unit vector of length `dim` supported on `support`.
fn random_unit(r: &mut StreamRng, dim: usize, support: std::ops::Range<usize>) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; dim];
        for x in &mut v[support.clone()] {
            *x = gaussian(r);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Coordinate blocks `(points, anchor background, auxiliary background)`.
fn blocks(dim: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let q = dim / 4;
    let p = dim - 2 * q;
    (0..p, p..p + q, p + q..dim)
}

fn make_views(cfg: &SceneConfig) -> Result<Vec<CameraView<f64>>, SynthError> {
    let k = cfg.intrinsics();
    let mut r = rng::stream(cfg.seed, "scene/views");
    let mut views = vec![CameraView::new(k, Matrix3::identity(), Vector3::zeros(), cfg.width, cfg.height)?];
    let n_aux = cfg.n_views - 1;
    for i in 0..n_aux {
        let phi = 2.0 * std::f64::consts::PI * i as f64 / n_aux as f64;
        let center = Vector3::new(phi.cos(), phi.sin(), 0.0) * cfg.baseline;
        let rot = if cfg.rotation_jitter > 0.0 {
            let j = cfg.rotation_jitter;
            let aa = Vector3::new(r.random_range(-j..=j), r.random_range(-j..=j), r.random_range(-j..=j));
            *Rotation3::from_scaled_axis(aa).matrix()
        } else {
            Matrix3::identity()
        };
        views.push(CameraView::new(k, rot, -(rot * center), cfg.width, cfg.height)?);
    }
    Ok(views)
}

/// Coarse spatial hash for minimum-separation checks.
struct Occupancy {
    cell: f64,
    cols: usize,
    buckets: Vec<Vec<Vector2<f64>>>,
}

impl Occupancy {
    fn new(width: usize, height: usize, cell: f64) -> Self {
        let cell = cell.max(1.0);
        let cols = (width as f64 / cell).ceil() as usize + 1;
        let rows = (height as f64 / cell).ceil() as usize + 1;
        Self { cell, cols, buckets: vec![Vec::new(); cols * rows] }
    }

    fn key(&self, p: &Vector2<f64>) -> (usize, usize) {
        ((p.x / self.cell).floor().max(0.0) as usize, (p.y / self.cell).floor().max(0.0) as usize)
    }

    fn is_free(&self, p: &Vector2<f64>, min_dist: f64) -> bool {
        let (cx, cy) = self.key(p);
        let rows = self.buckets.len() / self.cols;
        for y in cy.saturating_sub(1)..=(cy + 1).min(rows - 1) {
            for x in cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1) {
                if self.buckets[y * self.cols + x].iter().any(|q| (q - p).norm() < min_dist) {
                    return false;
                }
            }
        }
        true
    }

    fn insert(&mut self, p: Vector2<f64>) {
        let (cx, cy) = self.key(&p);
        let i = cy * self.cols + cx;
        self.buckets[i].push(p);
    }
}

fn inside(cfg: &SceneConfig, p: &Vector2<f64>) -> bool {
    let m = cfg.border_margin;
    p.x >= m && p.y >= m && p.x <= cfg.width as f64 - 1.0 - m && p.y <= cfg.height as f64 - 1.0 - m
}

fn sample_points(cfg: &SceneConfig, views: &[CameraView<f64>]) -> Result<Vec<Vector3<f64>>, SynthError> {
    let mut r = rng::stream(cfg.seed, "scene/points");
    let mut occupancy: Vec<Occupancy> =
        views.iter().map(|_| Occupancy::new(cfg.width, cfg.height, cfg.min_separation)).collect();
    let m = cfg.border_margin.ceil() as usize;
    if cfg.width <= 2 * m + 1 || cfg.height <= 2 * m + 1 {
        return Err(SynthError::InvalidConfig("border margin leaves no room for points".into()));
    }
    let mut points = Vec::with_capacity(cfg.n_points);
    'points: for point in 0..cfg.n_points {
        for _ in 0..MAX_REJECTION_ROUNDS {
            let u = r.random_range(m..cfg.width - m) as f64;
            let v = r.random_range(m..cfg.height - m) as f64;
            let depth = r.random_range(cfg.depth_min..=cfg.depth_max);
            let x = views[0].unproject(&Vector2::new(u, v), depth);
            let mut projections = Vec::with_capacity(views.len());
            for (view, occ) in views.iter().zip(&occupancy) {
                let pixel = if projections.is_empty() {
                    Vector2::new(u, v)
                } else {
                    match view.project(&x) {
                        Ok(p) => p.pixel,
                        Err(_) => break,
                    }
                };
                if !inside(cfg, &pixel) || !occ.is_free(&pixel, cfg.min_separation) {
                    break;
                }
                projections.push(pixel);
            }
            if projections.len() == views.len() {
                for (occ, p) in occupancy.iter_mut().zip(projections) {
                    occ.insert(p);
                }
                points.push(x);
                continue 'points;
            }
        }
        return Err(SynthError::InfeasibleVisibility { point, rounds: MAX_REJECTION_ROUNDS });
    }
    Ok(points)
}

fn splat_field(
    cfg: &SceneConfig,
    view_index: usize,
    centers: &[Vector2<f64>],
    descriptors: &[Vec<f64>],
) -> Result<DescriptorField<f64>, SynthError> {
    let s = cfg.descriptor_stride;
    let gw = (cfg.width - 1) / s + 1;
    let gh = (cfg.height - 1) / s + 1;
    let dim = cfg.descriptor_dim;
    let sigma = cfg.peak_sharpness;
    let radius = 4.0 * sigma;
    let mut acc = vec![0.0f64; gw * gh * dim];
    let mut mass = vec![0.0f64; gw * gh];
    for (c, d) in centers.iter().zip(descriptors) {
        let c0 = ((c.x - radius) / s as f64).ceil().max(0.0) as usize;
        let c1 = (((c.x + radius) / s as f64).floor() as usize).min(gw - 1);
        let r0 = ((c.y - radius) / s as f64).ceil().max(0.0) as usize;
        let r1 = (((c.y + radius) / s as f64).floor() as usize).min(gh - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = Vector2::new((col * s) as f64, (row * s) as f64);
                let d2 = (p - c).norm_squared();
                if d2 > radius * radius {
                    continue;
                }
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                let node = row * gw + col;
                mass[node] += g;
                for (a, &v) in acc[node * dim..(node + 1) * dim].iter_mut().zip(d) {
                    *a += g * v;
                }
            }
        }
    }
    let mut r = rng::stream(cfg.seed, &format!("scene/background/{view_index}"));
    let (_, anchor_bg, aux_bg) = blocks(dim);
    let support = if view_index == 0 { anchor_bg } else { aux_bg };
    let mut values = Vec::with_capacity(acc.len());
    for node in 0..gw * gh {
        let background = random_unit(&mut r, dim, support.clone());
        let bw = cfg.background_weight;
        let mut v: Vec<f64> = acc[node * dim..(node + 1) * dim]
            .iter()
            .zip(&background)
            .map(|(a, b)| a + bw * b)
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            v = background;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        values.extend(v.into_iter().map(|x| x as f32 as f64));
    }
    Ok(DescriptorField::new(gh, gw, dim, s, values)?)
}

fn score_map(cfg: &SceneConfig, centers: &[Vector2<f64>], amplitudes: &[f64]) -> Result<ScoreMap<f64>, SynthError> {
    let (w, h) = (cfg.width, cfg.height);
    let sigma = cfg.score_sharpness;
    let radius = 4.0 * sigma;
    let mut values = vec![0.0f64; w * h];
    for (c, &amp) in centers.iter().zip(amplitudes) {
        let c0 = (c.x - radius).ceil().max(0.0) as usize;
        let c1 = ((c.x + radius).floor() as usize).min(w - 1);
        let r0 = (c.y - radius).ceil().max(0.0) as usize;
        let r1 = ((c.y + radius).floor() as usize).min(h - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let d2 = (Vector2::new(col as f64, row as f64) - c).norm_squared();
                let s = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                let slot = &mut values[row * w + col];
                if s > *slot {
                    *slot = s;
                }
            }
        }
    }
    let values = values.into_iter().map(|v| (v as f32 as f64).clamp(0.0, 1.0)).collect();
    Ok(ScoreMap::new(h, w, values)?)
}

fn gt_depth(cfg: &SceneConfig, view: &CameraView<f64>, points: &[Vector3<f64>]) -> DepthImage<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let mut raw = vec![0.0f64; w * h];
    for x in points {
        let Ok(p) = view.project(x) else { continue };
        let col = (p.pixel.x + 0.5).floor();
        let row = (p.pixel.y + 0.5).floor();
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        let i = row as usize * w + col as usize;
        if raw[i] == 0.0 || p.depth < raw[i] {
            raw[i] = p.depth;
        }
    }
    DepthImage::from_raw(w, h, raw).expect("projective depths are positive")
}

pub fn generate_scene(config: &SceneConfig) -> Result<Scene, SynthError> {
    config.validate()?;
    let views = make_views(config)?;
    let points = sample_points(config, &views)?;

    let mut r = rng::stream(config.seed, "scene/descriptors");
    let point_descriptors: Vec<Vec<f64>> = points.iter().map(|_| random_unit(&mut r, config.descriptor_dim, blocks(config.descriptor_dim).0)).collect();

    let mut noise = rng::stream(config.seed, "scene/noise");
    let mut planted: Vec<Vec<Vector2<f64>>> = Vec::with_capacity(points.len());
    for x in &points {
        let mut per_view = Vec::with_capacity(views.len());
        for (k, view) in views.iter().enumerate() {
            let mut p = view.project(x)?.pixel;
            if k > 0 && config.pixel_noise > 0.0 {
                p += Vector2::new(gaussian(&mut noise), gaussian(&mut noise)) * config.pixel_noise;
            }
            per_view.push(p);
        }
        planted.push(per_view);
    }

    let mut sr = rng::stream(config.seed, "scene/scores");
    let amplitudes: Vec<f64> = points.iter().map(|_| sr.random_range(0.5..1.0)).collect();

    let mut descriptors = Vec::with_capacity(views.len());
    let mut score_maps = Vec::with_capacity(views.len());
    let mut gt = Vec::with_capacity(views.len());
    for (k, view) in views.iter().enumerate() {
        let centers: Vec<Vector2<f64>> = planted.iter().map(|p| p[k]).collect();
        descriptors.push(splat_field(config, k, &centers, &point_descriptors)?);
        score_maps.push(score_map(config, &centers, &amplitudes)?);
        gt.push(gt_depth(config, view, &points));
    }
    Ok(Scene {
        config: config.clone(),
        points,
        views,
        descriptors,
        score_maps,
        gt_depth: gt,
        point_descriptors,
        planted,
    })
}

/// Exact projection of point `point_id` in view `view_id`.
pub fn oracle_match(scene: &Scene, point_id: usize, view_id: usize) -> Result<Vector2<f64>, SynthError> {
    let not_visible = SynthError::NotVisible { point: point_id, view: view_id };
    let x = scene.points.get(point_id).ok_or(not_visible.clone())?;
    let view = scene.views.get(view_id).ok_or(not_visible.clone())?;
    let p = view.project(x).map_err(|_| not_visible.clone())?;
    if !view.contains(&p.pixel) {
        return Err(not_visible);
    }
    Ok(p.pixel)
}

/// Unweighted DLT solved through the eigen-decomposition of the 4x4 normal
/// matrix `A^T A`, accumulated directly from rank-one terms.
pub fn normal_equations_triangulate(obs: &[(Vector2<f64>, Matrix3x4<f64>)]) -> Result<Vector3<f64>, SynthError> {
    if obs.len() < 2 {
        return Err(SynthError::Underdetermined(obs.len()));
    }
    let mut normal = Matrix4::zeros();
    for (pixel, p) in obs {
        let p1: Vector4<f64> = p.row(0).transpose();
        let p2: Vector4<f64> = p.row(1).transpose();
        let p3: Vector4<f64> = p.row(2).transpose();
        for a in [p3 * pixel.x - p1, p3 * pixel.y - p2] {
            normal += a * a.transpose();
        }
    }
    let eig = SymmetricEigen::new(normal);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("4 eigenvalues");
    let z = eig.eigenvectors.column(idx);
    if z[3].abs() <= 1e-12 {
        return Err(SynthError::PointAtInfinity);
    }
    Ok(Vector3::new(z[0] / z[3], z[1] / z[3], z[2] / z[3]))
}

/// Oracle triangulation of a scene point from its exact projections in every
/// view where it is visible, optionally perturbed by seeded pixel noise.
pub fn oracle_triangulate(
    scene: &Scene,
    point_id: usize,
    pixel_noise_sd: f64,
    seed: u64,
) -> Result<Vector3<f64>, SynthError> {
    let mut r = rng::stream(seed, "oracle_triangulate");
    let mut obs = Vec::new();
    for (k, view) in scene.views.iter().enumerate() {
        let Ok(mut pixel) = oracle_match(scene, point_id, k) else { continue };
        if pixel_noise_sd > 0.0 {
            pixel += Vector2::new(gaussian(&mut r), gaussian(&mut r)) * pixel_noise_sd;
        }
        obs.push((pixel, *view.projection()));
    }
    normal_equations_triangulate(&obs)
}
