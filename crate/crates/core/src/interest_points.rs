//! Interest point selection: thresholded greedy NMS on a score map, topped up
//! with seeded random points.

use std::collections::HashSet;

use nalgebra::Vector2;
use rand::Rng;
use thiserror::Error;

use crate::real::Real;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterestPointError {
    #[error("invalid score map: {0}")]
    InvalidScoreMap(String),
    #[error("cannot place {requested} points in a {width}x{height} image holding {existing} points")]
    Infeasible { requested: usize, existing: usize, width: usize, height: usize },
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
}

/// Dense detector output in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T: Real> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> ScoreMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self, InterestPointError> {
        if values.len() != height * width {
            return Err(InterestPointError::InvalidScoreMap(format!(
                "{} values for a {}x{} map",
                values.len(),
                height,
                width
            )));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite_val() || *v < T::zero() || *v > T::one())
        {
            return Err(InterestPointError::InvalidScoreMap(format!(
                "entry {i} = {} is outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointSource {
    Detected,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterestPoint<T: Real> {
    /// Pixel position `(u, v)` = `(column, row)`.
    pub pixel: Vector2<T>,
    pub score: T,
    pub source: PointSource,
}

/// Anchor interest points for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestPointSet<T: Real> {
    pub points: Vec<InterestPoint<T>>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> InterestPointSet<T> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { points: Vec::new(), width, height }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, source: PointSource) -> usize {
        self.points.iter().filter(|p| p.source == source).count()
    }

    pub fn pixels(&self) -> impl Iterator<Item = Vector2<T>> + '_ {
        self.points.iter().map(|p| p.pixel)
    }
}

/// Greedy non-maximum suppression in descending score order.
///
/// A candidate survives when its score is at least `threshold` and no kept
/// point lies within Chebyshev distance `nms_radius`. Ties in score are broken
/// by `(row, column)` so the result does not depend on traversal order.
pub fn detect<T: Real>(
    score_map: &ScoreMap<T>,
    threshold: T,
    nms_radius: usize,
    max_points: usize,
) -> InterestPointSet<T> {
    let (h, w) = (score_map.height, score_map.width);
    let mut candidates: Vec<usize> = (0..h * w)
        .filter(|&i| score_map.values[i] >= threshold)
        .collect();
    // Stable sort on descending score keeps row-major order among ties.
    candidates.sort_by(|&a, &b| {
        score_map.values[b]
            .partial_cmp(&score_map.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut suppressed = vec![false; h * w];
    let mut out = InterestPointSet::empty(w, h);
    for idx in candidates {
        if out.len() >= max_points {
            break;
        }
        if suppressed[idx] {
            continue;
        }
        let (row, col) = (idx / w, idx % w);
        let r0 = row.saturating_sub(nms_radius);
        let r1 = (row + nms_radius).min(h - 1);
        let c0 = col.saturating_sub(nms_radius);
        let c1 = (col + nms_radius).min(w - 1);
        for r in r0..=r1 {
            suppressed[r * w + c0..=r * w + c1].fill(true);
        }
        out.points.push(InterestPoint {
            pixel: Vector2::new(T::from_usize(col).unwrap(), T::from_usize(row).unwrap()),
            score: score_map.values[idx],
            source: PointSource::Detected,
        });
    }
    out
}

fn rounded_pixel<T: Real>(p: &Vector2<T>) -> (i64, i64) {
    let half = T::lit(0.5);
    ((p.x + half).floor().as_f64() as i64, (p.y + half).floor().as_f64() as i64)
}

/// Appends uniformly random integer pixels (no duplicates with existing
/// points after rounding) until the set holds `total` points.
///
/// Draws come from the `"fill_random"` stream of `seed`; see [`crate::rng`].
pub fn fill_random<T: Real>(
    points: &InterestPointSet<T>,
    total: usize,
    seed: u64,
) -> Result<InterestPointSet<T>, InterestPointError> {
    let (w, h) = (points.width, points.height);
    let mut taken: HashSet<(i64, i64)> = points.points.iter().map(|p| rounded_pixel(&p.pixel)).collect();
    let infeasible = InterestPointError::Infeasible {
        requested: total,
        existing: points.len(),
        width: w,
        height: h,
    };
    if total < points.len() {
        return Err(infeasible);
    }
    let missing = total - points.len();
    let free = (w * h).saturating_sub(
        taken
            .iter()
            .filter(|(u, v)| *u >= 0 && *v >= 0 && (*u as usize) < w && (*v as usize) < h)
            .count(),
    );
    if total > w * h || missing > free {
        return Err(infeasible);
    }

    let mut out = points.clone();
    let mut rng = rng::stream(seed, "fill_random");
    while out.len() < total {
        let u = rng.random_range(0..w) as i64;
        let v = rng.random_range(0..h) as i64;
        if taken.insert((u, v)) {
            out.points.push(InterestPoint {
                pixel: Vector2::new(T::from_i64(u).unwrap(), T::from_i64(v).unwrap()),
                score: T::one(),
                source: PointSource::Random,
            });
        }
    }
    Ok(out)
}

/// Keeps the top-scoring `floor(ratio * total)` detections and fills the rest
/// with random points.
pub fn apply_ratio<T: Real>(
    detected: &InterestPointSet<T>,
    ratio: f64,
    total: usize,
    seed: u64,
) -> Result<InterestPointSet<T>, InterestPointError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(InterestPointError::InvalidRatio(ratio));
    }
    let keep = ((ratio * total as f64).floor() as usize).min(total);
    let mut ranked: Vec<InterestPoint<T>> = detected.points.clone();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                let (pa, pb) = (rounded_pixel(&a.pixel), rounded_pixel(&b.pixel));
                (pa.1, pa.0).cmp(&(pb.1, pb.0))
            })
    });
    ranked.truncate(keep);
    let kept = InterestPointSet { points: ranked, width: detected.width, height: detected.height };
    fill_random(&kept, total, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_with(values: &[(usize, usize, f64)], h: usize, w: usize) -> ScoreMap<f64> {
        let mut v = vec![0.0; h * w];
        for &(r, c, s) in values {
            v[r * w + c] = s;
        }
        ScoreMap::new(h, w, v).unwrap()
    }

    #[test]
    fn nms_suppresses_within_radius() {
        let m = map_with(&[(10, 10, 0.9), (10, 15, 0.8)], 30, 30);
        let kept = detect(&m, 0.0005, 9, 100);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.points[0].pixel, Vector2::new(10.0, 10.0));
        assert_eq!(kept.points[0].score, 0.9);

        let kept = detect(&m, 0.0005, 3, 100);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn threshold_and_budget() {
        let m = map_with(&[(1, 1, 0.0001), (5, 5, 0.0004)], 8, 8);
        assert!(detect(&m, 0.0005, 1, 10).is_empty());
        let m = map_with(&[(0, 0, 0.9), (0, 4, 0.8), (0, 7, 0.7)], 8, 8);
        let kept = detect(&m, 0.0005, 1, 2);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept.points[1].score, 0.8);
    }

    #[test]
    fn ties_break_row_major() {
        let m = map_with(&[(3, 5, 0.5), (3, 4, 0.5)], 10, 10);
        let kept = detect(&m, 0.1, 2, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.points[0].pixel, Vector2::new(4.0, 3.0));
    }

    #[test]
    fn score_map_validation() {
        assert!(ScoreMap::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(ScoreMap::new(1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(ScoreMap::new(1, 3, vec![0.5, 0.2]).is_err());
    }

    #[test]
    fn fill_random_examples() {
        let mut base = InterestPointSet::<f64>::empty(320, 240);
        for i in 0..256 {
            base.points.push(InterestPoint {
                pixel: Vector2::new((i % 32) as f64 * 10.0, (i / 32) as f64 * 10.0),
                score: 0.5,
                source: PointSource::Detected,
            });
        }
        let full = fill_random(&base, 512, 3).unwrap();
        assert_eq!(full.len(), 512);
        assert_eq!(full.count(PointSource::Random), 256);
        assert_eq!(full.points[..256], base.points[..]);

        let same = fill_random(&base, 256, 3).unwrap();
        assert_eq!(same, base);

        assert_eq!(fill_random(&base, 512, 3).unwrap(), full);
        assert_ne!(fill_random(&base, 512, 4).unwrap(), full);

        let pixels: HashSet<(i64, i64)> = full.points.iter().map(|p| rounded_pixel(&p.pixel)).collect();
        assert_eq!(pixels.len(), 512);
    }

    #[test]
    fn fill_random_rejects_infeasible() {
        let base = InterestPointSet::<f64>::empty(4, 4);
        assert!(matches!(fill_random(&base, 17, 0), Err(InterestPointError::Infeasible { .. })));
        // Exactly filling the image succeeds.
        assert_eq!(fill_random(&base, 16, 0).unwrap().len(), 16);
    }

    #[test]
    fn ratio_examples() {
        let mut values = vec![0.0; 240 * 320];
        for i in 0..300 {
            values[(i / 20) * 16 * 320 + (i % 20) * 16] = 0.5 + (i as f64) / 1000.0;
        }
        let map = ScoreMap::new(240, 320, values).unwrap();
        let det = detect(&map, 0.0005, 9, 512);
        assert_eq!(det.len(), 300);

        let r0 = apply_ratio(&det, 0.0, 512, 1).unwrap();
        assert_eq!(r0.count(PointSource::Random), 512);
        let r1 = apply_ratio(&det, 1.0, 300, 1).unwrap();
        assert_eq!(r1.count(PointSource::Random), 0);
        let half = apply_ratio(&det, 0.5, 512, 1).unwrap();
        assert_eq!(half.count(PointSource::Detected), 256);
        assert_eq!(half.count(PointSource::Random), 256);
        // The kept detections are the highest scoring ones.
        let min_kept = half.points[..256].iter().map(|p| p.score).fold(1.0, f64::min);
        assert!(min_kept >= 0.5 + 44.0 / 1000.0 - 1e-12);
        assert!(apply_ratio(&det, 1.5, 512, 1).is_err());
    }

    proptest! {
        #[test]
        fn kept_points_are_separated(seed in 0u64..1000, radius in 0usize..6) {
            let mut r = rng::stream(seed, "test");
            let values: Vec<f64> = (0..40 * 50).map(|_| r.random::<f64>()).collect();
            let map = ScoreMap::new(40, 50, values).unwrap();
            let kept = detect(&map, 0.2, radius, 1000);
            for (i, a) in kept.points.iter().enumerate() {
                for b in &kept.points[i + 1..] {
                    let d = (a.pixel - b.pixel).abs().max();
                    prop_assert!(d > radius as f64);
                }
            }
        }

        #[test]
        fn detection_ignores_storage_transposition(seed in 0u64..500) {
            // Transposing the map and the result must commute when all scores
            // are distinct; traversal order plays no role.
            let mut r = rng::stream(seed, "test");
            let (h, w) = (23, 31);
            let values: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
            let mut transposed = vec![0.0; h * w];
            for row in 0..h {
                for col in 0..w {
                    transposed[col * h + row] = values[row * w + col];
                }
            }
            let a = detect(&ScoreMap::new(h, w, values).unwrap(), 0.3, 2, 1000);
            let b = detect(&ScoreMap::new(w, h, transposed).unwrap(), 0.3, 2, 1000);
            let mut pa: Vec<(i64, i64)> = a.points.iter().map(|p| rounded_pixel(&p.pixel)).collect();
            let mut pb: Vec<(i64, i64)> = b.points.iter().map(|p| { let q = rounded_pixel(&p.pixel); (q.1, q.0) }).collect();
            pa.sort();
            pb.sort();
            prop_assert_eq!(pa, pb);
        }
    }
}
