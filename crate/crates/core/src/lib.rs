//! Differentiable multi-view matching and triangulation.
//!
//! Anchor interest points are matched along epipolar lines in auxiliary
//! views by descriptor correlation and soft-argmax, then triangulated by a
//! confidence-weighted DLT solved with SVD. The resulting sparse depth feeds
//! loss terms and depth metrics.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, with `*F32` variants for single precision.

pub mod depth_tools;
pub mod geometry;
pub mod interest_points;
pub mod io;
pub mod matching;
pub mod real;
pub mod rng;
pub mod scene_synth;
pub mod triangulation;

pub use depth_tools::{
    densify_idw, depth_metrics, detector_cross_entropy, edge_aware_smoothness, impute_sparse_depth,
    multiscale_depth_loss, smooth_l1, total_loss, DepthError, LossComponents, LossConfig, MetricsReport,
};
pub use geometry::{fundamental_matrix, projection_matrix, sample_epipolar_segment, EpipolarSampler, GeometryError};
pub use interest_points::{apply_ratio, detect, fill_random, InterestPointError, PointSource};
pub use io::IoError;
pub use matching::{
    bilinear_sample, correlate, match_point, soft_argmax, soft_argmax_jacobian, spatial_softmax, MatchConfig,
    MatchError,
};
pub use real::Real;
pub use scene_synth::{generate_scene, oracle_match, oracle_triangulate, Scene, SceneConfig, SynthError};
pub use triangulation::{grad_triangulate, triangulate, triangulate_batch, TriangulationError};

pub type Camera = geometry::CameraView<f64>;
pub type CameraF32 = geometry::CameraView<f32>;
pub type Fundamental = geometry::FundamentalMatrix<f64>;
pub type SampleGrid = geometry::EpipolarSampleGrid<f64>;
pub type SampleGridF32 = geometry::EpipolarSampleGrid<f32>;
pub type Descriptors = matching::DescriptorField<f64>;
pub type DescriptorsF32 = matching::DescriptorField<f32>;
pub type Correlation = matching::CorrelationMap<f64>;
pub type Match = matching::MatchResult<f64>;
pub type Scores = interest_points::ScoreMap<f64>;
pub type InterestPoints = interest_points::InterestPointSet<f64>;
pub type Observation = triangulation::Observation<f64>;
pub type ObservationF32 = triangulation::Observation<f32>;
pub type Triangulated = triangulation::TriangulatedPoint<f64>;
pub type TriangulatedF32 = triangulation::TriangulatedPoint<f32>;
pub type Depth = depth_tools::DepthImage<f64>;
pub type DepthF32 = depth_tools::DepthImage<f32>;
pub type Metrics = depth_tools::MetricsReport<f64>;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    InterestPoint(#[from] InterestPointError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Triangulation(#[from] TriangulationError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] IoError),
}
