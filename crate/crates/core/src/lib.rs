//! Scale-drift correction for monocular 3D reconstructions.
//!
//! Monocular SLAM reconstructs trajectory and structure up to an unknown —
//! and slowly drifting — scale. This crate corrects such reconstructions by
//! fusing a sparse stream of geo-referenced camera poses (e.g. geo-tagged
//! street-level imagery localized against the map) in three stages:
//!
//! 1. a one-shot similarity alignment of the map to the world frame once a
//!    handful of geo-referenced poses are available ([`init`]),
//! 2. a windowed Sim(3) pose-graph optimization that distributes the scale
//!    error smoothly over recent keyframes ([`pgo`]), and
//! 3. a geo-constrained local bundle adjustment that refines structure and
//!    poses against the image observations ([`ba`]).
//!
//! [`pipeline`] wires the stages into an incremental driver fed one keyframe
//! at a time, [`sim`] generates synthetic scenes with controlled drift (plus
//! brute-force cost oracles used to validate the optimizers), and [`io`]
//! covers the on-disk formats: trajectory files, scene snapshots,
//! correspondence streams, flat config files and UTM geodesy.

pub mod ba;
pub mod init;
pub mod io;
pub mod manifold;
pub mod pgo;
pub mod pipeline;
pub mod pnp;
pub mod regression;
pub mod sim;
pub mod solver;

pub use ba::{BaOptions, Camera, Observation};
pub use init::{GeoCorrespondence, PlanarSimilarity, RansacOptions};
pub use io::config::{
    load_config, pipeline_from_config, pipeline_to_config, scenario_from_config,
    scenario_to_config, Config,
};
pub use io::geodesy::UtmCoord;
pub use io::scene_format::{load_scene, parse_scene, save_scene, serialize_scene};
pub use io::stream::{load_stream, parse_stream, save_stream, serialize_stream};
pub use io::trajectory::{
    load_trajectory, parse_trajectory, save_trajectory, serialize_trajectory, Trajectory,
    TrajectoryFormat, TrajectoryRecord,
};
pub use io::{GeoAnchor, IoError};
pub use manifold::{Rot3, Sim3, Sim3Tangent, SE3};
pub use pgo::{GraphWindow, PgoWeights, PoseGraph};
pub use pipeline::{
    CorrectionEvent, EventKind, GeoInput, KeyframeInput, MapPoint, Pipeline, PipelineConfig,
    PipelineError, Scene,
};
pub use pnp::MapGeoMatches;
pub use regression::{
    canned_cases, config_reference, drift_scenario, run_ablation, run_regression, run_stages,
    AblationStudy, CaseReport, MetricBounds, RegressionCase, RegressionError, RegressionSummary,
    Stages, VariantMetrics,
};
pub use sim::{DriftProfile, ScenarioSpec, Simulation, TrajectoryShape};
pub use solver::{Problem, SolveReport, SolverOptions, Variable};
