//! Localization of geo-tagged images against the map.
//!
//! A geo-tagged image that matched some keyframe brings a handful of
//! 3D-map-point ↔ 2D-keypoint correspondences. Its map-frame pose is
//! recovered by Levenberg–Marquardt on the reprojection error of those
//! matches, starting from the matched keyframe's pose (which is close by
//! construction — the image matched that keyframe's view). A Huber first
//! pass tolerates bad matches, inliers are then classified by a χ²
//! gate, and a quadratic refit on the inliers polishes the pose.
//!
//! The result is paired with the image's world-frame geo-tag into a
//! [`GeoCorrespondence`], the unit consumed by the initialization,
//! pose-graph, and bundle-adjustment stages.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::ba::{project, Camera, ReprojectionBlock, DEFAULT_HUBER_PIXELS};
use crate::init::GeoCorrespondence;
use crate::io::GeoAnchor;
use crate::manifold::SE3;
use crate::pipeline::Scene;
use crate::solver::{Problem, SolverError, SolverOptions, Variable};

/// Minimum number of matches for a solve attempt.
pub const MIN_MATCHES: usize = 4;

/// Inlier gate on the squared reprojection residual (95% χ² quantile,
/// two degrees of freedom), square pixels.
pub const INLIER_THRESHOLD_SQ_PIXELS: f64 = 5.99;

/// Smallest acceptable inlier fraction.
pub const MIN_INLIER_RATIO: f64 = 0.5;

/// Eigenvalue ratio below which the matched points count as collinear.
const COLLINEARITY_RATIO: f64 = 1e-12;

/// Errors from geo-image localization.
#[derive(Debug, Error)]
pub enum PnpError {
    /// Not enough matches to attempt a solve.
    #[error("geo image {id} has {got} matches; at least {MIN_MATCHES} required")]
    TooFewMatches { id: u64, got: usize },
    /// A match references a map point the scene lacks.
    #[error("match references unknown map point {point}")]
    UnknownMapPoint { point: u64 },
    /// The matched points are collinear (or coincident), leaving the
    /// pose unobservable.
    #[error("matched map points are collinear; pose is unobservable")]
    DegenerateGeometry,
    /// Too few matches project in front of the camera at the guess for
    /// the optimization to see a usable gradient.
    #[error("only {usable} of {total} matches project in front of the initial guess")]
    GuessBehindCamera { usable: usize, total: usize },
    /// The consensus after optimization is too thin to trust.
    #[error("only {inliers} of {total} matches are inliers (need at least half)")]
    LowInlierRatio { inliers: usize, total: usize },
    /// Failure propagated from the solver (divergence, rank collapse).
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// The 3D-to-2D matches of one geo-tagged image against the map.
#[derive(Clone, Debug)]
pub struct MapGeoMatches {
    /// Identifier of the geo-tagged image.
    pub geo_image_id: u64,
    /// Intrinsics of the geo image (not necessarily the mapping camera).
    pub camera: Camera,
    /// Matched (map point id, measured pixel) pairs.
    pub matches: Vec<(u64, Vector2<f64>)>,
}

/// Huber cost of one pose over a match set; a point behind the camera
/// yields an infinite cost.
fn robust_cost(
    camera: &Camera,
    pose: &SE3,
    matches: &[(Vector3<f64>, Vector2<f64>)],
    delta: f64,
) -> f64 {
    matches
        .iter()
        .map(|(point, pixel)| match project(camera, pose, point) {
            Ok(predicted) => {
                let r = (pixel - predicted).norm();
                if r <= delta {
                    r * r
                } else {
                    2.0 * delta * r - delta * delta
                }
            }
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Squared reprojection residual of one match, or `None` behind camera.
fn squared_residual(
    camera: &Camera,
    pose: &SE3,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
) -> Option<f64> {
    project(camera, pose, point)
        .ok()
        .map(|predicted| (pixel - predicted).norm_squared())
}

/// One LM pass over the pose with the matched points held fixed.
fn refine_pose(
    camera: &Camera,
    matches: &[(Vector3<f64>, Vector2<f64>)],
    start: &SE3,
    huber: f64,
) -> Result<SE3, SolverError> {
    let mut problem = Problem::new();
    let pose_var = problem.add_variable(Variable::Se3(*start));
    for (point, pixel) in matches {
        let point_var = problem.add_fixed_variable(Variable::Euclidean(
            nalgebra::DVector::from_column_slice(point.as_slice()),
        ));
        problem.add_residual(Box::new(ReprojectionBlock {
            camera: *camera,
            pixel: *pixel,
            vars: [pose_var, point_var],
            huber,
        }));
    }
    problem.solve(&SolverOptions::default())?;
    Ok(*problem.variable(pose_var).as_se3())
}

/// Recovers the map-frame pose of a geo-tagged image from its matches.
///
/// The returned inlier count is the number of matches whose squared
/// residual at the returned pose passes [`INLIER_THRESHOLD_SQ_PIXELS`].
///
/// # Errors
///
/// [`PnpError::TooFewMatches`], [`PnpError::UnknownMapPoint`],
/// [`PnpError::DegenerateGeometry`] for collinear match geometry,
/// [`PnpError::GuessBehindCamera`] when the guess faces away from the
/// matched structure, [`PnpError::LowInlierRatio`] when consensus stays
/// under [`MIN_INLIER_RATIO`], and [`PnpError::Solver`] on divergence.
pub fn localize_geo_image(
    scene: &Scene,
    matches: &MapGeoMatches,
    initial_guess: &SE3,
) -> Result<(SE3, usize), PnpError> {
    let total = matches.matches.len();
    if total < MIN_MATCHES {
        return Err(PnpError::TooFewMatches {
            id: matches.geo_image_id,
            got: total,
        });
    }
    let mut located: Vec<(Vector3<f64>, Vector2<f64>)> = Vec::with_capacity(total);
    for &(point_id, pixel) in &matches.matches {
        let point = scene
            .map_points
            .get(&point_id)
            .ok_or(PnpError::UnknownMapPoint { point: point_id })?;
        located.push((point.position, pixel));
    }

    // Collinear structure leaves a rotation about the common line
    // unobservable; reject before the solver runs into the flat
    // direction.
    let centroid: Vector3<f64> =
        located.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / total as f64;
    let mut covariance = Matrix3::zeros();
    for (p, _) in &located {
        let d = p - centroid;
        covariance += d * d.transpose();
    }
    let mut eigenvalues: Vec<f64> = covariance.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    if eigenvalues[0] <= 0.0 || eigenvalues[1] / eigenvalues[0] <= COLLINEARITY_RATIO {
        return Err(PnpError::DegenerateGeometry);
    }

    // Matches invisible from the guess carry no usable gradient; they are
    // excluded from the optimization and can never classify as inliers.
    let camera = &matches.camera;
    let visible: Vec<(Vector3<f64>, Vector2<f64>)> = located
        .iter()
        .filter(|(point, _)| project(camera, initial_guess, point).is_ok())
        .copied()
        .collect();
    if visible.len() < MIN_MATCHES {
        return Err(PnpError::GuessBehindCamera {
            usable: visible.len(),
            total,
        });
    }

    let robust = refine_pose(camera, &visible, initial_guess, DEFAULT_HUBER_PIXELS)?;

    let inlier_set: Vec<(Vector3<f64>, Vector2<f64>)> = located
        .iter()
        .filter(|(point, pixel)| {
            squared_residual(camera, &robust, point, pixel)
                .is_some_and(|r2| r2 < INLIER_THRESHOLD_SQ_PIXELS)
        })
        .copied()
        .collect();
    if (inlier_set.len() as f64) < MIN_INLIER_RATIO * total as f64 {
        return Err(PnpError::LowInlierRatio {
            inliers: inlier_set.len(),
            total,
        });
    }

    // Quadratic polish on the consensus set; keep the robust pose if the
    // refit does not improve the robust cost over every match (this also
    // preserves the cost-no-worse-than-guess guarantee, since the first
    // LM pass is monotone from the guess).
    let polished = refine_pose(camera, &inlier_set, &robust, f64::INFINITY)?;
    let final_pose = if robust_cost(camera, &polished, &located, DEFAULT_HUBER_PIXELS)
        <= robust_cost(camera, &robust, &located, DEFAULT_HUBER_PIXELS)
    {
        polished
    } else {
        robust
    };

    let inliers = located
        .iter()
        .filter(|(point, pixel)| {
            squared_residual(camera, &final_pose, point, pixel)
                .is_some_and(|r2| r2 < INLIER_THRESHOLD_SQ_PIXELS)
        })
        .count();
    if (inliers as f64) < MIN_INLIER_RATIO * total as f64 {
        return Err(PnpError::LowInlierRatio { inliers, total });
    }
    Ok((final_pose, inliers))
}

/// Pairs a map-frame localization with its world-frame geo-tag.
///
/// The anchor must be [normalized](GeoAnchor::normalized); its world
/// pose places the geo-tag at (easting, height, northing) with the
/// heading/pitch/roll orientation.
pub fn make_geo_correspondence(
    pose_map: &SE3,
    geotag: &GeoAnchor,
    keyframe_id: u64,
) -> GeoCorrespondence {
    GeoCorrespondence::new(
        pose_map.to_sim3(),
        geotag.world_pose(),
        keyframe_id,
        geotag.id,
    )
}
