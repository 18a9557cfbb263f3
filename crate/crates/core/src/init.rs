//! One-shot geo-registration of a raw reconstruction.
//!
//! A monocular reconstruction lives in an arbitrary similarity frame. Once
//! a handful of map↔world correspondences are available, the map is pulled
//! into world coordinates in two steps:
//!
//! 1. **Plane alignment** — street-level trajectories are close to planar,
//!    so a principal-component analysis of the keyframe positions yields
//!    the ground-plane normal (the direction of least variance), and the
//!    map is rotated to make that normal the world up-axis (+y).
//! 2. **Planar similarity fit** — with the ground plane aligned, the
//!    remaining registration freedom is a 4-parameter similarity acting in
//!    the horizontal plane: scale `s`, yaw `θ`, and translation `(a, b)`
//!    in x/z. It is estimated from the correspondences by RANSAC over
//!    2-point minimal samples followed by Levenberg–Marquardt refinement
//!    of the full 3D point-to-point cost over the consensus set.
//!
//! The height translation is fixed to zero: four parameters cannot absorb
//! vertical offsets anyway, and the correspondences' height residuals
//! still participate in the refinement so the scale is conditioned by
//! them.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manifold::{Rot3, Sim3, SE3};
use crate::pipeline::Scene;
use crate::solver::{Problem, ResidualBlock, SolverError, SolverOptions, Variable};

/// Default RANSAC iteration count for the planar-similarity fit.
pub const DEFAULT_RANSAC_ITERATIONS: usize = 1000;

/// Default RANSAC inlier threshold in meters, sized for street-level
/// geo-tag position noise.
pub const DEFAULT_RANSAC_THRESHOLD: f64 = 5.0;

/// Smallest admissible spread of a minimal sample's horizontal footprint;
/// below this the two points coincide in x/z and determine nothing.
const MIN_SAMPLE_SPREAD: f64 = 1e-9;

/// Eigenvalue ratio below which the keyframe positions are declared
/// collinear (no unique plane).
const PLANE_RANK_RATIO: f64 = 1e-9;

/// Errors from the geo-registration stage.
#[derive(Debug, Error)]
pub enum InitError {
    /// Fewer inputs than the operation's minimum.
    #[error("{op} needs at least {needed} inputs, got {got}")]
    TooFewInputs {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    /// Keyframe positions are collinear; the plane normal is not unique.
    #[error("degenerate position covariance (mid/max eigenvalue ratio {ratio:.3e})")]
    RankDeficientPlane { ratio: f64 },
    /// Every RANSAC sample had a coincident horizontal footprint.
    #[error("all RANSAC samples degenerate (coincident x/z projections)")]
    DegenerateSamples,
    /// No minimal sample reached the required consensus size.
    #[error("no RANSAC consensus: best sample explains {best} of {needed} required inliers")]
    NoConsensus { best: usize, needed: usize },
    /// The scene was already geo-registered.
    #[error("initialization already applied to this scene")]
    AlreadyInitialized,
    /// Refinement failure propagated from the solver.
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// The 4-parameter horizontal-plane similarity: `p ↦ s·R_y(θ)·p + (a, 0, b)`.
///
/// The rotation block is
/// `[[cos θ, 0, −sin θ], [0, 1, 0], [sin θ, 0, cos θ]]`, i.e. a yaw about
/// the up-axis, and the uniform scale `s` applies to all three axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarSimilarity {
    /// Translation along world x (meters).
    pub a: f64,
    /// Translation along world z (meters).
    pub b: f64,
    /// Uniform scale, strictly positive.
    pub s: f64,
    /// Yaw about the up-axis, normalized to (−π, π].
    pub theta: f64,
}

impl PlanarSimilarity {
    /// The identity transform.
    pub fn identity() -> Self {
        PlanarSimilarity {
            a: 0.0,
            b: 0.0,
            s: 1.0,
            theta: 0.0,
        }
    }

    /// Builds the transform, asserting `s > 0` and normalizing `theta`.
    pub fn new(a: f64, b: f64, s: f64, theta: f64) -> Self {
        assert!(s.is_finite() && s > 0.0, "scale must be positive, got {s}");
        PlanarSimilarity {
            a,
            b,
            s,
            theta: normalize_angle(theta),
        }
    }

    /// The yaw rotation as a full 3D rotation. A negative angle about +y
    /// reproduces the `[[cos θ, 0, −sin θ], [0, 1, 0], [sin θ, 0, cos θ]]`
    /// block exactly.
    pub fn rotation(&self) -> Rot3 {
        Rot3::from_axis_angle(&Vector3::y_axis(), -self.theta)
    }

    /// The equivalent spatial similarity (zero height translation).
    pub fn to_sim3(self) -> Sim3 {
        Sim3 {
            rotation: self.rotation(),
            translation: Vector3::new(self.a, 0.0, self.b),
            scale: self.s,
        }
    }

    /// Applies the transform to a point.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.to_sim3().act(p)
    }

    /// Composes `self ∘ other` into a single planar similarity.
    pub fn compose(&self, other: &PlanarSimilarity) -> PlanarSimilarity {
        let (sin, cos) = self.theta.sin_cos();
        PlanarSimilarity::new(
            self.s * (cos * other.a - sin * other.b) + self.a,
            self.s * (sin * other.a + cos * other.b) + self.b,
            self.s * other.s,
            self.theta + other.theta,
        )
    }
}

/// Wraps an angle into (−π, π].
fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// One localized geo-tagged image: its pose in the map frame paired with
/// its geo-tag pose in the world frame.
#[derive(Clone, Debug)]
pub struct GeoCorrespondence {
    /// Position of the geo image in the map frame (translation of
    /// `map_pose`, kept in sync).
    pub map_point: Vector3<f64>,
    /// Geo-tag position in world coordinates (UTM x, height y, UTM z);
    /// equals the translation of `world_pose`.
    pub world_point: Vector3<f64>,
    /// Geo-image pose in the map frame. Stored as a similarity because
    /// the pose-graph stage optimizes these nodes over Sim(3); the scale
    /// component is one by construction after every write-back.
    pub map_pose: Sim3,
    /// Geo-tag pose in the world frame.
    pub world_pose: SE3,
    /// Keyframe against which the geo image was localized.
    pub keyframe_id: u64,
    /// Id of the originating geo anchor.
    pub anchor_id: u64,
}

impl GeoCorrespondence {
    /// Pairs a map-frame localization with its world-frame geo-tag,
    /// deriving the position fields from the poses.
    pub fn new(map_pose: Sim3, world_pose: SE3, keyframe_id: u64, anchor_id: u64) -> Self {
        GeoCorrespondence {
            map_point: map_pose.translation,
            world_point: world_pose.translation,
            map_pose,
            world_pose,
            keyframe_id,
            anchor_id,
        }
    }
}

/// RANSAC controls for [`fit_planar_similarity`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacOptions {
    /// Number of minimal samples drawn.
    pub iterations: usize,
    /// Inlier threshold on the 3D residual norm, meters.
    pub threshold: f64,
    /// Seed for the sampling generator.
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        RansacOptions {
            iterations: DEFAULT_RANSAC_ITERATIONS,
            threshold: DEFAULT_RANSAC_THRESHOLD,
            seed: 0,
        }
    }
}

/// Fits the ground plane to a set of positions and returns the rotation
/// taking its normal to the world up-axis (+y).
///
/// The normal is the eigenvector of the position covariance with the
/// smallest eigenvalue. Of the two possible normal signs, the one forming
/// the smaller rotation is chosen, which keeps an almost-aligned map
/// almost fixed.
///
/// # Errors
///
/// [`InitError::TooFewInputs`] below three points and
/// [`InitError::RankDeficientPlane`] when the positions are collinear
/// (middle eigenvalue vanishes relative to the largest).
pub fn fit_ground_plane(points: &[Vector3<f64>]) -> Result<Rot3, InitError> {
    if points.len() < 3 {
        return Err(InitError::TooFewInputs {
            op: "fit_ground_plane",
            needed: 3,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mean: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eigen = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| {
        eigen.eigenvalues[i]
            .partial_cmp(&eigen.eigenvalues[j])
            .expect("finite eigenvalues")
    });
    let [min_idx, mid_idx, max_idx] = order;
    let ratio = eigen.eigenvalues[mid_idx] / eigen.eigenvalues[max_idx].max(f64::MIN_POSITIVE);
    if !ratio.is_finite() || ratio <= PLANE_RANK_RATIO {
        return Err(InitError::RankDeficientPlane { ratio });
    }

    let mut normal: Vector3<f64> = eigen.eigenvectors.column(min_idx).into_owned();
    // The sign with non-negative y gives the smaller rotation onto +y.
    if normal.y < 0.0 {
        normal = -normal;
    }
    Ok(Rot3::rotation_between(&normal, &Vector3::y())
        .expect("sign flip precludes anti-parallel normals"))
}

/// Residual of one correspondence under the current `[a, b, ln s, θ]`
/// parameters: `p_world − A(params)·p_map`, a full 3D vector.
struct PlanarResidual {
    map: Vector3<f64>,
    world: Vector3<f64>,
    vars: [usize; 1],
}

impl ResidualBlock for PlanarResidual {
    fn dim(&self) -> usize {
        3
    }

    fn vars(&self) -> &[usize] {
        &self.vars
    }

    fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
        let p = vars[0].as_euclidean();
        let sim = PlanarSimilarity::new(p[0], p[1], p[2].exp(), p[3]);
        let r = self.world - sim.transform(&self.map);
        DVector::from_column_slice(&[r.x, r.y, r.z])
    }

    fn jacobian(&self, vars: &[&Variable], _arg: usize) -> Option<DMatrix<f64>> {
        let p = vars[0].as_euclidean();
        let s = p[2].exp();
        let (sin, cos) = p[3].sin_cos();
        let (x, y, z) = (self.map.x, self.map.y, self.map.z);
        // Transformed point components and their θ-derivatives.
        let tx = s * (cos * x - sin * z);
        let ty = s * y;
        let tz = s * (sin * x + cos * z);
        let mut j = DMatrix::zeros(3, 4);
        // Columns: [a, b, ln s, θ]; residual is world − transformed.
        j[(0, 0)] = -1.0;
        j[(2, 1)] = -1.0;
        j[(0, 2)] = -tx;
        j[(1, 2)] = -ty;
        j[(2, 2)] = -tz;
        j[(0, 3)] = -(-tz);
        j[(2, 3)] = -tx;
        Some(j)
    }

    fn label(&self) -> String {
        "planar-similarity".into()
    }
}

/// Exact similarity through two correspondences' horizontal projections.
///
/// Treating (x, z) as the complex plane, the transform is `w = c·q + d`
/// with `c = s·e^{iθ}`; two point pairs determine `c` and `d` uniquely
/// unless the map-side projections coincide.
fn minimal_similarity(
    p1: &GeoCorrespondence,
    p2: &GeoCorrespondence,
) -> Option<PlanarSimilarity> {
    let q1 = (p1.map_point.x, p1.map_point.z);
    let q2 = (p2.map_point.x, p2.map_point.z);
    let w1 = (p1.world_point.x, p1.world_point.z);
    let w2 = (p2.world_point.x, p2.world_point.z);
    let dq = (q1.0 - q2.0, q1.1 - q2.1);
    let dw = (w1.0 - w2.0, w1.1 - w2.1);
    let denom = dq.0 * dq.0 + dq.1 * dq.1;
    if denom.sqrt() < MIN_SAMPLE_SPREAD {
        return None;
    }
    // c = dw / dq in complex arithmetic.
    let c_re = (dw.0 * dq.0 + dw.1 * dq.1) / denom;
    let c_im = (dw.1 * dq.0 - dw.0 * dq.1) / denom;
    let s = (c_re * c_re + c_im * c_im).sqrt();
    if s < MIN_SAMPLE_SPREAD {
        return None;
    }
    let theta = c_im.atan2(c_re);
    // d = w1 − c·q1.
    let a = w1.0 - (c_re * q1.0 - c_im * q1.1);
    let b = w1.1 - (c_im * q1.0 + c_re * q1.1);
    Some(PlanarSimilarity::new(a, b, s, theta))
}

/// Sum of squared 3D residuals over the masked correspondences.
fn masked_cost(corrs: &[GeoCorrespondence], mask: &[bool], sim: &PlanarSimilarity) -> f64 {
    corrs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| (c.world_point - sim.transform(&c.map_point)).norm_squared())
        .sum()
}

/// Estimates the planar similarity registering map positions to world
/// positions: RANSAC over 2-point minimal samples (scored on the full 3D
/// residual), then Levenberg–Marquardt refinement of `[a, b, ln s, θ]`
/// over the consensus set. Returns the refined parameters and the
/// consensus mask.
///
/// # Errors
///
/// [`InitError::TooFewInputs`] below two correspondences,
/// [`InitError::DegenerateSamples`] when every sample is coincident in
/// x/z, [`InitError::NoConsensus`] when no sample explains at least the
/// minimal sample size, and solver errors from the refinement.
pub fn fit_planar_similarity(
    corrs: &[GeoCorrespondence],
    ransac: &RansacOptions,
) -> Result<(PlanarSimilarity, Vec<bool>), InitError> {
    if corrs.len() < 2 {
        return Err(InitError::TooFewInputs {
            op: "fit_planar_similarity",
            needed: 2,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ransac.seed);
    let mut best: Option<(usize, PlanarSimilarity)> = None;
    let mut any_sample_valid = false;
    for _ in 0..ransac.iterations {
        let i = rng.random_range(0..corrs.len());
        let mut j = rng.random_range(0..corrs.len() - 1);
        if j >= i {
            j += 1;
        }
        let Some(candidate) = minimal_similarity(&corrs[i], &corrs[j]) else {
            continue;
        };
        any_sample_valid = true;
        let inliers = corrs
            .iter()
            .filter(|c| {
                (c.world_point - candidate.transform(&c.map_point)).norm() < ransac.threshold
            })
            .count();
        if best.as_ref().is_none_or(|(n, _)| inliers > *n) {
            best = Some((inliers, candidate));
        }
    }
    if !any_sample_valid {
        return Err(InitError::DegenerateSamples);
    }
    let (consensus, seed_sim) = best.expect("a valid sample implies a best sample");
    if consensus < 2 {
        return Err(InitError::NoConsensus {
            best: consensus,
            needed: 2,
        });
    }
    let mask: Vec<bool> = corrs
        .iter()
        .map(|c| (c.world_point - seed_sim.transform(&c.map_point)).norm() < ransac.threshold)
        .collect();

    // LM refinement over the consensus set, parametrized by ln s to keep
    // the scale positive.
    let mut problem = Problem::new();
    let var = problem.add_variable(Variable::Euclidean(DVector::from_column_slice(&[
        seed_sim.a,
        seed_sim.b,
        seed_sim.s.ln(),
        seed_sim.theta,
    ])));
    for (corr, &inlier) in corrs.iter().zip(&mask) {
        if inlier {
            problem.add_residual(Box::new(PlanarResidual {
                map: corr.map_point,
                world: corr.world_point,
                vars: [var],
            }));
        }
    }
    problem.solve(&SolverOptions::default())?;
    let p = problem.variable(var).as_euclidean();
    let refined = PlanarSimilarity::new(p[0], p[1], p[2].exp(), p[3]);
    debug_assert!(
        masked_cost(corrs, &mask, &refined) <= masked_cost(corrs, &mask, &seed_sim) + 1e-12,
        "refinement must not increase the consensus cost"
    );
    Ok((refined, mask))
}

/// Applies the one-shot geo-registration to a scene: every keyframe pose,
/// map point, and correspondence map-side pose is transformed by
/// `lift ∘ similarity ∘ plane`, where `lift` is an optional constant
/// height offset (zero by default). Returns the composite transform that
/// was applied.
///
/// # Errors
///
/// [`InitError::AlreadyInitialized`] when called twice on one scene.
pub fn apply_initialization(
    scene: &mut Scene,
    plane: &Rot3,
    sim: &PlanarSimilarity,
    height_offset: f64,
) -> Result<Sim3, InitError> {
    if scene.initialized {
        return Err(InitError::AlreadyInitialized);
    }
    let mut g = sim.to_sim3().compose(&plane.to_sim3());
    g.translation.y += height_offset;
    scene.apply_similarity(&g);
    scene.initialized = true;
    Ok(g)
}
