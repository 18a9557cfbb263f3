//! Geo-constrained bundle adjustment.
//!
//! The finest correction stage: map points and keyframe poses in the
//! current window are refined jointly by minimizing Huber-robustified
//! squared reprojection error, plus a quadratic penalty tying each
//! windowed geo image to its geo-tag position. Geo images are not
//! variables here — each one is rigidly attached to its associated
//! keyframe through the relative pose measured at localization time, so
//! the penalty constrains the keyframe poses directly.
//!
//! Pose residuals are linearized with analytic Jacobians (left-
//! multiplicative tangent perturbations, rotation-first layout), which
//! keeps the per-round cost low enough to run after every pose-graph
//! pass.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};
use thiserror::Error;

use crate::manifold::{hat, SE3};
use crate::pgo::GraphWindow;
use crate::pipeline::Scene;
use crate::solver::{
    Problem, ResidualBlock, RobustLoss, SolveReport, SolverError, SolverOptions, Variable,
};

/// Default Huber threshold in pixels (95% χ² quantile for two degrees of
/// freedom at one pixel of measurement noise).
pub const DEFAULT_HUBER_PIXELS: f64 = 2.45;

/// Default weight of the geo-anchor penalty relative to the unit-weight
/// reprojection terms.
pub const DEFAULT_ANCHOR_WEIGHT: f64 = 1e3;

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Errors from projection and bundle adjustment.
#[derive(Debug, Error)]
pub enum BaError {
    /// The point sits behind the image plane.
    #[error("point behind camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },
    /// No window point is observed by any window keyframe.
    #[error("bundle adjustment window contains no observed points")]
    EmptyProblem,
    /// The window references a keyframe the scene lacks.
    #[error("unknown keyframe {id}")]
    UnknownKeyframe { id: u64 },
    /// Failure propagated from the solver.
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Pinhole intrinsics shared by all cameras in a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    /// Focal length along x, pixels.
    pub fx: f64,
    /// Focal length along y, pixels.
    pub fy: f64,
    /// Principal point x, pixels.
    pub cx: f64,
    /// Principal point y, pixels.
    pub cy: f64,
}

impl Camera {
    /// Builds intrinsics, asserting positive focal lengths.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Camera { fx, fy, cx, cy }
    }
}

/// One pixel measurement of a map point from a keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Observing keyframe.
    pub keyframe_id: u64,
    /// Observed map point.
    pub point_id: u64,
    /// Measured pixel position.
    pub pixel: Vector2<f64>,
}

/// Tunables for the bundle-adjustment stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaOptions {
    /// Huber threshold on the reprojection residual norm, pixels.
    pub huber_pixels: f64,
    /// Weight of the squared geo-anchor penalty.
    pub anchor_weight: f64,
    /// Anchor on every historical correspondence instead of only the
    /// current window (experimental; the windowed default mirrors the
    /// pose-graph stage).
    pub full_history_anchors: bool,
}

impl Default for BaOptions {
    fn default() -> Self {
        BaOptions {
            huber_pixels: DEFAULT_HUBER_PIXELS,
            anchor_weight: DEFAULT_ANCHOR_WEIGHT,
            full_history_anchors: false,
        }
    }
}

/// Projects a world point through a world-from-camera pose onto the image.
///
/// The camera-frame point is `p = Rᵀ·(X − t)`; the pixel is
/// `(fx·p_x/p_z + cx, fy·p_y/p_z + cy)`.
///
/// # Errors
///
/// [`BaError::BehindCamera`] when the camera-frame depth is at or below
/// [`MIN_DEPTH`].
pub fn project(camera: &Camera, pose: &SE3, point: &Vector3<f64>) -> Result<Vector2<f64>, BaError> {
    let p = pose.rotation.inverse().act(&(point - pose.translation));
    if p.z <= MIN_DEPTH {
        return Err(BaError::BehindCamera { depth: p.z });
    }
    Ok(Vector2::new(
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    ))
}

/// Derivative of the pinhole map at camera-frame point `p` (2×3).
fn pinhole_jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * p.x * inv_z2,
        0.0,
        camera.fy * inv_z,
        -camera.fy * p.y * inv_z2,
    )
}

/// Pixel prediction plus analytic derivatives of the residual
/// `r = measured − π(Rᵀ(X − t))` with respect to a left-multiplicative
/// pose perturbation `[ω, ν]` (2×6) and to the point (2×3).
///
/// Returns `None` behind the camera; callers translate that into a
/// non-finite residual so the solver rejects the trial step.
pub fn projection_with_jacobians(
    camera: &Camera,
    pose: &SE3,
    point: &Vector3<f64>,
) -> Option<(Vector2<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let r_inv = pose.rotation.inverse().matrix();
    let p = r_inv * (point - pose.translation);
    if p.z <= MIN_DEPTH {
        return None;
    }
    let pixel = Vector2::new(
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    );
    let dpi = pinhole_jacobian(camera, &p);
    // Camera-frame point under left perturbation of the pose:
    // ∂p/∂ω = Rᵀ·[X]ₓ, ∂p/∂ν = −Rᵀ; and ∂p/∂X = Rᵀ.
    let dp_domega = r_inv * hat(point);
    let dp_dnu = -r_inv;
    let d_pix_pose_rot = dpi * dp_domega;
    let d_pix_pose_trans = dpi * dp_dnu;
    let mut d_pose = DMatrix::zeros(2, 6);
    for r in 0..2 {
        for c in 0..3 {
            // Residual is measurement minus prediction: negate.
            d_pose[(r, c)] = -d_pix_pose_rot[(r, c)];
            d_pose[(r, c + 3)] = -d_pix_pose_trans[(r, c)];
        }
    }
    let d_point_m = dpi * r_inv;
    let mut d_point = DMatrix::zeros(2, 3);
    for r in 0..2 {
        for c in 0..3 {
            d_point[(r, c)] = -d_point_m[(r, c)];
        }
    }
    Some((pixel, d_pose, d_point))
}

/// Reprojection residual of one observation; variables are
/// `[pose (SE3), point (ℝ³)]`.
pub(crate) struct ReprojectionBlock {
    pub camera: Camera,
    pub pixel: Vector2<f64>,
    pub vars: [usize; 2],
    pub huber: f64,
}

impl ResidualBlock for ReprojectionBlock {
    fn dim(&self) -> usize {
        2
    }

    fn vars(&self) -> &[usize] {
        &self.vars
    }

    fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
        let pose = vars[0].as_se3();
        let point = vars[1].as_euclidean();
        let point = Vector3::new(point[0], point[1], point[2]);
        match project(&self.camera, pose, &point) {
            Ok(predicted) => {
                let r = self.pixel - predicted;
                DVector::from_column_slice(&[r.x, r.y])
            }
            // Behind the camera: poison the trial so the solver backs off.
            Err(_) => DVector::from_element(2, f64::NAN),
        }
    }

    fn jacobian(&self, vars: &[&Variable], arg: usize) -> Option<DMatrix<f64>> {
        let pose = vars[0].as_se3();
        let point = vars[1].as_euclidean();
        let point = Vector3::new(point[0], point[1], point[2]);
        let (_, d_pose, d_point) = projection_with_jacobians(&self.camera, pose, &point)?;
        Some(if arg == 0 { d_pose } else { d_point })
    }

    fn loss(&self) -> RobustLoss {
        RobustLoss::Huber { delta: self.huber }
    }

    fn label(&self) -> String {
        "reprojection".into()
    }
}

/// Geo-anchor penalty on the keyframe carrying a localized geo image:
/// `r = trans(T_k ∘ Δ) − y`, where `Δ` is the fixed keyframe→geo-image
/// relative pose snapshot.
pub(crate) struct GeoAnchorBlock {
    pub delta: SE3,
    pub target: Vector3<f64>,
    pub vars: [usize; 1],
    pub weight: f64,
}

impl GeoAnchorBlock {
    fn predicted(&self, pose: &SE3) -> Vector3<f64> {
        pose.rotation.act(&self.delta.translation) + pose.translation
    }
}

impl ResidualBlock for GeoAnchorBlock {
    fn dim(&self) -> usize {
        3
    }

    fn vars(&self) -> &[usize] {
        &self.vars
    }

    fn eval(&self, vars: &[&Variable]) -> DVector<f64> {
        let r = self.predicted(vars[0].as_se3()) - self.target;
        DVector::from_column_slice(&[r.x, r.y, r.z])
    }

    fn jacobian(&self, vars: &[&Variable], _arg: usize) -> Option<DMatrix<f64>> {
        // Left perturbation moves the predicted position m by ω×m + ν.
        let m = self.predicted(vars[0].as_se3());
        let mut j = DMatrix::zeros(3, 6);
        let neg_hat = -hat(&m);
        for r in 0..3 {
            for c in 0..3 {
                j[(r, c)] = neg_hat[(r, c)];
            }
            j[(r, r + 3)] = 1.0;
        }
        Some(j)
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn label(&self) -> String {
        "geo-anchor".into()
    }
}

/// Index maps tying solver variables back to scene ids.
struct BaIndex {
    pose_vars: BTreeMap<u64, usize>,
    point_vars: BTreeMap<u64, usize>,
    /// (correspondence index, keyframe id, keyframe→geo snapshot) for
    /// post-solve write-back of the tied geo poses.
    anchors: Vec<(usize, u64, SE3)>,
}

/// Builds the window's bundle-adjustment problem without solving it.
fn build_problem(
    scene: &Scene,
    window: &GraphWindow,
    options: &BaOptions,
) -> Result<(Problem, BaIndex), BaError> {
    let window_kfs: BTreeSet<u64> = window.c1.iter().copied().collect();
    for &kf in &window_kfs {
        if !scene.keyframes.contains_key(&kf) {
            return Err(BaError::UnknownKeyframe { id: kf });
        }
    }

    // C5: points observed from the window's keyframes.
    let by_kf = scene.observations_by_keyframe();
    let mut window_points: BTreeSet<u64> = BTreeSet::new();
    for &kf in &window_kfs {
        if let Some(indices) = by_kf.get(&kf) {
            for &i in indices {
                window_points.insert(self::point_id(scene, i));
            }
        }
    }
    if window_points.is_empty() {
        return Err(BaError::EmptyProblem);
    }

    let mut problem = Problem::new();
    let mut pose_vars: BTreeMap<u64, usize> = BTreeMap::new();
    let mut point_vars: BTreeMap<u64, usize> = BTreeMap::new();
    for &kf in &window_kfs {
        pose_vars.insert(kf, problem.add_variable(Variable::Se3(scene.keyframes[&kf])));
    }
    for &pt in &window_points {
        let p = scene.map_points[&pt].position;
        point_vars.insert(
            pt,
            problem.add_variable(Variable::Euclidean(DVector::from_column_slice(&[
                p.x, p.y, p.z,
            ]))),
        );
    }

    // Every observation of a window point participates; observers outside
    // the window enter as fixed poses so their measurements still
    // constrain the points.
    for obs in &scene.observations {
        if !window_points.contains(&obs.point_id) {
            continue;
        }
        let pose_var = match pose_vars.get(&obs.keyframe_id) {
            Some(&v) => v,
            None => {
                let v = problem
                    .add_fixed_variable(Variable::Se3(scene.keyframes[&obs.keyframe_id]));
                pose_vars.insert(obs.keyframe_id, v);
                v
            }
        };
        problem.add_residual(Box::new(ReprojectionBlock {
            camera: scene.camera,
            pixel: obs.pixel,
            vars: [pose_var, point_vars[&obs.point_id]],
            huber: options.huber_pixels,
        }));
    }

    // Anchor penalties tie geo-carrying keyframes to the geo-tag
    // positions through the localization-time relative pose.
    let anchor_indices: Vec<usize> = if options.full_history_anchors {
        (0..scene.geo_correspondences.len()).collect()
    } else {
        window.c2.clone()
    };
    let mut anchors = Vec::new();
    for m in anchor_indices {
        let corr = &scene.geo_correspondences[m];
        let kf = corr.keyframe_id;
        let Some(kf_pose) = scene.keyframes.get(&kf) else {
            return Err(BaError::UnknownKeyframe { id: kf });
        };
        let delta = kf_pose.inverse().compose(&corr.map_pose.to_se3());
        let pose_var = match pose_vars.get(&kf) {
            Some(&v) => v,
            None => {
                let v = problem.add_fixed_variable(Variable::Se3(*kf_pose));
                pose_vars.insert(kf, v);
                v
            }
        };
        problem.add_residual(Box::new(GeoAnchorBlock {
            delta,
            target: corr.world_point,
            vars: [pose_var],
            weight: options.anchor_weight,
        }));
        anchors.push((m, kf, delta));
    }

    // Restrict the variable set to the window: pose variables added for
    // outside observers were created fixed already.
    Ok((
        problem,
        BaIndex {
            pose_vars,
            point_vars,
            anchors,
        },
    ))
}

fn point_id(scene: &Scene, obs_index: usize) -> u64 {
    scene.observations[obs_index].point_id
}

/// Total bundle-adjustment cost of the window at the current scene state
/// (robustified reprojection terms plus weighted anchor penalties).
///
/// # Errors
///
/// Same conditions as [`optimize_ba`], plus solver evaluation errors for
/// scenes with points behind their observers.
pub fn ba_cost(scene: &Scene, window: &GraphWindow, options: &BaOptions) -> Result<f64, BaError> {
    let (problem, _) = build_problem(scene, window, options)?;
    Ok(problem.cost()?)
}

/// Assembles the window's bundle-adjustment problem without running it,
/// exactly as [`optimize_ba`] does. Useful for inspecting the residual
/// blocks, e.g. to check their derivatives against finite differences.
///
/// # Errors
///
/// Same construction errors as [`optimize_ba`].
pub fn assemble_problem(
    scene: &Scene,
    window: &GraphWindow,
    options: &BaOptions,
) -> Result<Problem, BaError> {
    Ok(build_problem(scene, window, options)?.0)
}

/// Refines window keyframe poses and their observed points, then writes
/// the result (and the geo poses tied to corrected keyframes) back into
/// the scene.
///
/// Keyframes outside the window and points it does not observe are left
/// bit-for-bit untouched.
///
/// # Errors
///
/// [`BaError::EmptyProblem`] when the window observes nothing,
/// [`BaError::UnknownKeyframe`] on dangling ids, and solver failures.
pub fn optimize_ba(
    scene: &mut Scene,
    window: &GraphWindow,
    options: &BaOptions,
    solver_options: &SolverOptions,
) -> Result<SolveReport, BaError> {
    let (mut problem, index) = build_problem(scene, window, options)?;
    let report = problem.solve(solver_options)?;

    let window_kfs: BTreeSet<u64> = window.c1.iter().copied().collect();
    for (&kf, &var) in &index.pose_vars {
        if window_kfs.contains(&kf) {
            scene.keyframes.insert(kf, *problem.variable(var).as_se3());
        }
    }
    for (&pt, &var) in &index.point_vars {
        let p = problem.variable(var).as_euclidean();
        scene.map_points.get_mut(&pt).expect("window point exists").position =
            Vector3::new(p[0], p[1], p[2]);
    }
    for (m, kf, delta) in index.anchors {
        if window_kfs.contains(&kf) {
            let new_geo = scene.keyframes[&kf].compose(&delta);
            let corr = &mut scene.geo_correspondences[m];
            corr.map_pose = new_geo.to_sim3();
            corr.map_point = corr.map_pose.translation;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::GeoCorrespondence;
    use crate::manifold::Rot3;
    use crate::pipeline::MapPoint;
    use crate::sim::oracle;
    use crate::solver::numeric_jacobian;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera::new(500.0, 500.0, 320.0, 240.0)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> SE3 {
        SE3 {
            rotation: Rot3::exp(&Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3))),
            translation: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        }
    }

    #[test]
    fn optical_axis_point_projects_to_principal_point() {
        let camera = test_camera();
        let pixel = project(&camera, &SE3::identity(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((pixel - Vector2::new(320.0, 240.0)).norm() < 1e-12);
    }

    #[test]
    fn pinhole_arithmetic_matches_hand_computation() {
        let camera = test_camera();
        let pixel = project(&camera, &SE3::identity(), &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((pixel - Vector2::new(370.0, 240.0)).norm() < 1e-12);
    }

    #[test]
    fn projection_matches_homogeneous_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let camera = test_camera();
        let mut checked = 0;
        while checked < 200 {
            let pose = random_pose(&mut rng);
            let point = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0))
                + Vector3::new(0.0, 0.0, 8.0);
            // Straight-line oracle: camera-from-world homogeneous matrix.
            let (w, x, y, z) = pose.rotation.quaternion_wxyz();
            let world_from_cam = oracle::homogeneous(w, x, y, z, &pose.translation, 1.0);
            let cam_from_world = world_from_cam.try_inverse().unwrap();
            let ph = cam_from_world
                * nalgebra::Vector4::new(point.x, point.y, point.z, 1.0);
            if ph.z <= 1e-3 {
                continue;
            }
            checked += 1;
            let expected = Vector2::new(
                camera.fx * ph.x / ph.z + camera.cx,
                camera.fy * ph.y / ph.z + camera.cy,
            );
            let got = project(&camera, &pose, &point).unwrap();
            assert!(
                (got - expected).norm() < 1e-9,
                "projection deviates from homogeneous oracle by {}",
                (got - expected).norm()
            );
        }
    }

    #[test]
    fn points_behind_camera_are_rejected() {
        let camera = test_camera();
        for z in [-1.0, 0.0, 1e-10] {
            let r = project(&camera, &SE3::identity(), &Vector3::new(0.0, 0.0, z));
            assert!(matches!(r, Err(BaError::BehindCamera { .. })), "z = {z}");
        }
    }

    #[test]
    fn reprojection_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let camera = test_camera();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let depth_dir = pose.rotation.act(&Vector3::z());
            let point = pose.translation
                + depth_dir * rng.random_range(4.0..12.0)
                + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if project(&camera, &pose, &point).is_err() {
                continue;
            }
            let block = ReprojectionBlock {
                camera,
                pixel: Vector2::new(
                    rng.random_range(0.0..640.0),
                    rng.random_range(0.0..480.0),
                ),
                vars: [0, 1],
                huber: DEFAULT_HUBER_PIXELS,
            };
            let pose_var = Variable::Se3(pose);
            let point_var =
                Variable::Euclidean(DVector::from_column_slice(&[point.x, point.y, point.z]));
            let vars = [&pose_var, &point_var];
            for arg in 0..2 {
                let analytic = block.jacobian(&vars, arg).unwrap();
                let numeric = numeric_jacobian(&block, &vars, arg, 1e-6).unwrap();
                let scale = numeric.norm().max(1.0);
                assert!(
                    (&analytic - &numeric).norm() / scale < 1e-6,
                    "arg {arg}: analytic/numeric mismatch {:.3e}",
                    (&analytic - &numeric).norm() / scale
                );
            }
        }
    }

    #[test]
    fn anchor_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let block = GeoAnchorBlock {
                delta: random_pose(&mut rng),
                target: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                vars: [0],
                weight: 1e3,
            };
            let pose_var = Variable::Se3(pose);
            let vars = [&pose_var];
            let analytic = block.jacobian(&vars, 0).unwrap();
            let numeric = numeric_jacobian(&block, &vars, 0, 1e-6).unwrap();
            assert!(
                (&analytic - &numeric).norm() / numeric.norm().max(1.0) < 1e-6,
                "anchor jacobian mismatch"
            );
        }
    }

    /// A synthetic scene whose observations are exact projections, with a
    /// geo correspondence on each window keyframe.
    fn exact_scene(rng: &mut ChaCha8Rng, n_kf: u64, n_pts: u64) -> Scene {
        let mut scene = Scene::new(test_camera());
        for k in 0..n_kf {
            let pose = SE3 {
                rotation: Rot3::from_axis_angle(
                    &Vector3::y_axis(),
                    0.02 * k as f64,
                ),
                translation: Vector3::new(2.0 * k as f64, 0.0, 0.0),
            };
            scene.insert_keyframe(k, pose).unwrap();
        }
        for p in 0..n_pts {
            let position = Vector3::new(
                rng.random_range(-5.0..(2.0 * n_kf as f64 + 5.0)),
                rng.random_range(-2.0..6.0),
                rng.random_range(6.0..20.0),
            );
            scene.map_points.insert(
                p,
                MapPoint {
                    position,
                    reference_keyframe: 0,
                },
            );
        }
        let keyframes = scene.keyframes.clone();
        let points = scene.map_points.clone();
        for (&kf, pose) in &keyframes {
            for (&pt, point) in &points {
                if let Ok(pixel) = project(&scene.camera, pose, &point.position) {
                    scene.observations.push(Observation {
                        keyframe_id: kf,
                        point_id: pt,
                        pixel,
                    });
                }
            }
        }
        for (&kf, pose) in &keyframes {
            let geo_pose = pose.compose(&SE3 {
                rotation: Rot3::identity(),
                translation: Vector3::new(0.3, 0.1, 0.0),
            });
            scene.geo_correspondences.push(GeoCorrespondence::new(
                geo_pose.to_sim3(),
                geo_pose,
                kf,
                kf,
            ));
        }
        scene.initialized = true;
        scene
    }

    fn full_window(scene: &Scene) -> GraphWindow {
        GraphWindow {
            c1: scene.keyframes.keys().copied().collect(),
            c2: (scene.geo_correspondences.len().saturating_sub(3)
                ..scene.geo_correspondences.len())
                .collect(),
            c3: Vec::new(),
            c4: Vec::new(),
        }
    }

    #[test]
    fn exact_scene_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut scene = exact_scene(&mut rng, 4, 40);
        let window = full_window(&scene);
        let before = scene.keyframes.clone();
        let opts = BaOptions::default();
        let report =
            optimize_ba(&mut scene, &window, &opts, &SolverOptions::default()).unwrap();
        assert!(report.initial_cost < 1e-12);
        assert!(report.initial_cost - report.final_cost < 1e-12);
        for (k, pose) in before {
            assert!(
                (scene.keyframes[&k].translation - pose.translation).norm() < 1e-10,
                "keyframe {k} moved"
            );
        }
    }

    #[test]
    fn noisy_observations_are_smoothed_and_locked_state_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut scene = exact_scene(&mut rng, 6, 60);
        // Perturb the pixel measurements.
        for obs in &mut scene.observations {
            obs.pixel += Vector2::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
        }
        // Window covers keyframes 2..=5; keyframe 0, 1 stay fixed.
        let window = GraphWindow {
            c1: vec![2, 3, 4, 5],
            c2: vec![3, 4, 5],
            c3: Vec::new(),
            c4: Vec::new(),
        };
        let outside_before: Vec<SE3> =
            vec![scene.keyframes[&0], scene.keyframes[&1]];
        // A point seen only by keyframes outside the window must not move.
        let lone_id = 999;
        scene.map_points.insert(
            lone_id,
            MapPoint {
                position: Vector3::new(0.0, 1.0, 9.0),
                reference_keyframe: 0,
            },
        );
        let lone_before = scene.map_points[&lone_id].position;

        let report = optimize_ba(
            &mut scene,
            &window,
            &BaOptions::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.final_cost < report.initial_cost);
        assert_eq!(scene.keyframes[&0], outside_before[0]);
        assert_eq!(scene.keyframes[&1], outside_before[1]);
        assert_eq!(scene.map_points[&lone_id].position, lone_before);
    }

    #[test]
    fn zero_anchor_weight_reduces_to_classical_ba() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut scene = exact_scene(&mut rng, 4, 50);
        // Perturb poses and points away from the consistent optimum.
        let perturbed: Vec<u64> = scene.keyframes.keys().copied().collect();
        for k in perturbed {
            let pose = scene.keyframes[&k];
            scene.keyframes.insert(
                k,
                SE3 {
                    rotation: Rot3::exp(&Vector3::from_fn(|_, _| {
                        rng.random_range(-0.002..0.002)
                    }))
                    .compose(&pose.rotation),
                    translation: pose.translation
                        + Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02)),
                },
            );
        }
        for point in scene.map_points.values_mut() {
            point.position += Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02));
        }
        let window = full_window(&scene);
        let options = BaOptions {
            anchor_weight: 0.0,
            ..BaOptions::default()
        };
        let report = optimize_ba(
            &mut scene,
            &window,
            &options,
            &SolverOptions {
                max_iterations: 200,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        // With exact pixels the joint optimum explains every observation.
        assert!(
            report.final_cost < 1e-10,
            "classical BA should reach a consistent optimum, cost {}",
            report.final_cost
        );
    }

    #[test]
    fn empty_window_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut scene = exact_scene(&mut rng, 3, 10);
        scene.observations.clear();
        let window = full_window(&scene);
        assert!(matches!(
            ba_cost(&scene, &window, &BaOptions::default()),
            Err(BaError::EmptyProblem)
        ));
    }
}
