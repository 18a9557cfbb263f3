//! Synthetic scenario generation and brute-force cost oracles.
//!
//! Real drifting reconstructions are bulky and hard to redistribute, so
//! the test bed is synthetic: [`generate`] builds a ground-truth street
//! scene (trajectory, structure, observations, geo-tagged images) and a
//! drifted copy whose relative motions have been stretched by a
//! controlled per-step scale profile — the exact mechanism by which
//! monocular scale drift accumulates. Every quantity downstream modules
//! estimate is therefore known exactly here.
//!
//! The module also hosts [`oracle_cost_pgo`] and [`oracle_cost_ba`]:
//! straight-line re-implementations of the pose-graph and bundle-
//! adjustment cost functions on dense 4×4 homogeneous matrices, sharing
//! no code with the optimizers they check.

pub mod oracle;

use nalgebra::{Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ba::{BaOptions, Camera, Observation, MIN_DEPTH};
use crate::io::geodesy::UtmCoord;
use crate::io::GeoAnchor;
use crate::manifold::{Rot3, Sim3, SE3};
use crate::pgo::{GraphWindow, PoseGraph};
use crate::pipeline::{GeoInput, KeyframeInput, MapPoint, Scene};
use crate::pnp::MapGeoMatches;

/// Keyframes on each side of a point's reference that may observe it.
const OBSERVER_RADIUS: u64 = 5;

/// Observers a point needs before it enters the map.
const MIN_OBSERVERS: usize = 3;

/// Attempts at sampling a visible point before giving up on it.
const POINT_SAMPLE_TRIES: usize = 20;

/// Cap on the number of matches handed to one geo image.
const MAX_GEO_MATCHES: usize = 40;

/// Errors from scenario validation and generation.
#[derive(Debug, Error)]
pub enum SimError {
    /// A count or length that must be positive is not.
    #[error("{what} must be positive (got {got})")]
    NonPositive { what: &'static str, got: f64 },
    /// Too few keyframes to form a trajectory.
    #[error("at least 2 keyframes required (got {got})")]
    TooFewKeyframes { got: usize },
    /// A per-step drift multiplier is not positive.
    #[error("drift multiplier at step {step} must be positive (got {got})")]
    BadMultiplier { step: usize, got: f64 },
    /// An explicit multiplier sequence has the wrong length.
    #[error("drift profile supplies {got} multipliers but the trajectory has {expected} steps")]
    WrongProfileLength { expected: usize, got: usize },
}

/// Shape of the ground-truth trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum TrajectoryShape {
    /// Constant heading.
    Straight,
    /// Heading sweeps uniformly by `total_turn` radians over the run.
    Arc { total_turn: f64 },
    /// Manhattan-style polyline: a ±90° turn every `block` keyframes,
    /// direction drawn from the scenario seed.
    CityGrid { block: usize },
}

/// Per-step scale multiplier sequence describing the injected drift.
#[derive(Clone, Debug, PartialEq)]
pub enum DriftProfile {
    /// Multiplier 1 everywhere: the drifted scene is an offset copy of
    /// the truth.
    None,
    /// The same multiplier every step (compounding exponentially).
    Constant { multiplier: f64 },
    /// Constant multiplier chosen so the cumulative product reaches
    /// `final_factor` on the last step.
    RampTo { final_factor: f64 },
    /// Explicit multiplier per step; length must be `keyframes − 1`.
    PerStep(Vec<f64>),
}

impl DriftProfile {
    /// Cumulative scale ς_k at every keyframe (ς_0 = 1), given the
    /// number of keyframes.
    ///
    /// # Errors
    ///
    /// [`SimError::BadMultiplier`] for non-positive multipliers and
    /// [`SimError::WrongProfileLength`] for a mis-sized explicit
    /// sequence.
    pub fn cumulative(&self, keyframes: usize) -> Result<Vec<f64>, SimError> {
        let steps = keyframes.saturating_sub(1);
        let per_step: Vec<f64> = match self {
            DriftProfile::None => vec![1.0; steps],
            DriftProfile::Constant { multiplier } => vec![*multiplier; steps],
            DriftProfile::RampTo { final_factor } => {
                if *final_factor <= 0.0 {
                    return Err(SimError::BadMultiplier {
                        step: 0,
                        got: *final_factor,
                    });
                }
                vec![final_factor.powf(1.0 / steps as f64); steps]
            }
            DriftProfile::PerStep(seq) => {
                if seq.len() != steps {
                    return Err(SimError::WrongProfileLength {
                        expected: steps,
                        got: seq.len(),
                    });
                }
                seq.clone()
            }
        };
        let mut cumulative = Vec::with_capacity(keyframes);
        cumulative.push(1.0);
        let mut product = 1.0;
        for (step, &m) in per_step.iter().enumerate() {
            if !(m > 0.0) {
                return Err(SimError::BadMultiplier { step, got: m });
            }
            product *= m;
            cumulative.push(product);
        }
        Ok(cumulative)
    }
}

/// Full description of one synthetic scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    /// Trajectory shape.
    pub shape: TrajectoryShape,
    /// Number of keyframes (≥ 2).
    pub keyframes: usize,
    /// Distance between consecutive keyframes, meters.
    pub spacing: f64,
    /// Injected scale-drift profile.
    pub drift: DriftProfile,
    /// Map points sampled around each keyframe.
    pub points_per_keyframe: usize,
    /// Pixel noise σ added to every observation.
    pub observation_noise: f64,
    /// A geo-tagged image arrives every this many keyframes.
    pub anchor_interval: usize,
    /// Position noise σ of the geo-tags, meters.
    pub anchor_noise: f64,
    /// Per-step rotational odometry noise σ, radians (usually 0).
    pub motion_rot_noise: f64,
    /// Per-step translational odometry noise σ, meters (usually 0).
    pub motion_trans_noise: f64,
    /// Whether the drifted map lives in an arbitrary offset frame
    /// (random yaw, slight tilt, translation, global scale) as a real
    /// reconstruction would.
    pub offset_map_frame: bool,
    /// Shared pinhole intrinsics.
    pub camera: Camera,
    /// Seed driving every random draw.
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            shape: TrajectoryShape::Straight,
            keyframes: 100,
            spacing: 1.0,
            drift: DriftProfile::None,
            points_per_keyframe: 8,
            observation_noise: 0.0,
            anchor_interval: 10,
            anchor_noise: 0.0,
            motion_rot_noise: 0.0,
            motion_trans_noise: 0.0,
            offset_map_frame: true,
            camera: Camera::new(500.0, 500.0, 320.0, 240.0),
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    /// Checks the count/positivity invariants.
    ///
    /// # Errors
    ///
    /// A [`SimError`] naming the offending field.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.keyframes < 2 {
            return Err(SimError::TooFewKeyframes {
                got: self.keyframes,
            });
        }
        if !(self.spacing > 0.0) {
            return Err(SimError::NonPositive {
                what: "keyframe spacing",
                got: self.spacing,
            });
        }
        if self.points_per_keyframe == 0 {
            return Err(SimError::NonPositive {
                what: "points per keyframe",
                got: 0.0,
            });
        }
        if self.anchor_interval == 0 {
            return Err(SimError::NonPositive {
                what: "anchor interval",
                got: 0.0,
            });
        }
        if let TrajectoryShape::CityGrid { block } = self.shape {
            if block == 0 {
                return Err(SimError::NonPositive {
                    what: "city-grid block length",
                    got: 0.0,
                });
            }
        }
        self.drift.cumulative(self.keyframes).map(|_| ())
    }
}

/// One geo-tagged image delivered by the correspondence stream.
#[derive(Clone, Debug)]
pub struct GeoEvent {
    /// Keyframe at which the image arrives (the keyframe it matched).
    pub keyframe_id: u64,
    /// Its 3D-map-point ↔ 2D-pixel matches.
    pub matches: MapGeoMatches,
    /// Its geo-tag.
    pub anchor: GeoAnchor,
}

/// Everything [`generate`] produces for one scenario.
#[derive(Clone, Debug)]
pub struct Simulation {
    /// World-frame ground truth with exact observations.
    pub truth: Scene,
    /// The same scene as a drifting reconstruction would deliver it.
    pub drifted: Scene,
    /// Geo-tagged images in arrival order.
    pub geo_events: Vec<GeoEvent>,
    /// The similarity mapping world coordinates into the drifted map
    /// frame (identity unless `offset_map_frame`).
    pub map_from_world: Sim3,
}

/// Heading direction in the ground plane (0 faces +z/north, π/2 faces
/// +x/east, matching the compass convention of the geo anchors).
fn heading_direction(theta: f64) -> Vector3<f64> {
    Vector3::new(theta.sin(), 0.0, theta.cos())
}

/// Ground-truth world-from-camera poses along the requested shape.
/// A vehicle cannot yaw 90° between consecutive keyframes; grid corners
/// are spread over steps of at most this angle so that neighbouring views
/// keep overlapping (the horizontal field of view is ≈ 65°).
const MAX_TURN_PER_STEP: f64 = std::f64::consts::FRAC_PI_6;

fn ground_truth_poses(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<SE3> {
    let n = spec.keyframes;
    let mut theta = 0.0f64;
    let mut pending_turn = 0.0f64;
    let mut position = Vector3::zeros();
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            match spec.shape {
                TrajectoryShape::Straight => {}
                TrajectoryShape::Arc { total_turn } => {
                    theta += total_turn / (n - 1) as f64;
                }
                TrajectoryShape::CityGrid { block } => {
                    if k % block == 0 {
                        let turn = std::f64::consts::FRAC_PI_2;
                        pending_turn += if rng.random_bool(0.5) { turn } else { -turn };
                    }
                    let step = pending_turn.clamp(-MAX_TURN_PER_STEP, MAX_TURN_PER_STEP);
                    pending_turn -= step;
                    theta += step;
                }
            }
            position += spec.spacing * heading_direction(theta);
        }
        poses.push(SE3 {
            rotation: Rot3::from_axis_angle(&Vector3::y_axis(), theta),
            translation: position,
        });
    }
    poses
}

/// Chains the ground-truth relative motions with the cumulative scale
/// applied to each step's translation (plus optional odometry noise).
fn drifted_chain(
    truth: &[SE3],
    cumulative: &[f64],
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<SE3> {
    let rot_noise = Normal::new(0.0, spec.motion_rot_noise).expect("finite σ");
    let trans_noise = Normal::new(0.0, spec.motion_trans_noise).expect("finite σ");
    let mut chain = Vec::with_capacity(truth.len());
    chain.push(truth[0]);
    for k in 1..truth.len() {
        let step = truth[k - 1].inverse().compose(&truth[k]);
        let mut scaled = SE3 {
            rotation: step.rotation,
            translation: cumulative[k] * step.translation,
        };
        if spec.motion_rot_noise > 0.0 || spec.motion_trans_noise > 0.0 {
            let w = Vector3::from_fn(|_, _| rot_noise.sample(rng));
            scaled.rotation = scaled.rotation.compose(&Rot3::exp(&w));
            scaled.translation += Vector3::from_fn(|_, _| trans_noise.sample(rng));
        }
        chain.push(chain[k - 1].compose(&scaled));
    }
    chain
}

/// Projection gate used while sampling structure: in front of the
/// camera and inside the image rectangle.
fn visible_pixel(camera: &Camera, pose: &SE3, point: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pixel = crate::ba::project(camera, pose, point).ok()?;
    let inside = pixel.x >= 0.0
        && pixel.x <= 2.0 * camera.cx
        && pixel.y >= 0.0
        && pixel.y <= 2.0 * camera.cy;
    inside.then_some(pixel)
}

/// Builds the ground-truth scene and the drifted mirror of a scenario.
///
/// Draw order from the seed is fixed: map-frame offset, trajectory
/// turns, odometry noise, structure and observation noise per keyframe,
/// then geo events — so generation is fully deterministic per spec.
///
/// # Errors
///
/// [`SimError`] when the spec fails validation.
pub fn generate(spec: &ScenarioSpec) -> Result<Simulation, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let map_from_world = if spec.offset_map_frame {
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let pitch = rng.random_range(-0.15..0.15);
        let roll = rng.random_range(-0.15..0.15);
        let rotation = Rot3::from_axis_angle(&Vector3::y_axis(), yaw)
            .compose(&Rot3::from_axis_angle(&Vector3::x_axis(), pitch))
            .compose(&Rot3::from_axis_angle(&Vector3::z_axis(), roll));
        Sim3 {
            rotation,
            translation: Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-50.0..50.0),
            ),
            scale: rng.random_range(0.5..2.0),
        }
    } else {
        Sim3::identity()
    };

    let truth_poses = ground_truth_poses(spec, &mut rng);
    let cumulative = spec.drift.cumulative(spec.keyframes)?;
    let local_chain = drifted_chain(&truth_poses, &cumulative, spec, &mut rng);

    let mut truth = Scene::new(spec.camera);
    let mut drifted = Scene::new(spec.camera);
    truth.initialized = true;
    for (k, (gt, local)) in truth_poses.iter().zip(&local_chain).enumerate() {
        truth
            .insert_keyframe(k as u64, *gt)
            .expect("keyframe ids are strictly increasing");
        drifted
            .insert_keyframe(
                k as u64,
                map_from_world.compose(&local.to_sim3()).to_se3(),
            )
            .expect("keyframe ids are strictly increasing");
    }

    let pixel_noise = Normal::new(0.0, spec.observation_noise).expect("finite σ");
    let n = spec.keyframes as u64;
    let needed = MIN_OBSERVERS.min(spec.keyframes);
    for k in 0..n {
        let anchor_pose = &truth_poses[k as usize];
        for j in 0..spec.points_per_keyframe as u64 {
            let id = k * spec.points_per_keyframe as u64 + j;
            for _try in 0..POINT_SAMPLE_TRIES {
                let lateral = rng.random_range(5.0..30.0)
                    * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let height = rng.random_range(0.0..10.0);
                let forward = rng.random_range(5.0..35.0);
                let world = anchor_pose.translation
                    + anchor_pose
                        .rotation
                        .act(&Vector3::new(lateral, height, forward));
                let observers: Vec<(u64, Vector2<f64>)> = (k.saturating_sub(OBSERVER_RADIUS)
                    ..(k + OBSERVER_RADIUS + 1).min(n))
                    .filter_map(|i| {
                        visible_pixel(&spec.camera, &truth_poses[i as usize], &world)
                            .map(|px| (i, px))
                    })
                    .collect();
                if observers.len() < needed {
                    continue;
                }
                truth.map_points.insert(
                    id,
                    MapPoint {
                        position: world,
                        reference_keyframe: k,
                    },
                );
                // The drifted map sees the point along the same ray from
                // its reference keyframe, with depth stretched by the
                // local map scale, then carried into the offset frame.
                let camera_frame = truth_poses[k as usize].inverse().act(&world);
                let local = local_chain[k as usize].act(&(cumulative[k as usize] * camera_frame));
                drifted.map_points.insert(
                    id,
                    MapPoint {
                        position: map_from_world.act(&local),
                        reference_keyframe: k,
                    },
                );
                for (i, pixel) in observers {
                    let measured = pixel
                        + Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
                    truth.observations.push(Observation {
                        keyframe_id: i,
                        point_id: id,
                        pixel: measured,
                    });
                }
                break;
            }
        }
    }
    drifted.observations = truth.observations.clone();

    let tag_noise = Normal::new(0.0, spec.anchor_noise).expect("finite σ");
    let mut geo_events = Vec::new();
    for k in (0..spec.keyframes).step_by(spec.anchor_interval) {
        let k = k as u64;
        // The geo image stands a little off the keyframe it matched.
        let offset = SE3 {
            rotation: Rot3::exp(&Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03))),
            translation: Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        };
        let geo_pose = truth_poses[k as usize].compose(&offset);
        // Only points whose reference keyframe has already passed: a live
        // stream cannot match against structure that does not exist yet.
        let mut matches: Vec<(u64, Vector2<f64>)> = Vec::new();
        for (&id, point) in truth.map_points.range(
            k.saturating_sub(OBSERVER_RADIUS) * spec.points_per_keyframe as u64
                ..(k + 1) * spec.points_per_keyframe as u64,
        ) {
            if matches.len() == MAX_GEO_MATCHES {
                break;
            }
            if let Some(pixel) = visible_pixel(&spec.camera, &geo_pose, &point.position) {
                let measured = pixel
                    + Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
                matches.push((id, measured));
            }
        }
        let tag_position = geo_pose.translation
            + Vector3::from_fn(|_, _| tag_noise.sample(&mut rng));
        if matches.len() < crate::pnp::MIN_MATCHES {
            continue;
        }
        geo_events.push(GeoEvent {
            keyframe_id: k,
            matches: MapGeoMatches {
                geo_image_id: k,
                camera: spec.camera,
                matches,
            },
            anchor: GeoAnchor {
                id: k,
                lat_lon: None,
                utm: Some(UtmCoord {
                    easting: tag_position.x,
                    northing: tag_position.z,
                    zone: 31,
                    south: false,
                }),
                height: tag_position.y,
                heading: None,
                pitch: None,
                roll: None,
            },
        });
    }

    Ok(Simulation {
        truth,
        drifted,
        geo_events,
        map_from_world,
    })
}

impl Simulation {
    /// Replays the drifted reconstruction as the per-keyframe stream a
    /// live system would deliver: each keyframe arrives with its raw
    /// pose, the points first triangulated at it, every observation
    /// whose keyframe and point both exist by then, and the geo-tagged
    /// image matched to it (if any).
    pub fn drifted_stream(&self) -> Vec<KeyframeInput> {
        let mut inputs: Vec<KeyframeInput> = self
            .drifted
            .keyframes
            .iter()
            .map(|(&id, &pose)| KeyframeInput {
                id,
                pose,
                new_points: Vec::new(),
                observations: Vec::new(),
                geo: None,
            })
            .collect();
        for (&id, point) in &self.drifted.map_points {
            inputs[point.reference_keyframe as usize]
                .new_points
                .push((id, point.position));
        }
        for obs in &self.drifted.observations {
            let reference = self.drifted.map_points[&obs.point_id].reference_keyframe;
            let deliver_at = obs.keyframe_id.max(reference);
            inputs[deliver_at as usize].observations.push(obs.clone());
        }
        for event in &self.geo_events {
            inputs[event.keyframe_id as usize].geo = Some(GeoInput {
                matches: event.matches.clone(),
                anchor: event.anchor,
            });
        }
        inputs
    }
}

/// Dense homogeneous matrix of a similarity.
fn dense_matrix(s: &Sim3) -> Matrix4<f64> {
    let (w, x, y, z) = s.rotation.quaternion_wxyz();
    oracle::homogeneous(w, x, y, z, &s.translation, s.scale)
}

/// Dense homogeneous matrix of a rigid pose.
fn dense_matrix_se3(t: &SE3) -> Matrix4<f64> {
    let (w, x, y, z) = t.rotation.quaternion_wxyz();
    oracle::homogeneous(w, x, y, z, &t.translation, 1.0)
}

/// Squared norm of the stacked `(ω, σ, ν)` logarithm of a dense
/// similarity matrix.
fn dense_log_norm_squared(product: &Matrix4<f64>) -> f64 {
    let (omega, sigma, nu) = oracle::sim3_vee(&oracle::matrix_log(product));
    omega.norm_squared() + sigma * sigma + nu.norm_squared()
}

/// Brute-force pose-graph cost: every residual is evaluated through
/// dense 4×4 matrix products, inverses, and the matrix logarithm —
/// no shared code with the pose-graph module or the solver.
pub fn oracle_cost_pgo(graph: &PoseGraph) -> f64 {
    let mut total = 0.0;
    for &(i, j, ref delta) in &graph.rel_edges_kf {
        let product = dense_matrix(delta)
            * dense_matrix(&graph.keyframe_nodes[&i])
            * dense_matrix(&graph.keyframe_nodes[&j])
                .try_inverse()
                .expect("similarity matrices are invertible");
        total += graph.weights.keyframe_edges * dense_log_norm_squared(&product);
    }
    for &(k, m, ref delta) in &graph.rel_edges_geo {
        let product = dense_matrix(delta)
            * dense_matrix(&graph.keyframe_nodes[&k])
            * dense_matrix(&graph.geo_nodes[&m])
                .try_inverse()
                .expect("similarity matrices are invertible");
        total += graph.weights.geo_edges * dense_log_norm_squared(&product);
    }
    for &(m, ref target) in &graph.anchor_edges {
        let node = dense_matrix(&graph.geo_nodes[&m]);
        let position = Vector3::new(node[(0, 3)], node[(1, 3)], node[(2, 3)]);
        total += graph.weights.anchors * (position - target).norm_squared();
    }
    total
}

/// Brute-force bundle-adjustment cost over a window: Huber-robustified
/// reprojection of every observation of the window's points, plus the
/// geo-anchor penalties, all through dense homogeneous matrices.
///
/// Mirrors the optimizer's convention that a depth at or below
/// [`MIN_DEPTH`] poisons the cost (returns NaN).
pub fn oracle_cost_ba(scene: &Scene, window: &GraphWindow, options: &BaOptions) -> f64 {
    let huber = |squared: f64| {
        let delta = options.huber_pixels;
        if squared <= delta * delta {
            squared
        } else {
            2.0 * delta * squared.sqrt() - delta * delta
        }
    };
    let in_window: std::collections::BTreeSet<u64> = window.c1.iter().copied().collect();
    let window_points: std::collections::BTreeSet<u64> = scene
        .observations
        .iter()
        .filter(|obs| in_window.contains(&obs.keyframe_id))
        .map(|obs| obs.point_id)
        .collect();

    let mut total = 0.0;
    for obs in &scene.observations {
        if !window_points.contains(&obs.point_id) {
            continue;
        }
        let camera_from_world = dense_matrix_se3(&scene.keyframes[&obs.keyframe_id])
            .try_inverse()
            .expect("rigid pose matrices are invertible");
        let p = scene.map_points[&obs.point_id].position;
        let cam = camera_from_world * Vector4::new(p.x, p.y, p.z, 1.0);
        if cam.z <= MIN_DEPTH {
            return f64::NAN;
        }
        let predicted = Vector2::new(
            scene.camera.fx * cam.x / cam.z + scene.camera.cx,
            scene.camera.fy * cam.y / cam.z + scene.camera.cy,
        );
        total += huber((obs.pixel - predicted).norm_squared());
    }

    let anchored: Vec<usize> = if options.full_history_anchors {
        (0..scene.geo_correspondences.len()).collect()
    } else {
        window.c2.clone()
    };
    for m in anchored {
        let corr = &scene.geo_correspondences[m];
        let keyframe = dense_matrix_se3(&scene.keyframes[&corr.keyframe_id]);
        let delta = keyframe
            .try_inverse()
            .expect("rigid pose matrices are invertible")
            * dense_matrix_se3(&corr.map_pose.to_se3());
        let tied = keyframe * delta;
        let predicted = Vector3::new(tied[(0, 3)], tied[(1, 3)], tied[(2, 3)]);
        total += options.anchor_weight * (predicted - corr.world_point).norm_squared();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    use std::collections::BTreeMap;

    use crate::ba::ba_cost;
    use crate::init::GeoCorrespondence;
    use crate::pgo::PgoWeights;
    use crate::pipeline::{evaluate_ate2d, scale_factor_trace};
    use crate::pnp::{localize_geo_image, make_geo_correspondence};

    fn no_offset_spec() -> ScenarioSpec {
        ScenarioSpec {
            offset_map_frame: false,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn validation_names_the_offending_field() {
        let spec = ScenarioSpec {
            keyframes: 1,
            ..ScenarioSpec::default()
        };
        assert!(matches!(spec.validate(), Err(SimError::TooFewKeyframes { got: 1 })));
        let spec = ScenarioSpec {
            spacing: 0.0,
            ..ScenarioSpec::default()
        };
        assert!(matches!(spec.validate(), Err(SimError::NonPositive { .. })));
        let spec = ScenarioSpec {
            drift: DriftProfile::Constant { multiplier: -1.0 },
            ..ScenarioSpec::default()
        };
        assert!(matches!(spec.validate(), Err(SimError::BadMultiplier { .. })));
        let spec = ScenarioSpec {
            drift: DriftProfile::PerStep(vec![1.0; 3]),
            ..ScenarioSpec::default()
        };
        assert!(matches!(
            spec.validate(),
            Err(SimError::WrongProfileLength { expected: 99, got: 3 })
        ));
    }

    #[test]
    fn unit_drift_reproduces_the_truth() {
        let sim = generate(&no_offset_spec()).unwrap();
        for (id, truth_pose) in &sim.truth.keyframes {
            let drifted_pose = &sim.drifted.keyframes[id];
            assert!(
                (truth_pose.translation - drifted_pose.translation).norm() < 1e-9,
                "keyframe {id}"
            );
            assert!(
                truth_pose
                    .rotation
                    .compose(&drifted_pose.rotation.inverse())
                    .angle()
                    < 1e-9
            );
        }
        for (id, truth_point) in &sim.truth.map_points {
            let drifted_point = &sim.drifted.map_points[id];
            assert!((truth_point.position - drifted_point.position).norm() < 1e-9);
            assert_eq!(truth_point.reference_keyframe, drifted_point.reference_keyframe);
        }
    }

    #[test]
    fn truth_has_exactly_zero_reprojection_error() {
        let sim = generate(&ScenarioSpec {
            shape: TrajectoryShape::CityGrid { block: 10 },
            keyframes: 60,
            ..ScenarioSpec::default()
        })
        .unwrap();
        assert!(!sim.truth.observations.is_empty());
        for obs in &sim.truth.observations {
            let predicted = crate::ba::project(
                &sim.truth.camera,
                &sim.truth.keyframes[&obs.keyframe_id],
                &sim.truth.map_points[&obs.point_id].position,
            )
            .unwrap();
            assert!((predicted - obs.pixel).norm() < 1e-10);
        }
        sim.truth.validate().unwrap();
        sim.drifted.validate().unwrap();
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = ScenarioSpec {
            shape: TrajectoryShape::CityGrid { block: 7 },
            observation_noise: 1.0,
            anchor_noise: 1.0,
            keyframes: 40,
            seed: 99,
            ..ScenarioSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.truth.keyframes.len(), b.truth.keyframes.len());
        for (id, pose) in &a.drifted.keyframes {
            assert_eq!(pose.translation, b.drifted.keyframes[id].translation);
            assert_eq!(
                pose.rotation.quaternion_wxyz(),
                b.drifted.keyframes[id].rotation.quaternion_wxyz()
            );
        }
        for (id, point) in &a.drifted.map_points {
            assert_eq!(point.position, b.drifted.map_points[id].position);
        }
        assert_eq!(a.truth.observations.len(), b.truth.observations.len());
        for (oa, ob) in a.truth.observations.iter().zip(&b.truth.observations) {
            assert_eq!(oa.pixel, ob.pixel);
        }
        assert_eq!(a.geo_events.len(), b.geo_events.len());
        for (ea, eb) in a.geo_events.iter().zip(&b.geo_events) {
            assert_eq!(ea.anchor.utm, eb.anchor.utm);
            assert_eq!(ea.matches.matches, eb.matches.matches);
        }
    }

    #[test]
    fn constant_multiplier_compounds_to_the_closed_form() {
        let sim = generate(&ScenarioSpec {
            keyframes: 101,
            drift: DriftProfile::Constant { multiplier: 1.01 },
            ..no_offset_spec()
        })
        .unwrap();
        let t = &sim.truth.keyframes;
        let d = &sim.drifted.keyframes;
        let truth_step = (t[&100].translation - t[&99].translation).norm();
        let drift_step = (d[&100].translation - d[&99].translation).norm();
        let expected = 1.01f64.powi(100);
        assert!(
            (drift_step / truth_step / expected - 1.0).abs() < 1e-9,
            "final segment scale {} vs {expected}",
            drift_step / truth_step
        );
    }

    #[test]
    fn scale_trace_recovers_the_cumulative_profile() {
        let spec = ScenarioSpec {
            keyframes: 100,
            drift: DriftProfile::RampTo { final_factor: 2.0 },
            seed: 5,
            ..ScenarioSpec::default()
        };
        let sim = generate(&spec).unwrap();
        let cumulative = spec.drift.cumulative(spec.keyframes).unwrap();
        let global = sim.map_from_world.scale;
        let trace: BTreeMap<u64, f64> = scale_factor_trace(
            &sim.drifted.keyframe_positions(),
            &sim.truth.keyframe_positions(),
        )
        .into_iter()
        .collect();
        // Interior keyframes: the rolling median window is full and the
        // profile is monotone, so the median is the center value.
        for k in 3..=96u64 {
            let measured = trace[&k];
            let expected = global * cumulative[k as usize];
            assert!(
                (measured / expected - 1.0).abs() < 1e-6,
                "keyframe {k}: {measured} vs {expected}"
            );
        }
    }

    #[test]
    fn uncorrected_error_grows_superlinearly_on_a_city_grid() {
        let ate = |keyframes: usize| {
            let sim = generate(&ScenarioSpec {
                shape: TrajectoryShape::CityGrid { block: 10 },
                keyframes,
                drift: DriftProfile::Constant { multiplier: 1.02 },
                seed: 11,
                ..no_offset_spec()
            })
            .unwrap();
            let (mean, _) = evaluate_ate2d(
                &sim.drifted.keyframe_positions(),
                &sim.truth.keyframe_positions(),
            )
            .unwrap();
            mean
        };
        let (a50, a100, a200) = (ate(50), ate(100), ate(200));
        assert!(a100 > 2.3 * a50, "{a100} vs {a50}");
        assert!(a200 > 2.3 * a100, "{a200} vs {a100}");
    }

    #[test]
    fn geo_events_close_the_loop_at_zero_noise() {
        let spec = ScenarioSpec {
            keyframes: 40,
            seed: 13,
            ..ScenarioSpec::default()
        };
        let sim = generate(&spec).unwrap();
        assert!(!sim.geo_events.is_empty());
        let event = &sim.geo_events[1];
        let guess = sim.drifted.keyframes[&event.keyframe_id];
        let (pose, inliers) =
            localize_geo_image(&sim.drifted, &event.matches, &guess).unwrap();
        assert_eq!(inliers, event.matches.matches.len());
        let corr = make_geo_correspondence(&pose, &event.anchor, event.keyframe_id);
        // With no noise the drifted map is an exact similarity image of
        // the world, so the localized pose is the anchor position mapped
        // through it.
        let expected = sim.map_from_world.act(&corr.world_point);
        assert!(
            (corr.map_point - expected).norm() < 1e-6,
            "{} vs {expected}",
            corr.map_point
        );
    }

    #[test]
    fn dense_pose_graph_cost_matches_the_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut random_sim3 = |spread: f64| Sim3 {
            rotation: Rot3::exp(&Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4))),
            translation: Vector3::from_fn(|_, _| rng.random_range(-spread..spread)),
            scale: rng.random_range(0.5..2.0),
        };
        for _ in 0..20 {
            let mut graph = PoseGraph {
                keyframe_nodes: BTreeMap::new(),
                geo_nodes: BTreeMap::new(),
                rel_edges_kf: Vec::new(),
                rel_edges_geo: Vec::new(),
                anchor_edges: Vec::new(),
                weights: PgoWeights::default(),
            };
            for k in 0..5u64 {
                graph.keyframe_nodes.insert(k, random_sim3(8.0));
            }
            for m in 0..2usize {
                graph.geo_nodes.insert(m, random_sim3(8.0));
                graph.rel_edges_geo.push((m as u64 + 1, m, random_sim3(2.0)));
                graph.anchor_edges.push((
                    m,
                    Vector3::new(m as f64 * 3.0 - 1.0, 0.5, -2.0 * m as f64),
                ));
            }
            for k in 0..4u64 {
                graph.rel_edges_kf.push((k, k + 1, random_sim3(2.0)));
            }
            let module = graph.cost().unwrap();
            let dense = oracle_cost_pgo(&graph);
            assert!(
                (module - dense).abs() <= 1e-9 * module.abs().max(1.0),
                "module {module} vs oracle {dense}"
            );
        }
    }

    // Worked by hand: one identity-measurement edge between an identity
    // node and a pure-scale-2 node leaves log = (0, −ln 2, 0), giving
    // 1e5·(ln 2)²; one geo node at (3,0,4) anchored to the origin adds
    // 25. Total 48070.3013918201425 (16 significant digits).
    #[test]
    fn hand_computed_two_node_cost_pins_both_implementations() {
        let mut graph = PoseGraph {
            keyframe_nodes: BTreeMap::new(),
            geo_nodes: BTreeMap::new(),
            rel_edges_kf: vec![(0, 1, Sim3::identity())],
            rel_edges_geo: Vec::new(),
            anchor_edges: vec![(0, Vector3::zeros())],
            weights: PgoWeights::default(),
        };
        graph.keyframe_nodes.insert(0, Sim3::identity());
        graph.keyframe_nodes.insert(1, Sim3::pure_scale(2.0));
        graph.geo_nodes.insert(
            0,
            Sim3 {
                translation: Vector3::new(3.0, 0.0, 4.0),
                ..Sim3::identity()
            },
        );
        let expected = 48070.3013918201425f64;
        let module = graph.cost().unwrap();
        let dense = oracle_cost_pgo(&graph);
        assert!((module / expected - 1.0).abs() < 1e-12, "module {module}");
        assert!((dense / expected - 1.0).abs() < 1e-12, "oracle {dense}");
    }

    #[test]
    fn dense_ba_cost_matches_the_module() {
        let spec = ScenarioSpec {
            keyframes: 30,
            drift: DriftProfile::RampTo { final_factor: 1.3 },
            observation_noise: 2.0,
            seed: 23,
            ..no_offset_spec()
        };
        let sim = generate(&spec).unwrap();
        let mut scene = sim.drifted.clone();
        // Correspondences whose world side is the truth: anchor
        // residuals are nonzero, as in a live run.
        for k in [10u64, 18, 26] {
            scene.geo_correspondences.push(GeoCorrespondence::new(
                scene.keyframes[&k].to_sim3(),
                sim.truth.keyframes[&k],
                k,
                k,
            ));
        }
        let window = GraphWindow::build(&scene, 3, 15).unwrap();
        for options in [
            BaOptions::default(),
            BaOptions {
                full_history_anchors: true,
                huber_pixels: 1.0,
                anchor_weight: 50.0,
            },
        ] {
            let module = ba_cost(&scene, &window, &options).unwrap();
            let dense = oracle_cost_ba(&scene, &window, &options);
            assert!(module > 0.0);
            assert!(
                (module - dense).abs() <= 1e-9 * module.max(1.0),
                "module {module} vs oracle {dense}"
            );
        }
    }

    #[test]
    fn zero_residual_configurations_cost_nothing() {
        // A consistent graph: every edge measured from the very nodes it
        // connects, anchors placed on the node positions.
        let mut graph = PoseGraph {
            keyframe_nodes: BTreeMap::new(),
            geo_nodes: BTreeMap::new(),
            rel_edges_kf: Vec::new(),
            rel_edges_geo: Vec::new(),
            anchor_edges: Vec::new(),
            weights: PgoWeights::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut random_sim3 = || Sim3 {
            rotation: Rot3::exp(&Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4))),
            translation: Vector3::from_fn(|_, _| rng.random_range(-8.0..8.0)),
            scale: rng.random_range(0.5..2.0),
        };
        for k in 0..4u64 {
            graph.keyframe_nodes.insert(k, random_sim3());
        }
        graph.geo_nodes.insert(0, random_sim3());
        for k in 0..3u64 {
            let si = graph.keyframe_nodes[&k];
            let sj = graph.keyframe_nodes[&(k + 1)];
            graph.rel_edges_kf.push((k, k + 1, sj.compose(&si.inverse())));
        }
        let sm = graph.geo_nodes[&0];
        let sk = graph.keyframe_nodes[&2];
        graph.rel_edges_geo.push((2, 0, sm.compose(&sk.inverse())));
        graph.anchor_edges.push((0, sm.translation));
        assert!(graph.cost().unwrap() < 1e-15);
        assert!(oracle_cost_pgo(&graph) < 1e-15);

        // Bundle adjustment on an exact scene with exact anchors.
        let sim = generate(&ScenarioSpec {
            keyframes: 30,
            seed: 31,
            ..no_offset_spec()
        })
        .unwrap();
        let mut scene = sim.drifted.clone();
        for k in [10u64, 18, 26] {
            scene.geo_correspondences.push(GeoCorrespondence::new(
                scene.keyframes[&k].to_sim3(),
                scene.keyframes[&k],
                k,
                k,
            ));
        }
        let window = GraphWindow::build(&scene, 3, 15).unwrap();
        let options = BaOptions::default();
        assert!(ba_cost(&scene, &window, &options).unwrap() < 1e-15);
        assert!(oracle_cost_ba(&scene, &window, &options) < 1e-15);
    }
}
