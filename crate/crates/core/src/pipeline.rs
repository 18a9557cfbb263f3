//! Scene state and the incremental correction driver.
//!
//! A [`Scene`] is the live reconstruction: keyframe poses, triangulated map
//! points with their reference keyframes, pixel observations, and the
//! map↔world correspondences accumulated so far. The driver (added further
//! down this module) feeds keyframes through localization, one-shot
//! geo-registration, and the windowed pose-graph + bundle-adjustment
//! correction rounds.
//!
//! Everything here is deterministic: ordered maps keyed by integer ids, no
//! hash-order iteration, and no wall-clock reads.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::ba::{optimize_ba, BaOptions, Camera, Observation};
use crate::init::{
    apply_initialization, fit_ground_plane, fit_planar_similarity, GeoCorrespondence,
    RansacOptions,
};
use crate::io::GeoAnchor;
use crate::manifold::{Sim3, SE3};
use crate::pgo::{optimize_window, propagate_to_map_points, GraphWindow, PgoWeights};
use crate::pnp::{localize_geo_image, make_geo_correspondence, MapGeoMatches};
use crate::solver::{SolveReport, SolverOptions};

/// Rolling-median width used by [`scale_factor_trace`] to suppress
/// per-step noise in the inter-keyframe distance ratios.
pub const SCALE_TRACE_MEDIAN_WINDOW: usize = 5;

/// Ground-truth steps shorter than this are skipped by the scale trace;
/// the ratio of two near-zero displacements is numerically meaningless.
pub const MIN_TRACE_STEP: f64 = 1e-6;

/// Errors from scene bookkeeping and trajectory metrics.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// A keyframe arrived with an id not strictly greater than the newest.
    #[error("keyframe {id} is not newer than existing keyframe {newest}")]
    OutOfOrderKeyframe { id: u64, newest: u64 },
    /// An observation references a keyframe or point the scene lacks.
    #[error("observation references missing {kind} {id}")]
    DanglingObservation { kind: &'static str, id: u64 },
    /// Metric evaluation found no keyframe ids shared with ground truth.
    #[error("estimate and ground truth share no keyframe ids")]
    NoOverlap,
    /// A driver configuration field is outside its allowed range.
    #[error("{what} must be at least {min}, got {got}")]
    BadConfig {
        what: &'static str,
        min: usize,
        got: usize,
    },
    /// A keyframe delivered a point id the scene already holds.
    #[error("map point {id} was already delivered")]
    DuplicateMapPoint { id: u64 },
    /// A correction step failed inside the initializer.
    #[error(transparent)]
    Init(#[from] crate::init::InitError),
    /// A correction step failed inside the pose-graph stage.
    #[error(transparent)]
    Pgo(#[from] crate::pgo::PgoError),
    /// A correction step failed inside the bundle-adjustment stage.
    #[error(transparent)]
    Ba(#[from] crate::ba::BaError),
}

/// A triangulated 3D point and the keyframe whose correction it follows.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    /// Position in the current scene frame.
    pub position: Vector3<f64>,
    /// Keyframe whose pose correction is propagated to this point.
    pub reference_keyframe: u64,
}

/// The full reconstruction state operated on by every correction stage.
#[derive(Clone, Debug)]
pub struct Scene {
    /// Shared pinhole intrinsics for all keyframes and geo images.
    pub camera: Camera,
    /// World-from-camera keyframe poses, keyed by strictly increasing id.
    pub keyframes: BTreeMap<u64, SE3>,
    /// Triangulated points keyed by id.
    pub map_points: BTreeMap<u64, MapPoint>,
    /// Pixel observations linking keyframes to map points.
    pub observations: Vec<Observation>,
    /// Map↔world correspondences, sorted by keyframe id.
    pub geo_correspondences: Vec<GeoCorrespondence>,
    /// Set once the one-shot geo-registration has been applied.
    pub initialized: bool,
}

impl Scene {
    /// Creates an empty scene for the given camera.
    pub fn new(camera: Camera) -> Self {
        Scene {
            camera,
            keyframes: BTreeMap::new(),
            map_points: BTreeMap::new(),
            observations: Vec::new(),
            geo_correspondences: Vec::new(),
            initialized: false,
        }
    }

    /// Id of the newest keyframe, if any.
    pub fn newest_keyframe(&self) -> Option<u64> {
        self.keyframes.keys().next_back().copied()
    }

    /// Appends a keyframe, enforcing strictly increasing ids.
    ///
    /// # Errors
    ///
    /// [`PipelineError::OutOfOrderKeyframe`] when `id` does not exceed the
    /// newest existing keyframe id.
    pub fn insert_keyframe(&mut self, id: u64, pose: SE3) -> Result<(), PipelineError> {
        if let Some(newest) = self.newest_keyframe() {
            if id <= newest {
                return Err(PipelineError::OutOfOrderKeyframe { id, newest });
            }
        }
        self.keyframes.insert(id, pose);
        Ok(())
    }

    /// Camera centers of all keyframes, keyed by id.
    pub fn keyframe_positions(&self) -> BTreeMap<u64, Vector3<f64>> {
        self.keyframes
            .iter()
            .map(|(&id, pose)| (id, pose.translation))
            .collect()
    }

    /// Indices of observations grouped by observing keyframe.
    pub fn observations_by_keyframe(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut index: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, obs) in self.observations.iter().enumerate() {
            index.entry(obs.keyframe_id).or_default().push(i);
        }
        index
    }

    /// Indices of observations grouped by observed map point.
    pub fn observations_by_point(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut index: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, obs) in self.observations.iter().enumerate() {
            index.entry(obs.point_id).or_default().push(i);
        }
        index
    }

    /// Checks referential integrity: every observation must name a live
    /// keyframe and map point, every map point a live reference keyframe,
    /// and correspondences must be sorted by keyframe id.
    ///
    /// # Errors
    ///
    /// [`PipelineError::DanglingObservation`] naming the first missing id.
    pub fn validate(&self) -> Result<(), PipelineError> {
        for obs in &self.observations {
            if !self.keyframes.contains_key(&obs.keyframe_id) {
                return Err(PipelineError::DanglingObservation {
                    kind: "keyframe",
                    id: obs.keyframe_id,
                });
            }
            if !self.map_points.contains_key(&obs.point_id) {
                return Err(PipelineError::DanglingObservation {
                    kind: "map point",
                    id: obs.point_id,
                });
            }
        }
        for point in self.map_points.values() {
            if !self.keyframes.contains_key(&point.reference_keyframe) {
                return Err(PipelineError::DanglingObservation {
                    kind: "reference keyframe",
                    id: point.reference_keyframe,
                });
            }
        }
        for pair in self.geo_correspondences.windows(2) {
            if pair[1].keyframe_id < pair[0].keyframe_id {
                return Err(PipelineError::DanglingObservation {
                    kind: "out-of-order correspondence keyframe",
                    id: pair[1].keyframe_id,
                });
            }
        }
        Ok(())
    }

    /// Transforms the whole scene by a similarity `g`.
    ///
    /// Keyframe poses become `g ∘ T` with the scale factor dropped (camera
    /// frames stay metric; camera centers move to the scaled positions),
    /// map points become `g(X)`, and the map-side poses of stored
    /// correspondences follow the keyframe rule. Pixel observations and
    /// world-side data are untouched. This is reprojection-invariant: the
    /// camera-frame coordinates of every point scale uniformly, which the
    /// pinhole division cancels.
    pub fn apply_similarity(&mut self, g: &Sim3) {
        for pose in self.keyframes.values_mut() {
            *pose = g.compose(&pose.to_sim3()).to_se3();
        }
        for point in self.map_points.values_mut() {
            point.position = g.act(&point.position);
        }
        for corr in &mut self.geo_correspondences {
            corr.map_pose = g.compose(&corr.map_pose).to_se3().to_sim3();
            corr.map_point = corr.map_pose.translation;
        }
    }
}

/// Mean and standard deviation of the ground-plane (x, z) distance between
/// matching keyframe positions.
///
/// Only ids present in both maps participate; height differences are
/// deliberately ignored, matching the ground-plane evaluation convention
/// for street-level trajectories.
///
/// # Errors
///
/// [`PipelineError::NoOverlap`] when the id sets are disjoint.
pub fn evaluate_ate2d(
    estimate: &BTreeMap<u64, Vector3<f64>>,
    truth: &BTreeMap<u64, Vector3<f64>>,
) -> Result<(f64, f64), PipelineError> {
    let distances: Vec<f64> = estimate
        .iter()
        .filter_map(|(id, est)| {
            truth.get(id).map(|gt| {
                let dx = est.x - gt.x;
                let dz = est.z - gt.z;
                (dx * dx + dz * dz).sqrt()
            })
        })
        .collect();
    if distances.is_empty() {
        return Err(PipelineError::NoOverlap);
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Per-keyframe distance errors on the ground plane, for CSV export.
pub fn per_keyframe_error2d(
    estimate: &BTreeMap<u64, Vector3<f64>>,
    truth: &BTreeMap<u64, Vector3<f64>>,
) -> Vec<(u64, f64)> {
    estimate
        .iter()
        .filter_map(|(&id, est)| {
            truth.get(&id).map(|gt| {
                let dx = est.x - gt.x;
                let dz = est.z - gt.z;
                (id, (dx * dx + dz * dz).sqrt())
            })
        })
        .collect()
}

/// Per-keyframe scale factor: the ratio of estimated to ground-truth
/// inter-keyframe displacement, smoothed by a centered rolling median of
/// width [`SCALE_TRACE_MEDIAN_WINDOW`].
///
/// Each ratio is keyed by the later keyframe of its consecutive pair
/// (consecutive within the ids shared by both maps). Ground-truth steps
/// shorter than [`MIN_TRACE_STEP`] are skipped. A perfectly scaled
/// trajectory yields a trace of ones; un-corrected monocular drift shows
/// up as a systematic departure from one.
pub fn scale_factor_trace(
    estimate: &BTreeMap<u64, Vector3<f64>>,
    truth: &BTreeMap<u64, Vector3<f64>>,
) -> Vec<(u64, f64)> {
    let shared: Vec<u64> = estimate
        .keys()
        .filter(|id| truth.contains_key(id))
        .copied()
        .collect();
    let mut raw: Vec<(u64, f64)> = Vec::new();
    for pair in shared.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let gt_step = (truth[&b] - truth[&a]).norm();
        if gt_step < MIN_TRACE_STEP {
            continue;
        }
        let est_step = (estimate[&b] - estimate[&a]).norm();
        raw.push((b, est_step / gt_step));
    }
    let half = SCALE_TRACE_MEDIAN_WINDOW / 2;
    raw.iter()
        .enumerate()
        .map(|(i, &(id, _))| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(raw.len());
            let mut window: Vec<f64> = raw[lo..hi].iter().map(|&(_, r)| r).collect();
            window.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
            let mid = window.len() / 2;
            let median = if window.len() % 2 == 1 {
                window[mid]
            } else {
                0.5 * (window[mid - 1] + window[mid])
            };
            (id, median)
        })
        .collect()
}

/// Tunables of the incremental correction driver.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// The one-shot geo-registration fires when this many
    /// correspondences have accumulated (must be ≥ 2).
    pub init_index: usize,
    /// Number of newest correspondences spanning each correction window
    /// (must be ≥ 2 and ≤ `init_index + 1` so the first correction round
    /// has a full window).
    pub window: usize,
    /// Shared-observation count that makes two keyframes covisible.
    pub covisibility_min_shared: usize,
    /// Pose-graph term weights.
    pub weights: PgoWeights,
    /// Levenberg–Marquardt settings shared by all stages.
    pub solver: SolverOptions,
    /// RANSAC settings for the registration.
    pub ransac: RansacOptions,
    /// Bundle-adjustment settings.
    pub ba: BaOptions,
    /// Constant height added to the registration transform.
    pub height_offset: f64,
    /// Run the pose-graph stage of each correction round (off only for
    /// ablation studies).
    pub run_pgo: bool,
    /// Run the bundle-adjustment stage of each correction round (off
    /// only for ablation studies).
    pub run_ba: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            init_index: 4,
            window: 3,
            covisibility_min_shared: crate::pgo::DEFAULT_COVISIBILITY_MIN_SHARED,
            weights: PgoWeights::default(),
            solver: SolverOptions::default(),
            ransac: RansacOptions::default(),
            ba: BaOptions::default(),
            height_offset: 0.0,
            run_pgo: true,
            run_ba: true,
        }
    }
}

impl PipelineConfig {
    /// Checks the structural invariants of the configuration.
    ///
    /// # Errors
    ///
    /// [`PipelineError::BadConfig`] naming the violated bound.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.init_index < 2 {
            return Err(PipelineError::BadConfig {
                what: "init_index",
                min: 2,
                got: self.init_index,
            });
        }
        if self.window < 2 {
            return Err(PipelineError::BadConfig {
                what: "window",
                min: 2,
                got: self.window,
            });
        }
        if self.window > self.init_index + 1 {
            return Err(PipelineError::BadConfig {
                what: "init_index + 1 (window must not exceed it)",
                min: self.window,
                got: self.init_index + 1,
            });
        }
        Ok(())
    }
}

/// One keyframe's worth of raw reconstruction output.
///
/// Poses and points are expressed in the upstream reconstruction's own
/// (drifting, arbitrarily scaled) frame; the driver transports them
/// through its accumulated alignment before they touch the scene.
#[derive(Clone, Debug)]
pub struct KeyframeInput {
    /// Keyframe id; must exceed every id already in the scene.
    pub id: u64,
    /// World-from-camera pose in the raw reconstruction frame.
    pub pose: SE3,
    /// Points first triangulated at this keyframe (id, raw position).
    pub new_points: Vec<(u64, Vector3<f64>)>,
    /// New pixel observations; they may reference this keyframe and any
    /// already-delivered keyframe or point.
    pub observations: Vec<Observation>,
    /// A geo-tagged image that matched this keyframe, if any.
    pub geo: Option<GeoInput>,
}

/// A geo-tagged image delivered alongside the keyframe it matched.
#[derive(Clone, Debug)]
pub struct GeoInput {
    /// Its 2D↔3D matches against the map.
    pub matches: MapGeoMatches,
    /// Its geo-tag (normalized: UTM position fields present).
    pub anchor: GeoAnchor,
}

/// What one ingested keyframe triggered.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// Keyframe stored; no geo image, or its localization was dropped.
    None,
    /// A geo image was localized and its correspondence stored, before
    /// the registration threshold.
    Localized {
        /// Index of the appended correspondence.
        correspondence: usize,
        /// PnP inliers over total matches.
        inliers: usize,
        matches: usize,
    },
    /// The one-shot geo-registration ran on this correspondence.
    Initialized {
        /// Correspondences available at registration time.
        correspondences: usize,
        /// RANSAC consensus size.
        inliers: usize,
        /// Scale of the applied map-to-world transform.
        scale: f64,
    },
    /// A correction round ran: pose-graph first, bundle adjustment after.
    Corrected {
        /// First keyframe of the corrected window.
        window_start: u64,
        /// Last (newest) keyframe of the corrected window.
        window_end: u64,
        /// Pose-graph solve statistics (absent when ablated away).
        pgo: Option<SolveReport>,
        /// Bundle-adjustment solve statistics (absent when ablated away).
        ba: Option<SolveReport>,
    },
}

/// Per-keyframe record emitted by [`Pipeline::ingest_keyframe`].
#[derive(Clone, Debug, Serialize)]
pub struct CorrectionEvent {
    /// The ingested keyframe.
    pub keyframe_id: u64,
    /// What the ingestion triggered.
    #[serde(flatten)]
    pub kind: EventKind,
}

/// The incremental correction driver.
///
/// Feeds keyframes into a scene one at a time. Each geo-tagged image is
/// localized against the map; the one-shot registration runs when the
/// correspondence count reaches `init_index`; every later correspondence
/// triggers a correction round (pose-graph, then bundle adjustment) over
/// the newest-correspondence window.
///
/// The driver keeps a running **alignment**: the similarity mapping the
/// raw reconstruction frame into the corrected scene frame. It starts at
/// identity, composes the registration transform when that runs, and
/// composes each round's frontier correction (the newest keyframe's
/// similarity change, scale included) so that raw keyframes arriving
/// after a correction continue seamlessly from the corrected frontier.
#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    alignment: Sim3,
    dropped: usize,
}

impl Pipeline {
    /// Builds a driver from a validated configuration.
    ///
    /// # Errors
    ///
    /// [`PipelineError::BadConfig`] when the configuration is invalid.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline {
            config,
            alignment: Sim3::identity(),
            dropped: 0,
        })
    }

    /// The active configuration.
    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// The similarity currently mapping raw-frame input into the scene.
    pub fn alignment(&self) -> &Sim3 {
        &self.alignment
    }

    /// Geo images dropped so far for weak consensus or failed solves.
    pub fn dropped_geo_images(&self) -> usize {
        self.dropped
    }

    /// Ingests one keyframe: stores it (with its points and
    /// observations), localizes an attached geo image if present, and
    /// triggers registration or a correction round per the protocol.
    ///
    /// # Errors
    ///
    /// [`PipelineError::OutOfOrderKeyframe`] and referential errors on
    /// malformed input; stage errors if registration or a correction
    /// round fails. PnP failure is not an error — the geo image is
    /// dropped (logged) and the event kind is [`EventKind::None`].
    pub fn ingest_keyframe(
        &mut self,
        scene: &mut Scene,
        input: KeyframeInput,
    ) -> Result<CorrectionEvent, PipelineError> {
        let id = input.id;
        // Validate the increment before mutating anything.
        if let Some(newest) = scene.newest_keyframe() {
            if id <= newest {
                return Err(PipelineError::OutOfOrderKeyframe { id, newest });
            }
        }
        for &(point_id, _) in &input.new_points {
            if scene.map_points.contains_key(&point_id) {
                return Err(PipelineError::DuplicateMapPoint { id: point_id });
            }
        }
        for obs in &input.observations {
            if obs.keyframe_id != id && !scene.keyframes.contains_key(&obs.keyframe_id) {
                return Err(PipelineError::DanglingObservation {
                    kind: "keyframe",
                    id: obs.keyframe_id,
                });
            }
            if !scene.map_points.contains_key(&obs.point_id)
                && !input.new_points.iter().any(|&(p, _)| p == obs.point_id)
            {
                return Err(PipelineError::DanglingObservation {
                    kind: "map point",
                    id: obs.point_id,
                });
            }
        }

        // Transport the raw input through the current alignment.
        scene.insert_keyframe(
            id,
            self.alignment.compose(&input.pose.to_sim3()).to_se3(),
        )?;
        for (point_id, raw) in input.new_points {
            scene.map_points.insert(
                point_id,
                MapPoint {
                    position: self.alignment.act(&raw),
                    reference_keyframe: id,
                },
            );
        }
        scene.observations.extend(input.observations);

        let Some(geo) = input.geo else {
            return Ok(CorrectionEvent {
                keyframe_id: id,
                kind: EventKind::None,
            });
        };

        let guess = scene.keyframes[&id];
        let total_matches = geo.matches.matches.len();
        let (pose_map, inliers) = match localize_geo_image(scene, &geo.matches, &guess) {
            Ok(solved) => solved,
            Err(err) => {
                log::warn!(
                    "dropping geo image {} at keyframe {id}: {err}",
                    geo.matches.geo_image_id
                );
                self.dropped += 1;
                return Ok(CorrectionEvent {
                    keyframe_id: id,
                    kind: EventKind::None,
                });
            }
        };
        scene
            .geo_correspondences
            .push(make_geo_correspondence(&pose_map, &geo.anchor, id));
        let count = scene.geo_correspondences.len();

        if !scene.initialized {
            if count < self.config.init_index {
                return Ok(CorrectionEvent {
                    keyframe_id: id,
                    kind: EventKind::Localized {
                        correspondence: count - 1,
                        inliers,
                        matches: total_matches,
                    },
                });
            }
            // Registration: ground plane from the map structure, planar
            // similarity between plane-aligned correspondences and their
            // geo-tags, then the composed transform applied to the scene.
            let cloud: Vec<Vector3<f64>> =
                scene.map_points.values().map(|p| p.position).collect();
            let plane = fit_ground_plane(&cloud)?;
            // The similarity is planar: flatten both sides so the fit (and
            // its consensus test) sees only the horizontal geometry. The
            // vertical offset is a separate degree of freedom recovered
            // from the consensus set below.
            let flattened: Vec<GeoCorrespondence> = scene
                .geo_correspondences
                .iter()
                .map(|c| {
                    let mut map_pose = plane.to_sim3().compose(&c.map_pose);
                    map_pose.translation.y = 0.0;
                    let mut world_pose = c.world_pose;
                    world_pose.translation.y = 0.0;
                    GeoCorrespondence::new(map_pose, world_pose, c.keyframe_id, c.anchor_id)
                })
                .collect();
            let (similarity, mask) = fit_planar_similarity(&flattened, &self.config.ransac)?;
            let mut height_gap = 0.0;
            let mut consensus = 0usize;
            for (c, &inlier) in scene.geo_correspondences.iter().zip(&mask) {
                if inlier {
                    let lifted = plane.act(&c.map_point);
                    height_gap += c.world_point.y - similarity.s * lifted.y;
                    consensus += 1;
                }
            }
            height_gap /= consensus as f64;
            let g = apply_initialization(
                scene,
                &plane,
                &similarity,
                self.config.height_offset + height_gap,
            )?;
            self.alignment = g.compose(&self.alignment);
            return Ok(CorrectionEvent {
                keyframe_id: id,
                kind: EventKind::Initialized {
                    correspondences: count,
                    inliers: mask.iter().filter(|&&b| b).count(),
                    scale: g.scale,
                },
            });
        }

        // Correction round over the newest-correspondence window:
        // pose-graph first (coarse, distributes the scale error), bundle
        // adjustment after (fine, against the pixel evidence).
        let window = GraphWindow::build(scene, self.config.window, self.config.covisibility_min_shared)?;
        let frontier = *window.c1.last().expect("window keyframes are never empty");
        let previous = window.c1[window.c1.len() - 2];
        let frontier_before = scene.keyframes[&frontier];
        let previous_before = scene.keyframes[&previous];
        let pgo_report = if self.config.run_pgo {
            let outcome = optimize_window(scene, &window, self.config.weights, &self.config.solver)?;
            propagate_to_map_points(scene, &outcome.old_poses, &outcome.new_poses)?;
            Some(outcome.report)
        } else {
            None
        };
        let ba_report = if self.config.run_ba {
            Some(optimize_ba(scene, &window, &self.config.ba, &self.config.solver)?)
        } else {
            None
        };
        // Future raw keyframes must continue seamlessly from the corrected
        // frontier. The rotation and translation of the continuation come
        // from the frontier's pose change; its scale cannot (poses are
        // written back scale-free), so the stretch the stages actually
        // applied is measured on the frontier's last trajectory step.
        let frontier_after = scene.keyframes[&frontier];
        let previous_after = scene.keyframes[&previous];
        let old_step = (frontier_before.translation - previous_before.translation).norm();
        let new_step = (frontier_after.translation - previous_after.translation).norm();
        let stretch = if old_step > MIN_TRACE_STEP && new_step > MIN_TRACE_STEP {
            new_step / old_step
        } else {
            1.0
        };
        let spin = frontier_after
            .rotation
            .compose(&frontier_before.rotation.inverse());
        let correction = Sim3 {
            translation: frontier_after.translation
                - stretch * spin.act(&frontier_before.translation),
            rotation: spin,
            scale: stretch,
        };
        self.alignment = correction.compose(&self.alignment);
        Ok(CorrectionEvent {
            keyframe_id: id,
            kind: EventKind::Corrected {
                window_start: window.c1[0],
                window_end: frontier,
                pgo: pgo_report,
                ba: ba_report,
            },
        })
    }
}


#[cfg(test)]
mod driver_tests {
    use nalgebra::Vector2;

    use super::*;
    use crate::manifold::Rot3;
    use crate::sim::{generate, DriftProfile, ScenarioSpec, Simulation, TrajectoryShape};

    fn test_camera() -> Camera {
        Camera::new(500.0, 500.0, 320.0, 240.0)
    }

    /// A noise-free straight run: drift disabled, map frame offset on, so
    /// the raw stream is an exact similarity image of the ground truth.
    fn quiet_spec() -> ScenarioSpec {
        ScenarioSpec {
            keyframes: 55,
            seed: 7,
            ..ScenarioSpec::default()
        }
    }

    /// Feeds the simulated raw stream through a fresh driver and scene.
    fn run_stream(
        spec: &ScenarioSpec,
        config: PipelineConfig,
    ) -> (Scene, Vec<CorrectionEvent>, Pipeline, Simulation) {
        let sim = generate(spec).expect("valid scenario");
        let mut scene = Scene::new(spec.camera);
        let mut pipeline = Pipeline::new(config).expect("valid config");
        let mut events = Vec::new();
        for input in sim.drifted_stream() {
            let event = pipeline
                .ingest_keyframe(&mut scene, input)
                .expect("ingestion succeeds");
            events.push(event);
        }
        (scene, events, pipeline, sim)
    }

    #[test]
    fn config_bounds_are_enforced() {
        assert!(Pipeline::new(PipelineConfig::default()).is_ok());

        let too_early = PipelineConfig {
            init_index: 1,
            window: 2,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            Pipeline::new(too_early).unwrap_err(),
            PipelineError::BadConfig {
                what: "init_index",
                ..
            }
        ));

        let degenerate_window = PipelineConfig {
            window: 1,
            ..PipelineConfig::default()
        };
        assert!(matches!(
            Pipeline::new(degenerate_window).unwrap_err(),
            PipelineError::BadConfig { what: "window", .. }
        ));

        // The first correction round happens one correspondence after the
        // registration; a window wider than that can never be filled.
        let unfillable = PipelineConfig {
            init_index: 2,
            window: 4,
            ..PipelineConfig::default()
        };
        assert!(Pipeline::new(unfillable).is_err());
    }

    #[test]
    fn keyframes_without_geo_only_grow_the_scene() {
        let mut pipeline = Pipeline::new(PipelineConfig::default()).unwrap();
        let mut scene = Scene::new(test_camera());
        for id in 0..5 {
            let event = pipeline
                .ingest_keyframe(
                    &mut scene,
                    KeyframeInput {
                        id,
                        pose: SE3 {
                            rotation: Rot3::identity(),
                            translation: Vector3::new(id as f64, 0.0, 0.0),
                        },
                        new_points: vec![(id, Vector3::new(id as f64, 1.0, 5.0))],
                        observations: vec![Observation {
                            keyframe_id: id,
                            point_id: id,
                            pixel: Vector2::new(320.0, 140.0),
                        }],
                        geo: None,
                    },
                )
                .unwrap();
            assert!(matches!(event.kind, EventKind::None));
            assert_eq!(event.keyframe_id, id);
        }
        assert_eq!(scene.keyframes.len(), 5);
        assert_eq!(scene.map_points.len(), 5);
        assert_eq!(scene.observations.len(), 5);
        assert!(scene.geo_correspondences.is_empty());
        assert!(!scene.initialized);
    }

    #[test]
    fn event_protocol_localizes_then_initializes_then_corrects() {
        let spec = quiet_spec();
        let (scene, events, pipeline, sim) = run_stream(&spec, PipelineConfig::default());

        assert_eq!(events.len(), 55);
        assert_eq!(pipeline.dropped_geo_images(), 0);
        assert!(scene.initialized);

        // Anchors arrive every ten keyframes. With the registration set to
        // fire on the fourth correspondence the protocol is fixed:
        for event in &events {
            let k = event.keyframe_id;
            match (k, &event.kind) {
                (0 | 10 | 20, EventKind::Localized { correspondence, inliers, matches }) => {
                    assert_eq!(*correspondence as u64, k / 10);
                    // Noise-free similarity image: every match is an inlier.
                    assert_eq!(inliers, matches);
                    assert!(*matches >= 4);
                }
                (30, EventKind::Initialized { correspondences, inliers, scale }) => {
                    assert_eq!(*correspondences, 4);
                    assert_eq!(*inliers, 4);
                    // The registration inverts the synthetic map-frame offset.
                    // It is not exact even on noise-free input: the ground
                    // plane is estimated from a finite slab of map points,
                    // and its small tilt leaks into the planar fit.
                    let expected = 1.0 / sim.map_from_world.scale;
                    assert!(
                        (scale / expected - 1.0).abs() < 1e-2,
                        "registered scale {scale} should invert the map offset {expected}"
                    );
                }
                (40 | 50, EventKind::Corrected { window_start, window_end, pgo, ba }) => {
                    assert_eq!(*window_end, k);
                    assert_eq!(*window_start, k - 20);
                    let pgo = pgo.expect("pose-graph stage enabled");
                    let ba = ba.expect("bundle-adjustment stage enabled");
                    assert!(pgo.final_cost <= pgo.initial_cost);
                    assert!(ba.final_cost <= ba.initial_cost);
                }
                (_, EventKind::None) => assert_ne!(k % 10, 0, "keyframe {k} had a geo image"),
                (_, other) => panic!("keyframe {k}: unexpected event {other:?}"),
            }
        }

        // Drift-free input: the corrected scene sits on the ground truth up
        // to the small plane-estimation tilt.
        let (ate, _) = evaluate_ate2d(
            &scene.keyframe_positions(),
            &sim.truth.keyframe_positions(),
        )
        .unwrap();
        assert!(ate < 0.5, "drift-free ATE should nearly vanish, got {ate}");
    }

    #[test]
    fn ablation_switches_disable_single_stages() {
        let spec = quiet_spec();

        let no_ba = PipelineConfig {
            run_ba: false,
            ..PipelineConfig::default()
        };
        let (_, events, _, _) = run_stream(&spec, no_ba);
        let corrected = events
            .iter()
            .find(|e| matches!(e.kind, EventKind::Corrected { .. }))
            .expect("at least one correction round");
        if let EventKind::Corrected { pgo, ba, .. } = &corrected.kind {
            assert!(pgo.is_some());
            assert!(ba.is_none());
        }

        let no_pgo = PipelineConfig {
            run_pgo: false,
            ..PipelineConfig::default()
        };
        let (_, events, _, _) = run_stream(&spec, no_pgo);
        let corrected = events
            .iter()
            .find(|e| matches!(e.kind, EventKind::Corrected { .. }))
            .expect("at least one correction round");
        if let EventKind::Corrected { pgo, ba, .. } = &corrected.kind {
            assert!(pgo.is_none());
            assert!(ba.is_some());
        }
    }

    #[test]
    fn out_of_order_keyframes_are_rejected() {
        let mut pipeline = Pipeline::new(PipelineConfig::default()).unwrap();
        let mut scene = Scene::new(test_camera());
        let input = |id: u64| KeyframeInput {
            id,
            pose: SE3::identity(),
            new_points: Vec::new(),
            observations: Vec::new(),
            geo: None,
        };
        pipeline.ingest_keyframe(&mut scene, input(5)).unwrap();
        for stale in [5, 3] {
            let err = pipeline
                .ingest_keyframe(&mut scene, input(stale))
                .unwrap_err();
            assert!(matches!(
                err,
                PipelineError::OutOfOrderKeyframe { id, newest: 5 } if id == stale
            ));
        }
        assert_eq!(scene.keyframes.len(), 1);
    }

    #[test]
    fn referential_errors_leave_the_scene_untouched() {
        let mut pipeline = Pipeline::new(PipelineConfig::default()).unwrap();
        let mut scene = Scene::new(test_camera());
        pipeline
            .ingest_keyframe(
                &mut scene,
                KeyframeInput {
                    id: 0,
                    pose: SE3::identity(),
                    new_points: vec![(7, Vector3::new(0.0, 0.0, 5.0))],
                    observations: Vec::new(),
                    geo: None,
                },
            )
            .unwrap();

        let bad_point = KeyframeInput {
            id: 1,
            pose: SE3::identity(),
            new_points: Vec::new(),
            observations: vec![Observation {
                keyframe_id: 1,
                point_id: 99,
                pixel: Vector2::zeros(),
            }],
            geo: None,
        };
        assert!(matches!(
            pipeline.ingest_keyframe(&mut scene, bad_point).unwrap_err(),
            PipelineError::DanglingObservation {
                kind: "map point",
                id: 99
            }
        ));

        let bad_keyframe = KeyframeInput {
            id: 1,
            pose: SE3::identity(),
            new_points: Vec::new(),
            observations: vec![Observation {
                keyframe_id: 42,
                point_id: 7,
                pixel: Vector2::zeros(),
            }],
            geo: None,
        };
        assert!(matches!(
            pipeline.ingest_keyframe(&mut scene, bad_keyframe).unwrap_err(),
            PipelineError::DanglingObservation {
                kind: "keyframe",
                id: 42
            }
        ));

        let duplicate = KeyframeInput {
            id: 1,
            pose: SE3::identity(),
            new_points: vec![(7, Vector3::zeros())],
            observations: Vec::new(),
            geo: None,
        };
        assert!(matches!(
            pipeline.ingest_keyframe(&mut scene, duplicate).unwrap_err(),
            PipelineError::DuplicateMapPoint { id: 7 }
        ));

        // Every rejection happened before any mutation.
        assert_eq!(scene.keyframes.len(), 1);
        assert_eq!(scene.map_points.len(), 1);
        assert!(scene.observations.is_empty());
    }

    #[test]
    fn unlocalizable_geo_images_are_dropped_softly() {
        let mut pipeline = Pipeline::new(PipelineConfig::default()).unwrap();
        let mut scene = Scene::new(test_camera());
        let anchor = GeoAnchor {
            id: 0,
            lat_lon: None,
            utm: Some(crate::io::geodesy::UtmCoord {
                easting: 500_000.0,
                northing: 4_000_000.0,
                zone: 31,
                south: false,
            }),
            height: 0.0,
            heading: None,
            pitch: None,
            roll: None,
        };
        // Three matches are below the PnP minimum: the image must be
        // dropped without failing the ingestion.
        let event = pipeline
            .ingest_keyframe(
                &mut scene,
                KeyframeInput {
                    id: 0,
                    pose: SE3::identity(),
                    new_points: vec![
                        (0, Vector3::new(-1.0, 0.0, 5.0)),
                        (1, Vector3::new(1.0, 0.5, 6.0)),
                        (2, Vector3::new(0.0, -0.5, 7.0)),
                    ],
                    observations: Vec::new(),
                    geo: Some(GeoInput {
                        matches: MapGeoMatches {
                            geo_image_id: 900,
                            camera: test_camera(),
                            matches: vec![
                                (0, Vector2::new(220.0, 240.0)),
                                (1, Vector2::new(403.0, 281.0)),
                                (2, Vector2::new(320.0, 204.0)),
                            ],
                        },
                        anchor,
                    }),
                },
            )
            .unwrap();
        assert!(matches!(event.kind, EventKind::None));
        assert_eq!(pipeline.dropped_geo_images(), 1);
        assert!(scene.geo_correspondences.is_empty());
        // The keyframe itself was still stored.
        assert_eq!(scene.keyframes.len(), 1);
    }

    #[test]
    fn identical_streams_produce_bitwise_identical_scenes() {
        let spec = ScenarioSpec {
            shape: TrajectoryShape::CityGrid { block: 10 },
            keyframes: 60,
            drift: DriftProfile::RampTo { final_factor: 1.3 },
            observation_noise: 0.5,
            anchor_noise: 0.5,
            seed: 42,
            ..ScenarioSpec::default()
        };
        let (scene_a, _, pipeline_a, _) = run_stream(&spec, PipelineConfig::default());
        let (scene_b, _, pipeline_b, _) = run_stream(&spec, PipelineConfig::default());
        assert_eq!(scene_a.keyframes.len(), scene_b.keyframes.len());
        for (a, b) in scene_a.keyframes.values().zip(scene_b.keyframes.values()) {
            for i in 0..3 {
                assert_eq!(a.translation[i].to_bits(), b.translation[i].to_bits());
            }
        }
        for (a, b) in scene_a.map_points.values().zip(scene_b.map_points.values()) {
            for i in 0..3 {
                assert_eq!(a.position[i].to_bits(), b.position[i].to_bits());
            }
        }
        for i in 0..3 {
            assert_eq!(
                pipeline_a.alignment().translation[i].to_bits(),
                pipeline_b.alignment().translation[i].to_bits()
            );
        }
    }

    #[test]
    fn corrections_hold_scale_drift_near_unity() {
        let spec = ScenarioSpec {
            shape: TrajectoryShape::CityGrid { block: 10 },
            keyframes: 80,
            spacing: 2.0,
            drift: DriftProfile::RampTo { final_factor: 1.5 },
            points_per_keyframe: 16,
            seed: 3,
            ..ScenarioSpec::default()
        };
        let (scene, events, pipeline, sim) = run_stream(&spec, PipelineConfig::default());
        assert_eq!(pipeline.dropped_geo_images(), 0);
        assert!(events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Corrected { .. })));

        let truth = sim.truth.keyframe_positions();
        let estimate = scene.keyframe_positions();
        let (corrected_ate, _) = evaluate_ate2d(&estimate, &truth).unwrap();
        assert!(
            corrected_ate < 2.0,
            "corrected trajectory should track the ground truth, ATE {corrected_ate}"
        );

        // The per-keyframe scale factor must hug one after corrections begin,
        // even though the raw input drifts to 1.5× scale.
        let trace = scale_factor_trace(&estimate, &truth);
        let after_init: Vec<f64> = trace
            .iter()
            .filter(|(k, _)| *k > 30)
            .map(|&(_, factor)| factor)
            .collect();
        assert!(!after_init.is_empty());
        let near_unity = after_init
            .iter()
            .filter(|f| (0.9..=1.1).contains(*f))
            .count();
        let fraction = near_unity as f64 / after_init.len() as f64;
        assert!(
            fraction >= 0.9,
            "only {:.0}% of post-registration scale factors were within 10% of unity",
            fraction * 100.0
        );
    }
}
