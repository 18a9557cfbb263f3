//! JSON snapshot of a full reconstruction ([`Scene`]).
//!
//! The document is versioned through a `schema` field
//! (`geodrift/scene@1`); loading a file with a different tag fails with
//! [`IoError::SchemaVersion`] rather than misinterpreting it. All floats
//! are written in shortest-round-trip form and rotations are stored as
//! their raw quaternion coefficients, so save → load reproduces the
//! in-memory scene bit for bit.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::IoError;
use crate::ba::{Camera, Observation};
use crate::init::GeoCorrespondence;
use crate::manifold::{Rot3, Sim3, SE3};
use crate::pipeline::{MapPoint, Scene};

/// Schema tag accepted and emitted by this build.
pub const SCENE_SCHEMA: &str = "geodrift/scene@1";

/// How far a stored quaternion's norm may deviate from one. Stored
/// coefficients are wrapped without renormalizing to keep their bits, so
/// the gate is tight.
const QUATERNION_TOLERANCE: f64 = 1e-9;

/// Serialized SE(3) pose: a position and a `[w, x, y, z]` unit
/// quaternion. Shared by the scene snapshot and the keyframe stream.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PoseDto {
    pub position: [f64; 3],
    pub rotation_wxyz: [f64; 4],
}

impl PoseDto {
    pub fn from_se3(pose: &SE3) -> Self {
        let (w, x, y, z) = pose.rotation.quaternion_wxyz();
        PoseDto {
            position: pose.translation.into(),
            rotation_wxyz: [w, x, y, z],
        }
    }

    pub fn to_se3(self, what: &str) -> Result<SE3, IoError> {
        Ok(SE3 {
            rotation: rotation_from_wxyz(self.rotation_wxyz, what)?,
            translation: Vector3::from(self.position),
        })
    }
}

/// Serialized Sim(3): a pose plus a positive scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Sim3Dto {
    pub position: [f64; 3],
    pub rotation_wxyz: [f64; 4],
    pub scale: f64,
}

impl Sim3Dto {
    pub fn from_sim3(pose: &Sim3) -> Self {
        let (w, x, y, z) = pose.rotation.quaternion_wxyz();
        Sim3Dto {
            position: pose.translation.into(),
            rotation_wxyz: [w, x, y, z],
            scale: pose.scale,
        }
    }

    pub fn to_sim3(self, what: &str) -> Result<Sim3, IoError> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(IoError::Invalid(format!(
                "{what}: scale must be finite and positive, got {}",
                self.scale
            )));
        }
        Ok(Sim3 {
            rotation: rotation_from_wxyz(self.rotation_wxyz, what)?,
            translation: Vector3::from(self.position),
            scale: self.scale,
        })
    }
}

/// Validates the norm of stored coefficients and wraps them without
/// renormalizing, preserving their exact bit patterns.
fn rotation_from_wxyz(wxyz: [f64; 4], what: &str) -> Result<Rot3, IoError> {
    let [w, x, y, z] = wxyz;
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_TOLERANCE {
        return Err(IoError::Invalid(format!(
            "{what}: quaternion norm {norm} is not 1"
        )));
    }
    Ok(Rot3::from_quaternion_unchecked(w, x, y, z))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDto {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeDto {
    id: u64,
    #[serde(flatten)]
    pose: PoseDto,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapPointDto {
    id: u64,
    position: [f64; 3],
    reference_keyframe: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationDto {
    keyframe_id: u64,
    point_id: u64,
    pixel: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeoCorrespondenceDto {
    keyframe_id: u64,
    anchor_id: u64,
    map_pose: Sim3Dto,
    world_pose: PoseDto,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDto {
    schema: String,
    camera: CameraDto,
    keyframes: Vec<KeyframeDto>,
    map_points: Vec<MapPointDto>,
    observations: Vec<ObservationDto>,
    geo_correspondences: Vec<GeoCorrespondenceDto>,
    initialized: bool,
}

/// Used to read the schema tag up front, so version mismatches are
/// reported as such instead of as shape errors from the full decoder.
#[derive(Deserialize)]
struct SchemaProbe {
    schema: String,
}

/// Maps a serde_json failure to a located parse error, dropping the
/// location suffix serde_json embeds in its message (the location moves
/// into the structured fields).
fn json_error(err: &serde_json::Error) -> IoError {
    let message = err.to_string();
    let message = message
        .split(" at line ")
        .next()
        .unwrap_or(&message)
        .to_string();
    IoError::parse(err.line(), err.column(), message)
}

fn serialize_dto(scene: &Scene) -> SceneDto {
    SceneDto {
        schema: SCENE_SCHEMA.to_string(),
        camera: CameraDto {
            fx: scene.camera.fx,
            fy: scene.camera.fy,
            cx: scene.camera.cx,
            cy: scene.camera.cy,
        },
        keyframes: scene
            .keyframes
            .iter()
            .map(|(&id, pose)| KeyframeDto {
                id,
                pose: PoseDto::from_se3(pose),
            })
            .collect(),
        map_points: scene
            .map_points
            .iter()
            .map(|(&id, point)| MapPointDto {
                id,
                position: point.position.into(),
                reference_keyframe: point.reference_keyframe,
            })
            .collect(),
        observations: scene
            .observations
            .iter()
            .map(|obs| ObservationDto {
                keyframe_id: obs.keyframe_id,
                point_id: obs.point_id,
                pixel: [obs.pixel.x, obs.pixel.y],
            })
            .collect(),
        geo_correspondences: scene
            .geo_correspondences
            .iter()
            .map(|c| GeoCorrespondenceDto {
                keyframe_id: c.keyframe_id,
                anchor_id: c.anchor_id,
                map_pose: Sim3Dto::from_sim3(&c.map_pose),
                world_pose: PoseDto::from_se3(&c.world_pose),
            })
            .collect(),
        initialized: scene.initialized,
    }
}

/// Serializes a scene as pretty-printed JSON with a trailing newline.
pub fn serialize_scene(scene: &Scene) -> String {
    let mut text = serde_json::to_string_pretty(&serialize_dto(scene))
        .expect("scene serialization is infallible");
    text.push('\n');
    text
}

/// Parses a scene snapshot.
///
/// # Errors
///
/// [`IoError::Parse`] for malformed JSON or unexpected shape (located by
/// line and column), [`IoError::SchemaVersion`] for a foreign schema tag,
/// and [`IoError::Invalid`] for well-formed documents with inconsistent
/// content (duplicate ids, dangling references, non-unit quaternions).
pub fn parse_scene(text: &str) -> Result<Scene, IoError> {
    let probe: SchemaProbe = serde_json::from_str(text).map_err(|e| json_error(&e))?;
    if probe.schema != SCENE_SCHEMA {
        return Err(IoError::SchemaVersion {
            found: probe.schema,
            expected: SCENE_SCHEMA.to_string(),
        });
    }
    let dto: SceneDto = serde_json::from_str(text).map_err(|e| json_error(&e))?;

    let mut scene = Scene::new(Camera::new(
        dto.camera.fx,
        dto.camera.fy,
        dto.camera.cx,
        dto.camera.cy,
    ));
    for kf in &dto.keyframes {
        let pose = kf.pose.to_se3(&format!("keyframe {}", kf.id))?;
        if scene.keyframes.insert(kf.id, pose).is_some() {
            return Err(IoError::Invalid(format!("duplicate keyframe id {}", kf.id)));
        }
    }
    for point in &dto.map_points {
        if !scene.keyframes.contains_key(&point.reference_keyframe) {
            return Err(IoError::Invalid(format!(
                "map point {} references unknown keyframe {}",
                point.id, point.reference_keyframe
            )));
        }
        let entry = MapPoint {
            position: Vector3::from(point.position),
            reference_keyframe: point.reference_keyframe,
        };
        if scene.map_points.insert(point.id, entry).is_some() {
            return Err(IoError::Invalid(format!("duplicate map point id {}", point.id)));
        }
    }
    for (index, obs) in dto.observations.iter().enumerate() {
        if !scene.keyframes.contains_key(&obs.keyframe_id) {
            return Err(IoError::Invalid(format!(
                "observation {index} references unknown keyframe {}",
                obs.keyframe_id
            )));
        }
        if !scene.map_points.contains_key(&obs.point_id) {
            return Err(IoError::Invalid(format!(
                "observation {index} references unknown map point {}",
                obs.point_id
            )));
        }
        scene.observations.push(Observation {
            keyframe_id: obs.keyframe_id,
            point_id: obs.point_id,
            pixel: Vector2::new(obs.pixel[0], obs.pixel[1]),
        });
    }
    for c in &dto.geo_correspondences {
        if !scene.keyframes.contains_key(&c.keyframe_id) {
            return Err(IoError::Invalid(format!(
                "geo correspondence for anchor {} references unknown keyframe {}",
                c.anchor_id, c.keyframe_id
            )));
        }
        let what = format!("geo correspondence for anchor {}", c.anchor_id);
        // Rebuilt through the constructor so the derived position fields
        // stay in sync with the poses.
        scene.geo_correspondences.push(GeoCorrespondence::new(
            c.map_pose.to_sim3(&what)?,
            c.world_pose.to_se3(&what)?,
            c.keyframe_id,
            c.anchor_id,
        ));
    }
    scene.initialized = dto.initialized;
    Ok(scene)
}

/// Reads and parses a scene snapshot file.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure, otherwise as [`parse_scene`].
pub fn load_scene(path: &Path) -> Result<Scene, IoError> {
    parse_scene(&std::fs::read_to_string(path)?)
}

/// Writes a scene snapshot atomically.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure.
pub fn save_scene(path: &Path, scene: &Scene) -> Result<(), IoError> {
    super::write_atomic(path, serialize_scene(scene).as_bytes())
}
