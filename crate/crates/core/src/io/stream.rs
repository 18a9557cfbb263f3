//! JSONL keyframe stream: the on-disk form of the incremental input fed
//! to [`Pipeline::ingest_keyframe`](crate::pipeline::Pipeline).
//!
//! Line 1 is a header object carrying the schema tag
//! (`geodrift/stream@1`); every following line is one keyframe record.
//! The line-oriented layout means a stream can be produced and consumed
//! incrementally and truncation is detected at the line where it
//! happens. Floats round-trip bit for bit, as in the scene snapshot.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::scene_format::PoseDto;
use super::{GeoAnchor, IoError};
use crate::ba::{Camera, Observation};
use crate::io::geodesy::UtmCoord;
use crate::pipeline::{GeoInput, KeyframeInput};
use crate::pnp::MapGeoMatches;

/// Schema tag accepted and emitted by this build.
pub const STREAM_SCHEMA: &str = "geodrift/stream@1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderDto {
    schema: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewPointDto {
    id: u64,
    position: [f64; 3],
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
struct CameraDto {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtmDto {
    easting: f64,
    northing: f64,
    zone: u8,
    south: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorDto {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat_lon: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    utm: Option<UtmDto>,
    height: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    heading: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pitch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    roll: Option<f64>,
}

impl AnchorDto {
    /// Writes exactly one positional encoding: the UTM one when present
    /// (the working representation), otherwise lat/lon. A normalized
    /// anchor carries both, and persisting both would make the file
    /// fail its own exactly-one validation on the next load.
    fn from_anchor(anchor: &GeoAnchor) -> AnchorDto {
        AnchorDto {
            id: anchor.id,
            lat_lon: if anchor.utm.is_some() { None } else { anchor.lat_lon },
            utm: anchor.utm.map(|u| UtmDto {
                easting: u.easting,
                northing: u.northing,
                zone: u.zone,
                south: u.south,
            }),
            height: anchor.height,
            heading: anchor.heading,
            pitch: anchor.pitch,
            roll: anchor.roll,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeoDto {
    geo_image_id: u64,
    camera: CameraDto,
    /// `(map point id, pixel x, pixel y)` triples.
    matches: Vec<(u64, f64, f64)>,
    anchor: AnchorDto,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeRecordDto {
    id: u64,
    #[serde(flatten)]
    pose: PoseDto,
    new_points: Vec<NewPointDto>,
    observations: Vec<ObservationDto>,
    #[serde(skip_serializing_if = "Option::is_none")]
    geo: Option<GeoDto>,
}

/// Lifts a serde_json failure onto the file's line numbering.
fn json_error(err: &serde_json::Error, file_line: usize) -> IoError {
    let message = err.to_string();
    let message = message
        .split(" at line ")
        .next()
        .unwrap_or(&message)
        .to_string();
    // Records are single lines, so the error's own line index is 1 and
    // only its column carries information.
    IoError::parse(file_line, err.column(), message)
}

fn record_from_input(input: &KeyframeInput) -> KeyframeRecordDto {
    KeyframeRecordDto {
        id: input.id,
        pose: PoseDto::from_se3(&input.pose),
        new_points: input
            .new_points
            .iter()
            .map(|&(id, position)| NewPointDto {
                id,
                position: position.into(),
            })
            .collect(),
        observations: input
            .observations
            .iter()
            .map(|obs| ObservationDto {
                keyframe_id: obs.keyframe_id,
                point_id: obs.point_id,
                pixel: [obs.pixel.x, obs.pixel.y],
            })
            .collect(),
        geo: input.geo.as_ref().map(|geo| GeoDto {
            geo_image_id: geo.matches.geo_image_id,
            camera: CameraDto {
                fx: geo.matches.camera.fx,
                fy: geo.matches.camera.fy,
                cx: geo.matches.camera.cx,
                cy: geo.matches.camera.cy,
            },
            matches: geo
                .matches
                .matches
                .iter()
                .map(|&(id, pixel)| (id, pixel.x, pixel.y))
                .collect(),
            anchor: AnchorDto::from_anchor(&geo.anchor),
        }),
    }
}

fn input_from_record(record: KeyframeRecordDto, file_line: usize) -> Result<KeyframeInput, IoError> {
    let what = format!("keyframe {}", record.id);
    let pose = record.pose.to_se3(&what)?;
    let geo = match record.geo {
        None => None,
        Some(geo) => {
            let anchor = GeoAnchor {
                id: geo.anchor.id,
                lat_lon: geo.anchor.lat_lon,
                utm: geo.anchor.utm.map(|u| UtmCoord {
                    easting: u.easting,
                    northing: u.northing,
                    zone: u.zone,
                    south: u.south,
                }),
                height: geo.anchor.height,
                heading: geo.anchor.heading,
                pitch: geo.anchor.pitch,
                roll: geo.anchor.roll,
            };
            // Normalizing here surfaces ill-formed anchors (both or
            // neither encoding present) at load time, with the line.
            let anchor = anchor.normalized().map_err(|err| {
                IoError::parse(file_line, 1, err.to_string())
            })?;
            Some(GeoInput {
                matches: MapGeoMatches {
                    geo_image_id: geo.geo_image_id,
                    camera: Camera::new(
                        geo.camera.fx,
                        geo.camera.fy,
                        geo.camera.cx,
                        geo.camera.cy,
                    ),
                    matches: geo
                        .matches
                        .into_iter()
                        .map(|(id, x, y)| (id, Vector2::new(x, y)))
                        .collect(),
                },
                anchor,
            })
        }
    };
    Ok(KeyframeInput {
        id: record.id,
        pose,
        new_points: record
            .new_points
            .into_iter()
            .map(|p| (p.id, Vector3::from(p.position)))
            .collect(),
        observations: record
            .observations
            .into_iter()
            .map(|obs| Observation {
                keyframe_id: obs.keyframe_id,
                point_id: obs.point_id,
                pixel: Vector2::new(obs.pixel[0], obs.pixel[1]),
            })
            .collect(),
        geo,
    })
}

/// Serializes a keyframe stream: header line, then one compact JSON
/// object per keyframe.
pub fn serialize_stream(inputs: &[KeyframeInput]) -> String {
    let header = HeaderDto {
        schema: STREAM_SCHEMA.to_string(),
    };
    let mut out = serde_json::to_string(&header).expect("header serialization is infallible");
    out.push('\n');
    for input in inputs {
        out.push_str(
            &serde_json::to_string(&record_from_input(input))
                .expect("record serialization is infallible"),
        );
        out.push('\n');
    }
    out
}

/// Parses a keyframe stream.
///
/// # Errors
///
/// [`IoError::Parse`] locating the malformed line (a missing header
/// counts as line 1), [`IoError::SchemaVersion`] for a foreign header
/// tag, and [`IoError::Invalid`] for inconsistent record content.
pub fn parse_stream(text: &str) -> Result<Vec<KeyframeInput>, IoError> {
    let mut lines = text.lines().enumerate();
    let header_line = loop {
        match lines.next() {
            Some((_, line)) if line.trim().is_empty() => continue,
            Some((index, line)) => break (index + 1, line),
            None => {
                return Err(IoError::parse(1, 1, "stream is empty, expected a header line"))
            }
        }
    };
    let header: HeaderDto =
        serde_json::from_str(header_line.1).map_err(|e| json_error(&e, header_line.0))?;
    if header.schema != STREAM_SCHEMA {
        return Err(IoError::SchemaVersion {
            found: header.schema,
            expected: STREAM_SCHEMA.to_string(),
        });
    }
    let mut inputs = Vec::new();
    for (index, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let file_line = index + 1;
        let record: KeyframeRecordDto =
            serde_json::from_str(line).map_err(|e| json_error(&e, file_line))?;
        inputs.push(input_from_record(record, file_line)?);
    }
    Ok(inputs)
}

/// Reads and parses a keyframe stream file.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure, otherwise as [`parse_stream`].
pub fn load_stream(path: &Path) -> Result<Vec<KeyframeInput>, IoError> {
    parse_stream(&std::fs::read_to_string(path)?)
}

/// Writes a keyframe stream atomically.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure.
pub fn save_stream(path: &Path, inputs: &[KeyframeInput]) -> Result<(), IoError> {
    super::write_atomic(path, serialize_stream(inputs).as_bytes())
}
