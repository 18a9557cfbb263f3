//! Trajectory files in the two common plain-text layouts.
//!
//! - **KITTI odometry**: twelve space-separated floats per line, the
//!   row-major upper 3×4 of the world-from-camera pose matrix. No ids or
//!   timestamps; records are identified by line order.
//! - **TUM**: eight fields per line, `timestamp tx ty tz qx qy qz qw`.
//!
//! The format is detected from the field count of the first data line.
//! Blank lines and `#` comments are ignored. Values are written with
//! Rust's shortest-round-trip float formatting, so parse → serialize →
//! parse is lossless; the pose round-trip through the quaternion
//! conversion is exact to well below 1e-9.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::IoError;
use crate::manifold::{Rot3, SE3};

/// How a trajectory file lays out its records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// 3×4 row-major pose matrix, twelve floats per line.
    Kitti,
    /// `timestamp tx ty tz qx qy qz qw`.
    Tum,
}

impl TrajectoryFormat {
    fn field_count(self) -> usize {
        match self {
            TrajectoryFormat::Kitti => 12,
            TrajectoryFormat::Tum => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TrajectoryFormat::Kitti => "KITTI",
            TrajectoryFormat::Tum => "TUM",
        }
    }
}

/// One trajectory entry. Neither format carries explicit ids, so `id` is
/// the zero-based record index; files being compared must therefore list
/// corresponding poses in the same order (the usual odometry convention).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// Zero-based record index.
    pub id: u64,
    /// Present for TUM records, absent for KITTI.
    pub timestamp: Option<f64>,
    /// World-from-camera pose.
    pub pose: SE3,
}

/// An ordered pose list with its on-disk layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub format: TrajectoryFormat,
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    /// Builds a trajectory from `(id, pose)` pairs. Records are written
    /// in iteration order; for TUM output the id doubles as the
    /// timestamp (the formats carry no separate id field).
    pub fn from_poses(
        format: TrajectoryFormat,
        poses: impl IntoIterator<Item = (u64, SE3)>,
    ) -> Trajectory {
        let records = poses
            .into_iter()
            .map(|(id, pose)| TrajectoryRecord {
                id,
                timestamp: match format {
                    TrajectoryFormat::Kitti => None,
                    TrajectoryFormat::Tum => Some(id as f64),
                },
                pose,
            })
            .collect();
        Trajectory { format, records }
    }

    /// Camera positions keyed by record id, the shape the trajectory
    /// metrics consume.
    pub fn positions(&self) -> BTreeMap<u64, Vector3<f64>> {
        self.records
            .iter()
            .map(|r| (r.id, r.pose.translation))
            .collect()
    }

    /// Poses keyed by record id.
    pub fn poses(&self) -> BTreeMap<u64, SE3> {
        self.records.iter().map(|r| (r.id, r.pose)).collect()
    }
}

/// Splits a line into `(1-based byte column, token)` pairs.
fn fields(line: &str) -> Vec<(usize, &str)> {
    let bytes = line.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        out.push((start + 1, &line[start..i]));
    }
    out
}

fn parse_float(token: &str, line: usize, column: usize) -> Result<f64, IoError> {
    let value: f64 = token
        .parse()
        .map_err(|_| IoError::parse(line, column, format!("expected a number, got `{token}`")))?;
    if !value.is_finite() {
        return Err(IoError::parse(
            line,
            column,
            format!("non-finite value `{token}`"),
        ));
    }
    Ok(value)
}

/// How far a parsed rotation block may deviate from orthonormality.
const ROTATION_TOLERANCE: f64 = 1e-6;

/// Parses trajectory text, detecting the layout from the first data
/// line's field count.
///
/// # Errors
///
/// [`IoError::Parse`] locating the offending line and column: unknown
/// field counts, non-numeric or non-finite values, rotation blocks that
/// are not orthonormal, and zero-length quaternions.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, IoError> {
    let mut format: Option<TrajectoryFormat> = None;
    let mut records = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens = fields(line);
        let detected = match format {
            Some(f) => f,
            None => {
                let f = match tokens.len() {
                    12 => TrajectoryFormat::Kitti,
                    8 => TrajectoryFormat::Tum,
                    n => {
                        return Err(IoError::parse(
                            line_no,
                            1,
                            format!("expected 12 (KITTI) or 8 (TUM) fields, got {n}"),
                        ))
                    }
                };
                format = Some(f);
                f
            }
        };
        if tokens.len() != detected.field_count() {
            return Err(IoError::parse(
                line_no,
                1,
                format!(
                    "expected {} fields ({} format), got {}",
                    detected.field_count(),
                    detected.name(),
                    tokens.len()
                ),
            ));
        }
        let mut values = [0.0f64; 12];
        for (v, &(column, token)) in values.iter_mut().zip(&tokens) {
            *v = parse_float(token, line_no, column)?;
        }
        let record = match detected {
            TrajectoryFormat::Kitti => {
                // Row-major 3×4: three rotation entries then the
                // translation component, per row.
                let m = Matrix3::new(
                    values[0], values[1], values[2], values[4], values[5], values[6], values[8],
                    values[9], values[10],
                );
                let orthonormality = (m.transpose() * m - Matrix3::identity()).norm();
                if orthonormality > ROTATION_TOLERANCE || m.determinant() < 0.0 {
                    return Err(IoError::parse(
                        line_no,
                        tokens[0].0,
                        format!(
                            "rotation block is not orthonormal (error {orthonormality:.2e})"
                        ),
                    ));
                }
                TrajectoryRecord {
                    id: records.len() as u64,
                    timestamp: None,
                    pose: SE3 {
                        rotation: Rot3::from_matrix(&m),
                        translation: Vector3::new(values[3], values[7], values[11]),
                    },
                }
            }
            TrajectoryFormat::Tum => {
                let (qx, qy, qz, qw) = (values[4], values[5], values[6], values[7]);
                let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
                if norm < 1e-6 {
                    return Err(IoError::parse(
                        line_no,
                        tokens[4].0,
                        "quaternion has (near-)zero norm".to_string(),
                    ));
                }
                TrajectoryRecord {
                    id: records.len() as u64,
                    timestamp: Some(values[0]),
                    pose: SE3 {
                        rotation: Rot3::from_quaternion(qw, qx, qy, qz),
                        translation: Vector3::new(values[1], values[2], values[3]),
                    },
                }
            }
        };
        records.push(record);
    }
    let format = format.ok_or_else(|| {
        IoError::parse(1, 1, "trajectory file contains no data lines".to_string())
    })?;
    Ok(Trajectory { format, records })
}

/// Serializes a trajectory in its layout. Floats are written in
/// shortest-round-trip form, so re-parsing recovers them exactly.
pub fn serialize_trajectory(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for record in &trajectory.records {
        match trajectory.format {
            TrajectoryFormat::Kitti => {
                let m = record.pose.rotation.matrix();
                let t = record.pose.translation;
                for row in 0..3 {
                    if row > 0 {
                        out.push(' ');
                    }
                    out.push_str(&format!(
                        "{} {} {} {}",
                        m[(row, 0)],
                        m[(row, 1)],
                        m[(row, 2)],
                        t[row]
                    ));
                }
            }
            TrajectoryFormat::Tum => {
                let t = record.pose.translation;
                let (w, x, y, z) = record.pose.rotation.quaternion_wxyz();
                out.push_str(&format!(
                    "{} {} {} {} {} {} {} {}",
                    record.timestamp.unwrap_or(record.id as f64),
                    t.x,
                    t.y,
                    t.z,
                    x,
                    y,
                    z,
                    w
                ));
            }
        }
        out.push('\n');
    }
    out
}

/// Reads and parses a trajectory file.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure and [`IoError::Parse`] on
/// malformed content.
pub fn load_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

/// Writes a trajectory file atomically.
///
/// # Errors
///
/// [`IoError::Io`] on filesystem failure.
pub fn save_trajectory(path: &Path, trajectory: &Trajectory) -> Result<(), IoError> {
    super::write_atomic(path, serialize_trajectory(trajectory).as_bytes())
}
