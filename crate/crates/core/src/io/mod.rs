//! File formats, geodesy, and configuration.
//!
//! Everything that crosses a process boundary lives here: geo-tag
//! normalization ([`GeoAnchor`]), latitude/longitude ↔ UTM conversion
//! ([`geodesy`]), trajectory files, scene snapshots, the correspondence
//! stream, and flat key-value configuration. All writers go through
//! [`write_atomic`] (temp file + rename) so a crashed run never leaves a
//! half-written artifact behind.
//!
//! World-frame convention used throughout: x = easting, y = height above
//! the reference, z = northing, all in meters.

pub mod config;
pub mod geodesy;
pub mod scene_format;
pub mod stream;
pub mod trajectory;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::manifold::{Rot3, SE3};
use geodesy::{latlon_to_utm, utm_to_latlon, GeodesyError, UtmCoord};

/// Errors from parsing, serialization, and geodesy.
#[derive(Debug, Error)]
pub enum IoError {
    /// Underlying filesystem failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Malformed input, located by line and column (1-based).
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    /// The file declares a schema this build does not speak.
    #[error("schema version mismatch: found {found:?}, expected {expected:?}")]
    SchemaVersion { found: String, expected: String },
    /// The file parsed but describes inconsistent content (dangling
    /// references, non-unit quaternions, non-positive scales, …).
    #[error("invalid content: {0}")]
    Invalid(String),
    /// A geo anchor violates its shape invariant.
    #[error("geo anchor {id}: {message}")]
    Anchor { id: u64, message: String },
    /// Failure propagated from coordinate conversion.
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
}

impl IoError {
    /// Builds a located parse error.
    pub(crate) fn parse(line: usize, column: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            line,
            column,
            message: message.into(),
        }
    }
}

/// Writes a file atomically: the bytes land in a sibling temp file which
/// is then renamed over the target, so readers only ever observe the old
/// or the new content in full.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = file_name.to_owned();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(IoError::from)
}

/// One geo-tagged reference: a position on the Earth plus an optional
/// orientation, as delivered alongside a geo-referenced image.
///
/// On input exactly one of the two position encodings is present;
/// [`GeoAnchor::normalized`] fills in the other so downstream code can
/// rely on both. Heading is compass-like: a rotation about world +y,
/// with 0 facing north (+z) and π/2 facing east (+x). Pitch rotates
/// about +x and roll about +z, composed as `R_y(heading)·R_x(pitch)·
/// R_z(roll)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoAnchor {
    /// Identifier of the geo-tagged image this anchor belongs to.
    pub id: u64,
    /// WGS84 latitude/longitude in degrees.
    pub lat_lon: Option<(f64, f64)>,
    /// Planar position in a UTM zone.
    pub utm: Option<UtmCoord>,
    /// Height above the reference, meters.
    pub height: f64,
    /// Optional heading, radians.
    pub heading: Option<f64>,
    /// Optional pitch, radians.
    pub pitch: Option<f64>,
    /// Optional roll, radians.
    pub roll: Option<f64>,
}

impl GeoAnchor {
    /// Validates the exactly-one-encoding input invariant and fills in
    /// the missing position representation.
    ///
    /// # Errors
    ///
    /// [`IoError::Anchor`] when both or neither encoding is present;
    /// [`IoError::Geodesy`] when conversion fails.
    pub fn normalized(mut self) -> Result<GeoAnchor, IoError> {
        match (self.lat_lon, self.utm) {
            (Some((lat, lon)), None) => {
                self.utm = Some(latlon_to_utm(lat, lon)?);
                Ok(self)
            }
            (None, Some(utm)) => {
                self.lat_lon = Some(utm_to_latlon(&utm)?);
                Ok(self)
            }
            (Some(_), Some(_)) => Err(IoError::Anchor {
                id: self.id,
                message: "both lat/lon and UTM present on input; expected exactly one".into(),
            }),
            (None, None) => Err(IoError::Anchor {
                id: self.id,
                message: "neither lat/lon nor UTM present".into(),
            }),
        }
    }

    /// World-frame position (x = easting, y = height, z = northing).
    ///
    /// # Panics
    ///
    /// If the anchor has not been [`normalized`](Self::normalized).
    pub fn world_position(&self) -> Vector3<f64> {
        let utm = self.utm.expect("anchor must be normalized first");
        Vector3::new(utm.easting, self.height, utm.northing)
    }

    /// World-frame orientation from heading/pitch/roll (absent angles
    /// default to zero).
    pub fn world_rotation(&self) -> Rot3 {
        let heading = Rot3::from_axis_angle(&Vector3::y_axis(), self.heading.unwrap_or(0.0));
        let pitch = Rot3::from_axis_angle(&Vector3::x_axis(), self.pitch.unwrap_or(0.0));
        let roll = Rot3::from_axis_angle(&Vector3::z_axis(), self.roll.unwrap_or(0.0));
        heading.compose(&pitch).compose(&roll)
    }

    /// Full world-from-anchor pose.
    ///
    /// # Panics
    ///
    /// If the anchor has not been [`normalized`](Self::normalized).
    pub fn world_pose(&self) -> SE3 {
        SE3 {
            rotation: self.world_rotation(),
            translation: self.world_position(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare_anchor() -> GeoAnchor {
        GeoAnchor {
            id: 7,
            lat_lon: None,
            utm: None,
            height: 12.5,
            heading: None,
            pitch: None,
            roll: None,
        }
    }

    #[test]
    fn normalization_fills_the_missing_encoding() {
        let from_latlon = GeoAnchor {
            lat_lon: Some((48.85, 2.35)),
            ..bare_anchor()
        }
        .normalized()
        .unwrap();
        let utm = from_latlon.utm.unwrap();
        assert_eq!(utm, latlon_to_utm(48.85, 2.35).unwrap());

        let from_utm = GeoAnchor {
            utm: Some(utm),
            ..bare_anchor()
        }
        .normalized()
        .unwrap();
        let (lat, lon) = from_utm.lat_lon.unwrap();
        assert!((lat - 48.85).abs() < 1e-8);
        assert!((lon - 2.35).abs() < 1e-8);
    }

    #[test]
    fn normalization_rejects_malformed_shapes() {
        assert!(matches!(
            bare_anchor().normalized(),
            Err(IoError::Anchor { id: 7, .. })
        ));
        let both = GeoAnchor {
            lat_lon: Some((1.0, 2.0)),
            utm: Some(latlon_to_utm(1.0, 2.0).unwrap()),
            ..bare_anchor()
        };
        assert!(matches!(both.normalized(), Err(IoError::Anchor { .. })));
    }

    #[test]
    fn world_position_maps_easting_height_northing() {
        let anchor = GeoAnchor {
            utm: Some(UtmCoord {
                easting: 448_251.0,
                northing: 5_411_932.0,
                zone: 31,
                south: false,
            }),
            ..bare_anchor()
        };
        let p = anchor.world_position();
        assert_eq!(p.x, 448_251.0);
        assert_eq!(p.y, 12.5);
        assert_eq!(p.z, 5_411_932.0);
    }

    #[test]
    fn heading_rotates_north_toward_east() {
        let anchor = GeoAnchor {
            heading: Some(std::f64::consts::FRAC_PI_2),
            ..bare_anchor()
        };
        let facing = anchor.world_rotation().act(&Vector3::z());
        assert!((facing - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn atomic_write_replaces_content_and_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"first");
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        // Only the target file remains — no stray temp files.
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
