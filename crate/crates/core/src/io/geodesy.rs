//! Geodetic ↔ planar coordinate conversion.
//!
//! Geo-tags arrive as WGS84 latitude/longitude but the corrector works
//! in Universal Transverse Mercator coordinates, where easting and
//! northing are metric and compare directly against reconstructed
//! positions. The conversion is the transverse-Mercator mapping
//! evaluated with 6th-order Krüger series in the third flattening
//! `n = f/(2−f)`, accurate to well below a millimeter anywhere inside a
//! zone (and far beyond the 1 mm round-trip bound promised here).
//!
//! Conventions: latitude/longitude in degrees, easting/northing in
//! meters, zones numbered 1–60 each 6° wide, southern-hemisphere
//! northings offset by the usual 10 000 km false northing. The polar
//! caps (|lat| ≥ 84°) are outside the supported region.

use std::sync::LazyLock;

use thiserror::Error;

/// WGS84 ellipsoid semi-major axis, meters.
pub const WGS84_SEMI_MAJOR: f64 = 6_378_137.0;

/// WGS84 ellipsoid flattening.
pub const WGS84_FLATTENING: f64 = 1.0 / 298.257_223_563;

/// Central-meridian scale factor of the UTM mapping.
pub const UTM_SCALE: f64 = 0.9996;

/// Easting assigned to each zone's central meridian, meters.
pub const UTM_FALSE_EASTING: f64 = 500_000.0;

/// Northing offset applied in the southern hemisphere, meters.
pub const UTM_FALSE_NORTHING: f64 = 10_000_000.0;

/// Latitudes at or above this magnitude (degrees) are rejected.
pub const UTM_LATITUDE_LIMIT: f64 = 84.0;

/// Errors from coordinate conversion.
#[derive(Debug, Error)]
pub enum GeodesyError {
    /// The latitude falls in a polar cap the mapping does not cover.
    #[error("latitude {lat:.4}° lies in the polar region (|latitude| must stay below 84°)")]
    PolarRegion { lat: f64 },
    /// The zone number is outside 1..=60.
    #[error("UTM zone {zone} is outside 1..=60")]
    InvalidZone { zone: u8 },
    /// An input coordinate is NaN or infinite.
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
}

/// A position in one UTM zone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtmCoord {
    /// Distance east of the zone's false-easting origin, meters.
    pub easting: f64,
    /// Distance north of the equator (plus the false northing in the
    /// southern hemisphere), meters.
    pub northing: f64,
    /// Zone number, 1..=60.
    pub zone: u8,
    /// Whether the false-northing offset of the southern hemisphere
    /// applies.
    pub south: bool,
}

/// Precomputed series coefficients for one ellipsoid.
struct Projection {
    /// First eccentricity `sqrt(f·(2−f))`.
    e: f64,
    /// Rectifying radius: the radius of the circle whose quarter arc
    /// equals the ellipsoid's quarter meridian.
    radius: f64,
    /// Forward (conformal → rectifying) series coefficients.
    alpha: [f64; 6],
    /// Reverse (rectifying → conformal) series coefficients.
    beta: [f64; 6],
}

impl Projection {
    fn new(a: f64, f: f64) -> Self {
        let n = f / (2.0 - f);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;
        let radius = a / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
                + 7891.0 * n6 / 37800.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
                - 1_983_433.0 * n6 / 1_935_360.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0
                + 15061.0 * n5 / 26880.0
                + 167_603.0 * n6 / 181_440.0,
            49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
            34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
            212_378_941.0 * n6 / 319_334_400.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
                + 96199.0 * n6 / 604_800.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
                - 1_118_711.0 * n6 / 3_870_720.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
            4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
            4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
            20_648_693.0 * n6 / 638_668_800.0,
        ];
        Projection {
            e: (f * (2.0 - f)).sqrt(),
            radius,
            alpha,
            beta,
        }
    }
}

static WGS84: LazyLock<Projection> =
    LazyLock::new(|| Projection::new(WGS84_SEMI_MAJOR, WGS84_FLATTENING));

/// Wraps a longitude in degrees into [−180, 180).
fn wrap_longitude(lon: f64) -> f64 {
    lon - 360.0 * ((lon + 180.0) / 360.0).floor()
}

/// The standard zone containing a longitude (degrees).
pub fn utm_zone(lon: f64) -> u8 {
    let z = ((wrap_longitude(lon) + 180.0) / 6.0).floor() as i64 + 1;
    z.clamp(1, 60) as u8
}

/// The central meridian of a zone, degrees.
pub fn zone_central_meridian(zone: u8) -> f64 {
    f64::from(zone) * 6.0 - 183.0
}

/// Converts WGS84 latitude/longitude (degrees) into UTM coordinates in
/// the longitude's standard zone.
///
/// # Errors
///
/// [`GeodesyError::PolarRegion`] for |lat| ≥ 84° and
/// [`GeodesyError::NonFinite`] for NaN or infinite inputs.
pub fn latlon_to_utm(lat: f64, lon: f64) -> Result<UtmCoord, GeodesyError> {
    if !lon.is_finite() {
        return Err(GeodesyError::NonFinite { what: "longitude" });
    }
    latlon_to_utm_in_zone(lat, lon, utm_zone(lon))
}

/// Converts latitude/longitude (degrees) into a caller-chosen zone.
///
/// Useful near zone boundaries, where a trajectory should stay in one
/// plane rather than jump between adjacent zones. Accuracy degrades
/// gracefully with distance from the zone's central meridian.
///
/// # Errors
///
/// As [`latlon_to_utm`], plus [`GeodesyError::InvalidZone`].
pub fn latlon_to_utm_in_zone(lat: f64, lon: f64, zone: u8) -> Result<UtmCoord, GeodesyError> {
    if !lat.is_finite() {
        return Err(GeodesyError::NonFinite { what: "latitude" });
    }
    if !lon.is_finite() {
        return Err(GeodesyError::NonFinite { what: "longitude" });
    }
    if !(1..=60).contains(&zone) {
        return Err(GeodesyError::InvalidZone { zone });
    }
    if lat.abs() >= UTM_LATITUDE_LIMIT {
        return Err(GeodesyError::PolarRegion { lat });
    }
    let proj = &*WGS84;
    let phi = lat.to_radians();
    let dlon = (lon - zone_central_meridian(zone)).to_radians();

    // Conformal latitude, represented through t = tan(conformal lat):
    // the Gauss–Schreiber coordinates (ξ', η') are the spherical
    // transverse-Mercator image of the conformally shifted latitude.
    let s = phi.sin();
    let t = (s.atanh() - proj.e * (proj.e * s).atanh()).sinh();
    let xi_p = t.atan2(dlon.cos());
    let eta_p = (dlon.sin() / (1.0 + t * t).sqrt()).atanh();

    // Krüger series: map Gauss–Schreiber to rectifying coordinates.
    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, &a) in proj.alpha.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }

    let south = lat < 0.0;
    let northing = UTM_SCALE * proj.radius * xi + if south { UTM_FALSE_NORTHING } else { 0.0 };
    Ok(UtmCoord {
        easting: UTM_FALSE_EASTING + UTM_SCALE * proj.radius * eta,
        northing,
        zone,
        south,
    })
}

/// Converts UTM coordinates back to WGS84 latitude/longitude (degrees).
///
/// # Errors
///
/// [`GeodesyError::InvalidZone`] for zones outside 1..=60,
/// [`GeodesyError::NonFinite`] for NaN or infinite coordinates, and
/// [`GeodesyError::PolarRegion`] when the position decodes past the
/// supported latitude band.
pub fn utm_to_latlon(utm: &UtmCoord) -> Result<(f64, f64), GeodesyError> {
    if !utm.easting.is_finite() {
        return Err(GeodesyError::NonFinite { what: "easting" });
    }
    if !utm.northing.is_finite() {
        return Err(GeodesyError::NonFinite { what: "northing" });
    }
    if !(1..=60).contains(&utm.zone) {
        return Err(GeodesyError::InvalidZone { zone: utm.zone });
    }
    let proj = &*WGS84;
    let scaled = UTM_SCALE * proj.radius;
    let xi = (utm.northing - if utm.south { UTM_FALSE_NORTHING } else { 0.0 }) / scaled;
    let eta = (utm.easting - UTM_FALSE_EASTING) / scaled;

    // Reverse Krüger series: rectifying back to Gauss–Schreiber.
    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, &b) in proj.beta.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }

    let tau_p = xi_p.sin() / (eta_p.sinh().powi(2) + xi_p.cos().powi(2)).sqrt();
    let dlon = eta_p.sinh().atan2(xi_p.cos());

    // Newton inversion of the conformal-latitude map: solve for
    // τ = tanφ such that τ'(τ) matches the decoded conformal tangent.
    let e = proj.e;
    let e2 = e * e;
    let mut tau = tau_p / (1.0 - e2);
    for _ in 0..12 {
        let sigma = (e * (e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
        let f = tau * (1.0 + sigma * sigma).sqrt() - sigma * (1.0 + tau * tau).sqrt() - tau_p;
        if f.abs() <= 1e-14 * (1.0 + tau_p.abs()) {
            break;
        }
        let df = ((1.0 + sigma * sigma).sqrt() * (1.0 + tau * tau).sqrt() - sigma * tau)
            * (1.0 - e2)
            * (1.0 + tau * tau).sqrt()
            / (1.0 + (1.0 - e2) * tau * tau);
        tau -= f / df;
    }

    let lat = tau.atan().to_degrees();
    let lon = zone_central_meridian(utm.zone) + dlon.to_degrees();
    if lat.abs() >= UTM_LATITUDE_LIMIT {
        return Err(GeodesyError::PolarRegion { lat });
    }
    Ok((lat, wrap_longitude(lon)))
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Meridian curvature radius M(φ) = a(1−e²)/(1−e²sin²φ)^{3/2}.
    fn meridian_curvature(phi: f64) -> f64 {
        let e2 = WGS84_FLATTENING * (2.0 - WGS84_FLATTENING);
        WGS84_SEMI_MAJOR * (1.0 - e2) / (1.0 - e2 * phi.sin().powi(2)).powf(1.5)
    }

    /// Prime-vertical curvature radius N(φ) = a/sqrt(1−e²sin²φ).
    fn prime_vertical(phi: f64) -> f64 {
        let e2 = WGS84_FLATTENING * (2.0 - WGS84_FLATTENING);
        WGS84_SEMI_MAJOR / (1.0 - e2 * phi.sin().powi(2)).sqrt()
    }

    /// Adaptive Simpson quadrature, recursing until the local Richardson
    /// estimate of the error drops below `tol`.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                recurse(f, a, m, left, 0.5 * tol, depth - 1)
                    + recurse(f, m, b, right, 0.5 * tol, depth - 1)
            }
        }
        recurse(f, a, b, simpson(f, a, b), tol, 40)
    }

    #[test]
    fn zone_origin_is_definitional() {
        for zone in [1u8, 31, 60] {
            let utm = latlon_to_utm(0.0, zone_central_meridian(zone)).unwrap();
            assert!((utm.easting - UTM_FALSE_EASTING).abs() < 1e-9);
            assert!(utm.northing.abs() < 1e-9);
            assert_eq!(utm.zone, zone);
            assert!(!utm.south);
        }
    }

    #[test]
    fn zone_selection_matches_six_degree_bands() {
        assert_eq!(utm_zone(-180.0), 1);
        assert_eq!(utm_zone(-174.001), 1);
        assert_eq!(utm_zone(-174.0), 2);
        assert_eq!(utm_zone(0.0), 31);
        assert_eq!(utm_zone(5.999), 31);
        assert_eq!(utm_zone(6.0), 32);
        assert_eq!(utm_zone(179.999), 60);
        assert_eq!(utm_zone(180.0), 1); // wraps to −180
        assert_eq!(zone_central_meridian(31), 3.0);
        assert_eq!(zone_central_meridian(1), -177.0);
        assert_eq!(zone_central_meridian(60), 177.0);
    }

    // Independent oracle #1: on the central meridian the mapping is, by
    // definition, the scaled meridian arc length — an integral this test
    // evaluates by adaptive quadrature without touching any series.
    #[test]
    fn central_meridian_northing_matches_arc_quadrature() {
        for lat in [-60.0, -10.0, 12.25, 23.5, 45.0, 60.0, 83.9] {
            let phi: f64 = lat;
            let arc = adaptive_simpson(
                &meridian_curvature,
                0.0,
                phi.to_radians(),
                1e-9,
            );
            let expected =
                UTM_SCALE * arc + if lat < 0.0 { UTM_FALSE_NORTHING } else { 0.0 };
            let utm = latlon_to_utm(lat, 3.0).unwrap();
            assert_eq!(utm.zone, 31);
            assert!(
                (utm.northing - expected).abs() < 1e-5,
                "lat {lat}: northing {} vs arc {expected}",
                utm.northing
            );
            assert!((utm.easting - UTM_FALSE_EASTING).abs() < 1e-9);
        }
    }

    // Independent oracle #2: the mapping is conformal with scale factor
    // exactly UTM_SCALE on the central meridian, so a small longitude
    // offset δλ must move the easting by UTM_SCALE·N(φ)·cosφ·δλ with an
    // O(δλ³) remainder — about a micrometer here, far under tolerance.
    #[test]
    fn small_longitude_offset_matches_parallel_circle() {
        let dlon = 1e-4; // radians
        for lat in [0.0, 30.0, 60.0] {
            let phi = (lat as f64).to_radians();
            let expected = UTM_SCALE * prime_vertical(phi) * phi.cos() * dlon;
            let utm = latlon_to_utm(lat, 3.0 + dlon.to_degrees()).unwrap();
            assert!(
                (utm.easting - UTM_FALSE_EASTING - expected).abs() < 1e-3,
                "lat {lat}: offset {} vs differential {expected}",
                utm.easting - UTM_FALSE_EASTING
            );
        }
    }

    #[test]
    fn round_trip_is_far_below_a_millimeter() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let lat = rng.random_range(-80.0..83.9);
            let lon = rng.random_range(-180.0..180.0);
            let utm = latlon_to_utm(lat, lon).unwrap();
            let (lat2, lon2) = utm_to_latlon(&utm).unwrap();
            // Convert the angular discrepancy into meters on the ground.
            let phi = lat.to_radians();
            let d_north = (lat2 - lat).to_radians() * meridian_curvature(phi);
            let d_east = (lon2 - lon).to_radians() * prime_vertical(phi) * phi.cos();
            worst = worst.max(d_north.hypot(d_east));

            let again = latlon_to_utm_in_zone(lat2, lon2, utm.zone).unwrap();
            worst = worst
                .max((again.easting - utm.easting).hypot(again.northing - utm.northing));
        }
        assert!(worst < 1e-3, "worst round-trip error {worst} m");
    }

    #[test]
    fn hemispheres_mirror_through_the_false_northing() {
        for (lat, lon) in [(12.5, 7.3), (47.1, -122.4), (68.0, 151.2)] {
            let north = latlon_to_utm(lat, lon).unwrap();
            let south = latlon_to_utm(-lat, lon).unwrap();
            assert!(!north.south);
            assert!(south.south);
            assert!((north.easting - south.easting).abs() < 1e-9);
            assert!((south.northing - (UTM_FALSE_NORTHING - north.northing)).abs() < 1e-6);
            let (lat2, _) = utm_to_latlon(&south).unwrap();
            assert!((lat2 + lat).abs() < 1e-9);
        }
    }

    #[test]
    fn longitudes_mirror_about_the_central_meridian() {
        for offset in [0.4, 1.7, 2.9] {
            let east = latlon_to_utm(35.0, 3.0 + offset).unwrap();
            let west = latlon_to_utm(35.0, 3.0 - offset).unwrap();
            assert!((east.northing - west.northing).abs() < 1e-6);
            assert!(
                ((east.easting - UTM_FALSE_EASTING) + (west.easting - UTM_FALSE_EASTING)).abs()
                    < 1e-6
            );
        }
    }

    #[test]
    fn forced_zone_round_trips_across_the_boundary() {
        // Longitude 5.9° belongs to zone 31 but is representable in
        // zone 32 (central meridian 9°).
        let forced = latlon_to_utm_in_zone(45.0, 5.9, 32).unwrap();
        assert!(forced.easting < UTM_FALSE_EASTING);
        let (lat, lon) = utm_to_latlon(&forced).unwrap();
        assert!((lat - 45.0).abs() < 1e-9);
        assert!((lon - 5.9).abs() < 1e-9);
    }

    #[test]
    fn polar_and_malformed_inputs_are_rejected() {
        assert!(matches!(
            latlon_to_utm(84.0, 10.0),
            Err(GeodesyError::PolarRegion { .. })
        ));
        assert!(matches!(
            latlon_to_utm(-84.01, 10.0),
            Err(GeodesyError::PolarRegion { .. })
        ));
        assert!(matches!(
            latlon_to_utm(f64::NAN, 10.0),
            Err(GeodesyError::NonFinite { .. })
        ));
        assert!(matches!(
            latlon_to_utm(10.0, f64::INFINITY),
            Err(GeodesyError::NonFinite { .. })
        ));
        assert!(matches!(
            latlon_to_utm_in_zone(10.0, 10.0, 0),
            Err(GeodesyError::InvalidZone { zone: 0 })
        ));
        assert!(matches!(
            utm_to_latlon(&UtmCoord {
                easting: 500_000.0,
                northing: 0.0,
                zone: 61,
                south: false
            }),
            Err(GeodesyError::InvalidZone { zone: 61 })
        ));
        assert!(matches!(
            utm_to_latlon(&UtmCoord {
                easting: f64::NAN,
                northing: 0.0,
                zone: 31,
                south: false
            }),
            Err(GeodesyError::NonFinite { .. })
        ));
    }
}
