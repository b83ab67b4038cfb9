//! Coordinate frames, rotations, elevation/azimuth geometry, and the
//! Earth-rotation (Sagnac) correction.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::constants::{OMEGA_EARTH, WGS84_A, WGS84_E2};

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    /// Position too close to the Earth's center for a geodetic conversion.
    #[error("position within {0} m of Earth center; geodetic conversion undefined")]
    NearSingular(f64),
    /// Receiver and source are effectively co-located.
    #[error("source within 1 m of receiver; line of sight undefined")]
    DegenerateGeometry,
    /// Signal propagation time outside [0, 1) s.
    #[error("invalid propagation time {0} s (must be in [0, 1))")]
    InvalidPropagationTime(f64),
}

/// Position in the Earth-centered Earth-fixed frame, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPosition {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    pub fn distance_to(&self, other: &EcefPosition) -> f64 {
        (self.as_vector() - other.as_vector()).norm()
    }
}

/// Geodetic position on the WGS-84 ellipsoid.
///
/// Latitude in [-pi/2, pi/2], longitude in (-pi, pi], height in meters
/// above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticPosition {
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
}

impl GeodeticPosition {
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Self {
        Self { latitude, longitude, height }
    }

    /// Convenience constructor from degrees.
    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }
}

/// A proper 3x3 rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix3(pub Matrix3<f64>);

impl RotationMatrix3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// WGS-84 geodetic to ECEF, closed form.
pub fn geodetic_to_ecef(g: &GeodeticPosition) -> EcefPosition {
    let (sin_lat, cos_lat) = g.latitude.sin_cos();
    let (sin_lon, cos_lon) = g.longitude.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    EcefPosition::new(
        (n + g.height) * cos_lat * cos_lon,
        (n + g.height) * cos_lat * sin_lon,
        (n * (1.0 - WGS84_E2) + g.height) * sin_lat,
    )
}

/// ECEF to WGS-84 geodetic by fixed-point iteration on the latitude.
///
/// Converges well past 1e-9 m round-trip accuracy for heights up to
/// geostationary range.
pub fn ecef_to_geodetic(p: &EcefPosition) -> Result<GeodeticPosition, FrameError> {
    let r = p.norm();
    if r <= 1.0 {
        return Err(FrameError::NearSingular(1.0));
    }
    let rho = p.x.hypot(p.y);
    let mut lon = p.y.atan2(p.x);
    if lon <= -PI {
        lon = PI;
    }
    let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
    let mut n = WGS84_A;
    for _ in 0..12 {
        let sin_lat = lat.sin();
        n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        lat = (p.z + WGS84_E2 * n * sin_lat).atan2(rho);
    }
    let sin_lat = lat.sin();
    let cos_lat = lat.cos();
    let height = if cos_lat.abs() > 1e-8 {
        rho / cos_lat - n
    } else {
        p.z / sin_lat - n * (1.0 - WGS84_E2)
    };
    Ok(GeodeticPosition::new(lat, lon, height))
}

/// Rotation from ECEF into the local horizontal frame at `g`.
///
/// Rows are the local east, north, and up unit vectors expressed in ECEF.
pub fn ned_rotation(g: &GeodeticPosition) -> RotationMatrix3 {
    let (sin_lat, cos_lat) = g.latitude.sin_cos();
    let (sin_lon, cos_lon) = g.longitude.sin_cos();
    RotationMatrix3(Matrix3::new(
        -sin_lon,
        cos_lon,
        0.0,
        -cos_lon * sin_lat,
        -sin_lon * sin_lat,
        cos_lat,
        cos_lon * cos_lat,
        sin_lon * cos_lat,
        sin_lat,
    ))
}

/// Elevation and azimuth of `source` as seen from `receiver`.
///
/// Azimuth is clockwise from north in (-pi, pi]; at zenith (elevation
/// within 1e-9 of 90 degrees) azimuth is 0 by convention.
pub fn elevation_azimuth(
    receiver: &EcefPosition,
    source: &EcefPosition,
) -> Result<(f64, f64), FrameError> {
    let los = source.as_vector() - receiver.as_vector();
    let range = los.norm();
    if range < 1.0 {
        return Err(FrameError::DegenerateGeometry);
    }
    let g = ecef_to_geodetic(receiver)?;
    let enu = ned_rotation(&g).apply(&los);
    let elevation = (enu.z / range).clamp(-1.0, 1.0).asin();
    if (elevation - FRAC_PI_2).abs() < 1e-9 {
        return Ok((elevation, 0.0));
    }
    let mut azimuth = enu.x.atan2(enu.y);
    if azimuth <= -PI {
        azimuth = PI;
    }
    Ok((elevation, azimuth))
}

/// Rotate an emission-time position into the reception-time ECEF frame.
///
/// Applies the z-axis rotation by `OMEGA_EARTH * propagation_time`,
/// removing the apparent displacement caused by Earth rotation during
/// signal flight.
pub fn sagnac_correct(
    pos_at_emission: &EcefPosition,
    propagation_time: f64,
) -> Result<EcefPosition, FrameError> {
    if !(0.0..1.0).contains(&propagation_time) {
        return Err(FrameError::InvalidPropagationTime(propagation_time));
    }
    let theta = OMEGA_EARTH * propagation_time;
    let (sin_t, cos_t) = theta.sin_cos();
    Ok(EcefPosition::new(
        cos_t * pos_at_emission.x + sin_t * pos_at_emission.y,
        -sin_t * pos_at_emission.x + cos_t * pos_at_emission.y,
        pos_at_emission.z,
    ))
}
