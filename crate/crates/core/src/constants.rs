//! Physical and geodetic constants (WGS-84 / GPS interface values).

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Earth rotation rate (rad/s).
pub const OMEGA_EARTH: f64 = 7.292_115_146_7e-5;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;

/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// WGS-84 semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);

/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Earth gravitational parameter (m^3/s^2), GPS broadcast value.
pub const MU_EARTH: f64 = 3.986_005e14;

/// Immutable bundle of the physical constants used across the toolkit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    pub speed_of_light: f64,
    pub omega_earth: f64,
    pub wgs84_semi_major: f64,
    pub wgs84_flattening: f64,
    pub mu_earth: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            speed_of_light: SPEED_OF_LIGHT,
            omega_earth: OMEGA_EARTH,
            wgs84_semi_major: WGS84_A,
            wgs84_flattening: WGS84_F,
            mu_earth: MU_EARTH,
        }
    }
}
