//! Tropospheric (Saastamoinen) and ionospheric (Klobuchar) delay models,
//! used both when synthesizing pseudoranges and when correcting them.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::SPEED_OF_LIGHT;
use crate::frames::GeodeticPosition;

const MIN_TROPO_ELEVATION: f64 = 5.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error, PartialEq)]
pub enum AtmosphereError {
    #[error("elevation {0} rad below the 5 deg tropospheric model validity limit")]
    ElevationTooLow(f64),
}

/// Broadcast Klobuchar ionospheric coefficients.
///
/// Alpha terms in s, s/sc, s/sc^2, s/sc^3 and beta terms in s .. s/sc^3
/// (sc = semicircles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlobucharCoefficients {
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
}

impl Default for KlobucharCoefficients {
    /// A representative mid-latitude broadcast set.
    fn default() -> Self {
        Self {
            alpha: [1.1176e-8, 7.4506e-9, -5.9605e-8, -5.9605e-8],
            beta: [90_112.0, 16_384.0, -131_072.0, -65_536.0],
        }
    }
}

/// Per-observation atmospheric delays, meters.
///
/// HAPS sources carry no ionospheric term anywhere in the pipeline: their
/// signals originate below the ionosphere.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AtmosphericDelays {
    pub d_trop: f64,
    pub d_ion: f64,
}

impl AtmosphericDelays {
    pub fn zero() -> Self {
        Self::default()
    }
}

/// Saturation vapor pressure scaled by relative humidity (hPa).
pub fn vapor_pressure_from_rh(temperature_k: f64, relative_humidity: f64) -> f64 {
    let t_c = temperature_k - 273.15;
    relative_humidity * 6.108 * (17.27 * t_c / (t_c + 237.3)).exp()
}

/// Saastamoinen tropospheric delay (m).
///
/// `pressure` in hPa, `temperature` in K, `vapor_pressure` in hPa.
pub fn saastamoinen_delay(
    _receiver: &GeodeticPosition,
    elevation: f64,
    pressure: f64,
    temperature: f64,
    vapor_pressure: f64,
) -> Result<f64, AtmosphereError> {
    if elevation < MIN_TROPO_ELEVATION {
        return Err(AtmosphereError::ElevationTooLow(elevation));
    }
    let zenith_angle = FRAC_PI_2 - elevation;
    let zenith_term = 0.002277 * (pressure + (1255.0 / temperature + 0.05) * vapor_pressure);
    Ok(zenith_term / zenith_angle.cos())
}

/// Klobuchar L1 ionospheric delay in meters.
///
/// `gps_time` is seconds into the GPS week (only time of day matters).
pub fn klobuchar_delay(
    receiver: &GeodeticPosition,
    elevation: f64,
    azimuth: f64,
    gps_time: f64,
    k: &KlobucharCoefficients,
) -> f64 {
    // the standard broadcast algorithm works in semicircles
    let e_sc = (elevation / std::f64::consts::PI).max(0.0);
    let phi_u = receiver.latitude / std::f64::consts::PI;
    let lambda_u = receiver.longitude / std::f64::consts::PI;

    let psi = 0.0137 / (e_sc + 0.11) - 0.022;
    let phi_i = (phi_u + psi * azimuth.cos()).clamp(-0.416, 0.416);
    let lambda_i = lambda_u + psi * azimuth.sin() / (phi_i * std::f64::consts::PI).cos();
    let phi_m = phi_i + 0.064 * ((lambda_i - 1.617) * std::f64::consts::PI).cos();

    let mut t = 43_200.0 * lambda_i + gps_time;
    t = t.rem_euclid(86_400.0);

    let obliquity = 1.0 + 16.0 * (0.53 - e_sc).powi(3);

    let mut amplitude = 0.0;
    let mut period = 0.0;
    let mut phi_pow = 1.0;
    for n in 0..4 {
        amplitude += k.alpha[n] * phi_pow;
        period += k.beta[n] * phi_pow;
        phi_pow *= phi_m;
    }
    let amplitude = amplitude.max(0.0);
    let period = period.max(72_000.0);

    let x = 2.0 * std::f64::consts::PI * (t - 50_400.0) / period;
    let delay_s = if x.abs() < 1.57 {
        obliquity * (5e-9 + amplitude * (1.0 - x * x / 2.0 + x.powi(4) / 24.0))
    } else {
        obliquity * 5e-9
    };
    SPEED_OF_LIGHT * delay_s
}
