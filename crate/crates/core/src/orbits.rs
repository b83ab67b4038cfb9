//! Ranging-source kinematics: broadcast-ephemeris GPS satellites, a
//! synthetic Walker-style constellation, and HAPS circular loiter
//! trajectories.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use thiserror::Error;

use crate::constants::{MU_EARTH, OMEGA_EARTH};
use crate::frames::{
    ecef_to_geodetic, geodetic_to_ecef, ned_rotation, EcefPosition,
    GeodeticPosition,
};

const STALE_EPHEMERIS_S: f64 = 4.0 * 3600.0;
const KEPLER_TOL: f64 = 1e-13;
const KEPLER_MAX_ITER: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum OrbitError {
    #[error("Kepler iteration did not converge for M = {mean_anomaly} rad, e = {eccentricity}")]
    KeplerNonConvergence { mean_anomaly: f64, eccentricity: f64 },
    #[error("ephemeris stale: |t - toe| = {0} s exceeds 4 h")]
    StaleEphemeris(f64),
    #[error("elevation {0} rad is at or below the horizon")]
    BelowMask(f64),
}

/// Broadcast Keplerian parameters plus clock polynomial for one GPS satellite.
#[derive(Debug, Clone, PartialEq)]
pub struct EphemerisRecord {
    pub prn: u8,
    /// Time of ephemeris, seconds of GPS week.
    pub toe: f64,
    pub sqrt_a: f64,
    pub e: f64,
    pub i0: f64,
    pub omega0: f64,
    /// Argument of perigee (rad).
    pub omega: f64,
    pub m0: f64,
    pub delta_n: f64,
    pub i_dot: f64,
    pub omega_dot: f64,
    pub cuc: f64,
    pub cus: f64,
    pub crc: f64,
    pub crs: f64,
    pub cic: f64,
    pub cis: f64,
    pub af0: f64,
    pub af1: f64,
    pub af2: f64,
    pub week: u16,
}

impl EphemerisRecord {
    /// A circular GPS-class orbit with zero harmonics; test/synthesis helper.
    pub fn circular(prn: u8, sqrt_a: f64, i0: f64, omega0: f64, m0: f64) -> Self {
        Self {
            prn,
            toe: 0.0,
            sqrt_a,
            e: 0.0,
            i0,
            omega0,
            omega: 0.0,
            m0,
            delta_n: 0.0,
            i_dot: 0.0,
            omega_dot: 0.0,
            cuc: 0.0,
            cus: 0.0,
            crc: 0.0,
            crs: 0.0,
            cic: 0.0,
            cis: 0.0,
            af0: 0.0,
            af1: 0.0,
            af2: 0.0,
            week: 0,
        }
    }
}

/// Satellite or HAPS discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Satellite,
    Haps,
}

/// One ranging source at a signal emission time.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceState {
    pub id: String,
    pub kind: SourceKind,
    /// ECEF position at emission time, meters.
    pub position: EcefPosition,
    /// Clock offset dT from GPS time, seconds.
    pub clock_offset: f64,
}

/// A HAPS platform loitering on a circle in its local horizontal plane.
#[derive(Debug, Clone, PartialEq)]
pub struct HapsPlatform {
    pub id: String,
    /// Loiter circle center; height is the platform altitude (~20 km).
    pub center: GeodeticPosition,
    /// Loiter circle radius, meters.
    pub orbit_radius: f64,
    /// Angular rate around the loiter circle, rad/s.
    pub angular_rate: f64,
    /// Loiter angle at t = 0, measured from local east toward north.
    pub phase0: f64,
    /// Platform clock offset dT from GPS time, seconds.
    pub clock_offset: f64,
}

impl HapsPlatform {
    pub const DEFAULT_RADIUS: f64 = 300.0;
    /// One lap every 600 s.
    pub const DEFAULT_ANGULAR_RATE: f64 = TAU / 600.0;
}

/// Solve Kepler's equation E - e sin E = M by Newton iteration.
pub fn solve_kepler(mean_anomaly: f64, e: f64) -> Result<f64, OrbitError> {
    let m = mean_anomaly;
    let mut big_e = if e < 0.8 { m } else { PI };
    for _ in 0..KEPLER_MAX_ITER {
        let f = big_e - e * big_e.sin() - m;
        if f.abs() < KEPLER_TOL {
            return Ok(big_e);
        }
        big_e -= f / (1.0 - e * big_e.cos());
    }
    let f = big_e - e * big_e.sin() - m;
    if f.abs() < KEPLER_TOL {
        Ok(big_e)
    } else {
        Err(OrbitError::KeplerNonConvergence { mean_anomaly: m, eccentricity: e })
    }
}

/// ECEF position and clock offset from broadcast ephemeris at GPS time `t`.
pub fn propagate_ephemeris(eph: &EphemerisRecord, t: f64) -> Result<SourceState, OrbitError> {
    let mut tk = t - eph.toe;
    // week rollover
    if tk > 302_400.0 {
        tk -= 604_800.0;
    } else if tk < -302_400.0 {
        tk += 604_800.0;
    }
    if tk.abs() >= STALE_EPHEMERIS_S {
        return Err(OrbitError::StaleEphemeris(tk.abs()));
    }

    let a = eph.sqrt_a * eph.sqrt_a;
    let n = (MU_EARTH / (a * a * a)).sqrt() + eph.delta_n;
    let m = eph.m0 + n * tk;
    let big_e = solve_kepler(m, eph.e)?;

    let (sin_e, cos_e) = big_e.sin_cos();
    let sqrt_1me2 = (1.0 - eph.e * eph.e).sqrt();
    let nu = (sqrt_1me2 * sin_e).atan2(cos_e - eph.e);
    let phi = nu + eph.omega;
    let (sin_2phi, cos_2phi) = (2.0 * phi).sin_cos();

    let du = eph.cus * sin_2phi + eph.cuc * cos_2phi;
    let dr = eph.crs * sin_2phi + eph.crc * cos_2phi;
    let di = eph.cis * sin_2phi + eph.cic * cos_2phi;

    let u = phi + du;
    let r = a * (1.0 - eph.e * cos_e) + dr;
    let i = eph.i0 + di + eph.i_dot * tk;
    let omega = eph.omega0 + (eph.omega_dot - OMEGA_EARTH) * tk - OMEGA_EARTH * eph.toe;

    let (sin_u, cos_u) = u.sin_cos();
    let (sin_omega, cos_omega) = omega.sin_cos();
    let (sin_i, cos_i) = i.sin_cos();
    let xp = r * cos_u;
    let yp = r * sin_u;

    let position = EcefPosition::new(
        xp * cos_omega - yp * cos_i * sin_omega,
        xp * sin_omega + yp * cos_i * cos_omega,
        yp * sin_i,
    );

    let clock_offset = eph.af0 + eph.af1 * tk + eph.af2 * tk * tk;

    Ok(SourceState {
        id: format!("G{:02}", eph.prn),
        kind: SourceKind::Satellite,
        position,
        clock_offset,
    })
}

/// Walker-style synthetic GPS constellation: `n_planes` planes evenly
/// spaced in RAAN, `sats_per_plane` satellites evenly spaced in mean
/// anomaly with inter-plane phasing. Deterministic in its arguments.
pub fn synth_constellation(
    n_planes: usize,
    sats_per_plane: usize,
    a: f64,
    inclination: f64,
    t: f64,
) -> Vec<SourceState> {
    assert!(n_planes >= 1 && sats_per_plane >= 1);
    let total = n_planes * sats_per_plane;
    let mut out = Vec::with_capacity(total);
    let n0 = (MU_EARTH / (a * a * a)).sqrt();
    for plane in 0..n_planes {
        let raan = TAU * plane as f64 / n_planes as f64;
        for slot in 0..sats_per_plane {
            let prn = (plane * sats_per_plane + slot + 1) as u8;
            let m0 = TAU * slot as f64 / sats_per_plane as f64
                + TAU * plane as f64 / total as f64;
            let u = m0 + n0 * t;
            let (sin_u, cos_u) = u.sin_cos();
            let omega = raan - OMEGA_EARTH * t;
            let (sin_o, cos_o) = omega.sin_cos();
            let (sin_i, cos_i) = inclination.sin_cos();
            let xp = a * cos_u;
            let yp = a * sin_u;
            out.push(SourceState {
                id: format!("G{prn:02}"),
                kind: SourceKind::Satellite,
                position: EcefPosition::new(
                    xp * cos_o - yp * cos_i * sin_o,
                    xp * sin_o + yp * cos_i * cos_o,
                    yp * sin_i,
                ),
                clock_offset: 0.0,
            });
        }
    }
    out
}

/// Platform position on its loiter circle at time `t`.
pub fn haps_position(h: &HapsPlatform, t: f64) -> SourceState {
    let center = geodetic_to_ecef(&h.center);
    let r = ned_rotation(&h.center);
    let east = r.matrix().row(0).transpose();
    let north = r.matrix().row(1).transpose();
    let angle = h.phase0 + h.angular_rate * t;
    let offset: Vector3<f64> = (east * angle.cos() + north * angle.sin()) * h.orbit_radius;
    SourceState {
        id: h.id.clone(),
        kind: SourceKind::Haps,
        position: EcefPosition::from_vector(center.as_vector() + offset),
        clock_offset: h.clock_offset,
    }
}

/// Construct a platform whose loiter center sits at the requested
/// elevation/azimuth as seen from `receiver`, at the given altitude.
///
/// `phase0` is chosen so the platform starts at the circle point nearest
/// the receiver.
pub fn haps_from_elevation_azimuth(
    id: &str,
    receiver: &GeodeticPosition,
    elevation: f64,
    azimuth: f64,
    height: f64,
) -> Result<HapsPlatform, OrbitError> {
    if elevation <= 0.0 {
        return Err(OrbitError::BelowMask(elevation));
    }
    let rx = geodetic_to_ecef(receiver);
    let r = ned_rotation(receiver);
    let (sin_el, cos_el) = elevation.sin_cos();
    let (sin_az, cos_az) = azimuth.sin_cos();
    let dir = r.matrix().transpose() * Vector3::new(sin_az * cos_el, cos_az * cos_el, sin_el);

    // walk the line-of-sight ray out to the target ellipsoidal height
    let mut range = (height - receiver.height) / sin_el.max(1e-6);
    for _ in 0..25 {
        let p = EcefPosition::from_vector(rx.as_vector() + dir * range);
        let g = ecef_to_geodetic(&p).expect("ray point far from Earth center");
        let err = g.height - height;
        if err.abs() < 1e-6 {
            break;
        }
        range -= err / sin_el;
    }
    let center_ecef = EcefPosition::from_vector(rx.as_vector() + dir * range);
    let center = ecef_to_geodetic(&center_ecef).expect("center far from Earth center");

    // circle point nearest the receiver
    let rc = ned_rotation(&center);
    let to_rx = rx.as_vector() - center_ecef.as_vector();
    let e_comp = rc.matrix().row(0).transpose().dot(&to_rx);
    let n_comp = rc.matrix().row(1).transpose().dot(&to_rx);
    let phase0 = n_comp.atan2(e_comp);

    Ok(HapsPlatform {
        id: id.to_string(),
        center,
        orbit_radius: HapsPlatform::DEFAULT_RADIUS,
        angular_rate: HapsPlatform::DEFAULT_ANGULAR_RATE,
        phase0,
        clock_offset: 0.0,
    })
}

/// Elevation/azimuth pairs of the six-platform reference layout, degrees.
pub const REFERENCE_HAPS_ANGLES_DEG: [(f64, f64); 6] = [
    (81.087, -14.210),
    (24.054, -128.878),
    (27.952, 68.022),
    (32.450, 171.477),
    (36.554, 2.204),
    (33.805, -57.884),
];

/// Build the six-platform reference layout anchored at `anchor`.
pub fn reference_haps_layout(anchor: &GeodeticPosition, height: f64) -> Vec<HapsPlatform> {
    REFERENCE_HAPS_ANGLES_DEG
        .iter()
        .enumerate()
        .map(|(i, &(el, az))| {
            haps_from_elevation_azimuth(
                &format!("H{:02}", i + 1),
                anchor,
                el.to_radians(),
                az.to_radians(),
                height,
            )
            .expect("reference angles are above the horizon")
        })
        .collect()
}
