//! Synthesis engine: truth trajectories, visibility, C/N0 assignment,
//! stochastic error processes, and pseudorange observation generation.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::{
    klobuchar_delay, saastamoinen_delay, vapor_pressure_from_rh, KlobucharCoefficients,
};
use crate::constants::SPEED_OF_LIGHT;
use crate::frames::{ecef_to_geodetic, elevation_azimuth, geodetic_to_ecef, EcefPosition, GeodeticPosition};
use crate::orbits::{haps_from_elevation_azimuth, HapsPlatform, SourceKind, SourceState};
use crate::solver::emission_range;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("configuration error at {field}: {message}")]
    Config { field: String, message: String },
}

/// First-order Gauss-Markov error state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussMarkovState {
    /// Current error value, meters.
    pub x: f64,
    /// Correlation time, seconds.
    pub tau: f64,
    /// Stationary standard deviation, meters.
    pub sigma: f64,
}

impl GaussMarkovState {
    pub fn new(tau: f64, sigma: f64) -> Self {
        assert!(tau > 0.0 && sigma >= 0.0);
        Self { x: 0.0, tau, sigma }
    }

    /// Start from a stationary draw instead of zero.
    pub fn stationary<R: Rng>(tau: f64, sigma: f64, rng: &mut R) -> Self {
        let n: f64 = rng.sample(StandardNormal);
        Self { x: n * sigma, tau, sigma }
    }
}

/// Exact discretization of the first-order Gauss-Markov process:
/// x' = e^(-dt/tau) x + noise * sigma * sqrt(1 - e^(-2 dt/tau)).
///
/// Preserves the stationary autocorrelation sigma^2 e^(-|dt|/tau) for any
/// step size.
pub fn gauss_markov_step(state: &GaussMarkovState, dt: f64, noise: f64) -> GaussMarkovState {
    assert!(dt > 0.0);
    let decay = (-dt / state.tau).exp();
    let x = decay * state.x + noise * state.sigma * (1.0 - decay * decay).sqrt();
    GaussMarkovState { x, ..*state }
}

/// Environment preset name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentName {
    Open,
    Suburban,
    DenseUrban,
}

/// Environment model: line-of-sight probability curve and error process
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub name: EnvironmentName,
    /// Logistic LOS curve steepness, per degree of elevation.
    pub los_k_per_deg: f64,
    /// Elevation of 50% LOS probability, degrees.
    pub los_el50_deg: f64,
    /// Satellite pseudorange error correlation time, seconds.
    pub sat_error_tau: f64,
    /// Satellite pseudorange error stationary std, meters.
    pub sat_error_sigma: f64,
    /// HAPS pseudorange error std, meters.
    pub haps_error_std: f64,
    /// Per-satellite per-epoch probability of a multipath fault. The
    /// multipath effect is not ray traced; it is drawn statistically,
    /// and only the dense urban preset enables it by default.
    #[serde(default)]
    pub multipath_fault_prob: f64,
    /// Std of the Gaussian multipath fault magnitude, meters.
    #[serde(default)]
    pub multipath_fault_std: f64,
}

impl EnvironmentModel {
    pub fn open() -> Self {
        Self {
            name: EnvironmentName::Open,
            los_k_per_deg: 0.0,
            los_el50_deg: 0.0,
            sat_error_tau: 10.0,
            sat_error_sigma: 6.0,
            haps_error_std: 2.0,
            multipath_fault_prob: 0.0,
            multipath_fault_std: 0.0,
        }
    }

    pub fn suburban() -> Self {
        Self {
            name: EnvironmentName::Suburban,
            los_k_per_deg: 0.15,
            los_el50_deg: 12.0,
            sat_error_tau: 10.0,
            sat_error_sigma: 6.0,
            haps_error_std: 2.0,
            multipath_fault_prob: 0.0,
            multipath_fault_std: 0.0,
        }
    }

    pub fn dense_urban() -> Self {
        Self {
            name: EnvironmentName::DenseUrban,
            los_k_per_deg: 0.12,
            los_el50_deg: 35.0,
            sat_error_tau: 10.0,
            sat_error_sigma: 6.0,
            haps_error_std: 5.0,
            multipath_fault_prob: 0.06,
            multipath_fault_std: 55.0,
        }
    }
}

/// LOS probability at `elevation` (rad) in the given environment.
///
/// Logistic in elevation, clamped to exactly 1 at zenith; the Open
/// environment is always line-of-sight.
pub fn los_probability(elevation: f64, env: &EnvironmentModel) -> f64 {
    debug_assert!((0.0..=FRAC_PI_2 + 1e-9).contains(&elevation));
    if env.name == EnvironmentName::Open {
        return 1.0;
    }
    if elevation >= FRAC_PI_2 - 1e-9 {
        return 1.0;
    }
    let el_deg = elevation.to_degrees();
    1.0 / (1.0 + (-env.los_k_per_deg * (el_deg - env.los_el50_deg)).exp())
}

/// Satellite C/N0 preset: linear from 30 dB-Hz at 15 deg elevation to
/// 50 dB-Hz at 90 deg, plus a pre-drawn jitter term. HAPS take the
/// maximum C/N0 among the visible satellites (50 dB-Hz fallback when no
/// satellite reference exists).
pub fn cn0_assign(elevation: f64, kind: SourceKind, visible_sat_cn0s: &[f64], jitter: f64) -> f64 {
    match kind {
        SourceKind::Satellite => satellite_cn0(elevation, jitter),
        SourceKind::Haps => haps_cn0(visible_sat_cn0s),
    }
}

/// Truth decomposition of a simulated pseudorange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationTruth {
    /// Geometric range at reception time (Sagnac-consistent), meters.
    pub geometric_range: f64,
    /// c * (dt - dT), meters.
    pub clock_term: f64,
    /// Everything else: atmosphere plus stochastic error, meters.
    pub error_term: f64,
}

/// One pseudorange measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub source_id: String,
    pub kind: SourceKind,
    /// Epoch, GPS seconds.
    pub epoch: f64,
    /// Pseudorange, meters.
    pub pseudorange: f64,
    /// Carrier-to-noise-density ratio, dB-Hz.
    pub cn0: f64,
    /// Present only for simulated observations.
    pub truth: Option<ObservationTruth>,
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstellationConfig {
    pub planes: usize,
    pub sats_per_plane: usize,
    pub semi_major_axis_m: f64,
    pub inclination_deg: f64,
}

impl Default for ConstellationConfig {
    fn default() -> Self {
        Self { planes: 6, sats_per_plane: 4, semi_major_axis_m: 26_560_000.0, inclination_deg: 55.0 }
    }
}

/// One HAPS platform entry. Either an explicit center (lat/lon/height) or
/// start elevation/azimuth angles anchored at the first receiver waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HapsConfig {
    pub id: String,
    pub elevation_deg: Option<f64>,
    pub azimuth_deg: Option<f64>,
    pub lat_deg: Option<f64>,
    pub lon_deg: Option<f64>,
    pub height_m: f64,
    pub orbit_radius_m: f64,
    pub period_s: f64,
    pub clock_offset_s: f64,
}

impl Default for HapsConfig {
    fn default() -> Self {
        Self {
            id: "H01".into(),
            elevation_deg: None,
            azimuth_deg: None,
            lat_deg: None,
            lon_deg: None,
            height_m: 20_000.0,
            orbit_radius_m: HapsPlatform::DEFAULT_RADIUS,
            period_s: 600.0,
            clock_offset_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReceiverConfig {
    /// Timestamped geodetic waypoints: (t_s, lat_deg, lon_deg, height_m).
    /// Linear interpolation in ECEF between waypoints.
    pub waypoints: Vec<(f64, f64, f64, f64)>,
    /// Receiver clock offset at t = 0, seconds.
    pub clock_offset_s: f64,
    /// Receiver clock drift, s/s.
    pub clock_drift: f64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        // Carleton University toward Rideau Street, Ottawa
        Self {
            waypoints: vec![
                (0.0, 45.3876, -75.6960, 70.0),
                (700.0, 45.4261, -75.6910, 70.0),
            ],
            clock_offset_s: 0.0,
            clock_drift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleEntry {
    pub t_start_s: f64,
    pub env: EnvironmentName,
}

impl Default for ScheduleEntry {
    fn default() -> Self {
        Self { t_start_s: 0.0, env: EnvironmentName::Suburban }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentConfig {
    pub suburban: EnvironmentModel,
    pub dense_urban: EnvironmentModel,
    pub schedule: Vec<ScheduleEntry>,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            suburban: EnvironmentModel::suburban(),
            dense_urban: EnvironmentModel::dense_urban(),
            schedule: vec![
                ScheduleEntry { t_start_s: 0.0, env: EnvironmentName::Suburban },
                ScheduleEntry { t_start_s: 380.0, env: EnvironmentName::DenseUrban },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorConfig {
    /// Satellite C/N0 jitter std, dB-Hz.
    pub cn0_jitter_std: f64,
    /// Optional clock-estimation noise folded into HAPS pseudoranges, m.
    pub haps_clock_noise_std: f64,
    /// Meteorological inputs for the tropospheric model.
    pub pressure_hpa: f64,
    pub temperature_k: f64,
    pub relative_humidity: f64,
    pub klobuchar: KlobucharCoefficients,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        Self {
            cn0_jitter_std: 1.0,
            haps_clock_noise_std: 0.0,
            pressure_hpa: 1013.25,
            temperature_k: 288.15,
            relative_humidity: 0.5,
            klobuchar: KlobucharCoefficients::default(),
        }
    }
}

/// Which denominator the RAIM normalized residual uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStdMode {
    /// Recompute sqrt((C_v)_ii) every outer iteration.
    Recompute,
    /// Freeze the denominators from the first iteration.
    FirstIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaimConfig {
    /// False alarm rate.
    pub alpha0: f64,
    /// Danish exponent scale T; `None` means "use the critical value".
    pub danish_t: Option<f64>,
    pub residual_std_mode: ResidualStdMode,
}

impl Default for RaimConfig {
    fn default() -> Self {
        Self { alpha0: 0.005, danish_t: None, residual_std_mode: ResidualStdMode::Recompute }
    }
}

/// Full declarative scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub elevation_mask_deg: f64,
    pub seed: u64,
    pub epoch_interval_s: f64,
    pub epochs: usize,
    pub dense_urban_satellite_cap: usize,
    /// Reject capped satellite subsets whose GDOP exceeds this gate,
    /// redrawing a bounded number of times. Receivers discard such
    /// fixes anyway; without the gate the random subset occasionally
    /// degenerates. Non-finite or zero disables the gate.
    pub dense_urban_gdop_gate: f64,
    pub constellation: ConstellationConfig,
    pub haps: Vec<HapsConfig>,
    pub receiver: ReceiverConfig,
    pub environment: EnvironmentConfig,
    pub errors: ErrorConfig,
    pub raim: RaimConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let haps = crate::orbits::REFERENCE_HAPS_ANGLES_DEG
            .iter()
            .enumerate()
            .map(|(i, &(el, az))| HapsConfig {
                id: format!("H{:02}", i + 1),
                elevation_deg: Some(el),
                azimuth_deg: Some(az),
                ..HapsConfig::default()
            })
            .collect();
        Self {
            elevation_mask_deg: 15.0,
            seed: 1,
            epoch_interval_s: 1.0,
            epochs: 700,
            dense_urban_satellite_cap: 4,
            dense_urban_gdop_gate: 5.0,
            constellation: ConstellationConfig::default(),
            haps,
            receiver: ReceiverConfig::default(),
            environment: EnvironmentConfig::default(),
            errors: ErrorConfig::default(),
            raim: RaimConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Config {
            field: e.span().map(|s| format!("offset {}", s.start)).unwrap_or_default(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |field: &str, message: String| {
            Err(ScenarioError::Config { field: field.into(), message })
        };
        if !(0.0..=30.0).contains(&self.elevation_mask_deg) {
            return err("elevation_mask_deg", format!("{} outside [0, 30]", self.elevation_mask_deg));
        }
        if self.epoch_interval_s <= 0.0 {
            return err("epoch_interval_s", "must be positive".into());
        }
        if self.receiver.waypoints.is_empty() {
            return err("receiver.waypoints", "at least one waypoint required".into());
        }
        for h in &self.haps {
            if !(0.0..=400.0).contains(&h.orbit_radius_m) {
                return err("haps.orbit_radius_m", format!("{} outside [0, 400]", h.orbit_radius_m));
            }
            if !(17_000.0..=25_000.0).contains(&h.height_m) {
                return err("haps.height_m", format!("{} outside [17000, 25000]", h.height_m));
            }
        }
        Ok(())
    }

    /// The environment in effect at time `t`.
    pub fn environment_at(&self, t: f64) -> EnvironmentModel {
        let mut current = self
            .environment
            .schedule
            .first()
            .map(|e| e.env)
            .unwrap_or(EnvironmentName::Suburban);
        for entry in &self.environment.schedule {
            if t >= entry.t_start_s {
                current = entry.env;
            }
        }
        match current {
            EnvironmentName::Open => EnvironmentModel::open(),
            EnvironmentName::Suburban => self.environment.suburban,
            EnvironmentName::DenseUrban => self.environment.dense_urban,
        }
    }

    /// Truth receiver position at time `t` (linear interpolation in ECEF).
    pub fn receiver_position(&self, t: f64) -> EcefPosition {
        let wps = &self.receiver.waypoints;
        let to_ecef = |w: &(f64, f64, f64, f64)| {
            geodetic_to_ecef(&GeodeticPosition::from_degrees(w.1, w.2, w.3))
        };
        if t <= wps[0].0 || wps.len() == 1 {
            return to_ecef(&wps[0]);
        }
        for pair in wps.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if t <= b.0 {
                let f = (t - a.0) / (b.0 - a.0);
                let pa = to_ecef(a).as_vector();
                let pb = to_ecef(b).as_vector();
                return EcefPosition::from_vector(pa + (pb - pa) * f);
            }
        }
        to_ecef(wps.last().unwrap())
    }

    /// Receiver clock offset dt at time `t`.
    pub fn receiver_clock(&self, t: f64) -> f64 {
        self.receiver.clock_offset_s + self.receiver.clock_drift * t
    }

    /// Build the configured HAPS platforms, anchoring angle-specified
    /// entries at the first receiver waypoint.
    pub fn build_platforms(&self) -> Result<Vec<HapsPlatform>, ScenarioError> {
        let w0 = self.receiver.waypoints.first().ok_or_else(|| ScenarioError::Config {
            field: "receiver.waypoints".into(),
            message: "empty".into(),
        })?;
        let anchor = GeodeticPosition::from_degrees(w0.1, w0.2, w0.3);
        self.haps
            .iter()
            .map(|h| {
                let mut platform = match (h.elevation_deg, h.azimuth_deg, h.lat_deg, h.lon_deg) {
                    (Some(el), Some(az), _, _) => haps_from_elevation_azimuth(
                        &h.id,
                        &anchor,
                        el.to_radians(),
                        az.to_radians(),
                        h.height_m,
                    )
                    .map_err(|e| ScenarioError::Config {
                        field: format!("haps.{}", h.id),
                        message: e.to_string(),
                    })?,
                    (_, _, Some(lat), Some(lon)) => HapsPlatform {
                        id: h.id.clone(),
                        center: GeodeticPosition::from_degrees(lat, lon, h.height_m),
                        orbit_radius: h.orbit_radius_m,
                        angular_rate: std::f64::consts::TAU / h.period_s,
                        phase0: 0.0,
                        clock_offset: h.clock_offset_s,
                    },
                    _ => {
                        return Err(ScenarioError::Config {
                            field: format!("haps.{}", h.id),
                            message: "need elevation/azimuth or lat/lon".into(),
                        })
                    }
                };
                platform.orbit_radius = h.orbit_radius_m;
                platform.angular_rate = std::f64::consts::TAU / h.period_s;
                platform.clock_offset = h.clock_offset_s;
                Ok(platform)
            })
            .collect()
    }
}

/// Deterministic per-epoch RNG substream derived from (seed, epoch index).
pub fn epoch_rng(seed: u64, epoch_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch_index.wrapping_add(1));
    rng
}

/// Synthesize one epoch of pseudorange observations per the satellite and
/// HAPS measurement models.
///
/// `sat_errors` carries the current Gauss-Markov error value per
/// satellite id; the caller owns and advances those states in epoch
/// order.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_epoch<R: Rng>(
    truth_pos: &EcefPosition,
    truth_clock: f64,
    epoch: f64,
    sources: &[SourceState],
    env: &EnvironmentModel,
    cfg: &ScenarioConfig,
    sat_errors: &BTreeMap<String, f64>,
    rng: &mut R,
) -> Vec<Observation> {
    assert!(!sources.is_empty());
    let mask = cfg.elevation_mask_deg.to_radians();
    let truth_geo = ecef_to_geodetic(truth_pos).expect("truth position away from Earth center");
    let vapor = vapor_pressure_from_rh(cfg.errors.temperature_k, cfg.errors.relative_humidity);

    // visibility: elevation mask for everything, plus a Bernoulli LOS
    // draw for the HAPS only. Satellite blockage in the dense urban
    // environment is emulated by the satellite cap below instead.
    struct Visible<'a> {
        src: &'a SourceState,
        elevation: f64,
        azimuth: f64,
    }
    let mut sats = Vec::new();
    let mut haps = Vec::new();
    for src in sources {
        let Ok((el, az)) = elevation_azimuth(truth_pos, &src.position) else { continue };
        if el <= mask {
            continue;
        }
        if src.kind == SourceKind::Haps {
            let p_los = los_probability(el, env);
            if rng.gen::<f64>() >= p_los {
                continue;
            }
        }
        let v = Visible { src, elevation: el, azimuth: az };
        match src.kind {
            SourceKind::Satellite => sats.push(v),
            SourceKind::Haps => haps.push(v),
        }
    }

    // dense-urban satellite cap: random subset, re-drawn per epoch. A
    // subset whose geometry is unusable (GDOP above the gate) is
    // redrawn a bounded number of times; if every attempt fails the
    // gate, the best-geometry attempt is kept.
    if env.name == EnvironmentName::DenseUrban && sats.len() > cfg.dense_urban_satellite_cap {
        const GATE_ATTEMPTS: usize = 20;
        let cap = cfg.dense_urban_satellite_cap;
        let gate = cfg.dense_urban_gdop_gate;
        let gated = gate.is_finite() && gate > 0.0;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _ in 0..GATE_ATTEMPTS {
            let mut order: Vec<usize> = (0..sats.len()).collect();
            for k in 0..cap {
                let pick = rng.gen_range(k..order.len());
                order.swap(k, pick);
            }
            order.truncate(cap);
            let gdop = subset_gdop(order.iter().map(|&i| (sats[i].elevation, sats[i].azimuth)));
            if best.as_ref().map_or(true, |(g, _)| gdop < *g) {
                best = Some((gdop, order));
            }
            if !gated || gdop <= gate {
                break;
            }
        }
        let (_, order) = best.expect("at least one subset attempt");
        let mut picked: Vec<Visible> = Vec::with_capacity(cap);
        let mut keep = vec![false; sats.len()];
        for &i in &order {
            keep[i] = true;
        }
        for (i, v) in sats.into_iter().enumerate() {
            if keep[i] {
                picked.push(v);
            }
        }
        picked.sort_by(|a, b| a.src.id.cmp(&b.src.id));
        sats = picked;
    }

    let mut observations = Vec::with_capacity(sats.len() + haps.len());
    let mut sat_cn0s = Vec::with_capacity(sats.len());
    for v in &sats {
        let jitter = if cfg.errors.cn0_jitter_std > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            n * cfg.errors.cn0_jitter_std
        } else {
            0.0
        };
        let cn0 = satellite_cn0(v.elevation, jitter);
        sat_cn0s.push(cn0);

        let (rho, _) = emission_range(truth_pos, &v.src.position);
        let clock_term = SPEED_OF_LIGHT * (truth_clock - v.src.clock_offset);
        let d_ion = klobuchar_delay(&truth_geo, v.elevation, v.azimuth, epoch, &cfg.errors.klobuchar);
        let d_trop = saastamoinen_delay(
            &truth_geo,
            v.elevation,
            cfg.errors.pressure_hpa,
            cfg.errors.temperature_k,
            vapor,
        )
        .expect("elevation above mask");
        let gm = sat_errors.get(&v.src.id).copied().unwrap_or(0.0);
        let mut error_term = d_ion + d_trop + gm;
        if env.multipath_fault_prob > 0.0 && rng.gen::<f64>() < env.multipath_fault_prob {
            let n: f64 = rng.sample(StandardNormal);
            error_term += n * env.multipath_fault_std;
        }
        observations.push(Observation {
            source_id: v.src.id.clone(),
            kind: SourceKind::Satellite,
            epoch,
            pseudorange: rho + clock_term + error_term,
            cn0,
            truth: Some(ObservationTruth { geometric_range: rho, clock_term, error_term }),
        });
    }

    let haps_cn0 = haps_cn0(&sat_cn0s);
    for v in &haps {
        let (rho, _) = emission_range(truth_pos, &v.src.position);
        let clock_term = SPEED_OF_LIGHT * (truth_clock - v.src.clock_offset);
        let mut error_term = 0.0;
        if env.haps_error_std > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            error_term += n * env.haps_error_std;
        }
        if cfg.errors.haps_clock_noise_std > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            error_term += n * cfg.errors.haps_clock_noise_std;
        }
        observations.push(Observation {
            source_id: v.src.id.clone(),
            kind: SourceKind::Haps,
            epoch,
            pseudorange: rho + clock_term + error_term,
            cn0: haps_cn0,
            truth: Some(ObservationTruth { geometric_range: rho, clock_term, error_term }),
        });
    }

    observations
}

/// GDOP of a set of sight lines given as (elevation, azimuth) pairs,
/// computed in the local NED frame; infinite when singular.
pub fn subset_gdop(angles: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut normal = nalgebra::Matrix4::<f64>::zeros();
    let mut n = 0usize;
    for (el, az) in angles {
        let row = nalgebra::Vector4::new(
            -el.cos() * az.cos(),
            -el.cos() * az.sin(),
            el.sin(),
            1.0,
        );
        normal += row * row.transpose();
        n += 1;
    }
    if n < 4 {
        return f64::INFINITY;
    }
    match normal.try_inverse() {
        Some(inv) => inv.trace().sqrt(),
        None => f64::INFINITY,
    }
}

/// Satellite C/N0 preset: linear 30 dB-Hz at 15 deg to 50 dB-Hz at 90 deg.
pub fn satellite_cn0(elevation: f64, jitter: f64) -> f64 {
    let el_deg = elevation.to_degrees().clamp(15.0, 90.0);
    30.0 + (el_deg - 15.0) / 75.0 * 20.0 + jitter
}

/// HAPS C/N0: the maximum C/N0 among visible satellites, 50 dB-Hz
/// fallback when no satellite reference exists.
pub fn haps_cn0(visible_sat_cn0s: &[f64]) -> f64 {
    let max = visible_sat_cn0s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_finite() {
        max
    } else {
        50.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbits::{haps_position, synth_constellation};
    use approx::assert_relative_eq;

    #[test]
    fn gauss_markov_decay_factor() {
        let s = GaussMarkovState { x: 1.0, tau: 10.0, sigma: 6.0 };
        let next = gauss_markov_step(&s, 1.0, 0.0);
        assert_relative_eq!(next.x, (-0.1f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gauss_markov_zero_sigma_deterministic() {
        let s = GaussMarkovState { x: 5.0, tau: 10.0, sigma: 0.0 };
        let next = gauss_markov_step(&s, 2.5, 3.7);
        assert_relative_eq!(next.x, 5.0 * (-0.25f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gauss_markov_stationary_variance() {
        let mut rng = epoch_rng(42, 0);
        let mut s = GaussMarkovState::stationary(10.0, 6.0, &mut rng);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noise: f64 = rng.sample(StandardNormal);
            s = gauss_markov_step(&s, 1.0, noise);
            sum += s.x;
            sum_sq += s.x * s.x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - 36.0).abs() < 0.02 * 36.0, "var = {var}");
    }

    #[test]
    fn los_probability_boundaries() {
        for env in [EnvironmentModel::open(), EnvironmentModel::suburban(), EnvironmentModel::dense_urban()] {
            assert_eq!(los_probability(FRAC_PI_2, &env), 1.0);
        }
        assert_eq!(los_probability(20f64.to_radians(), &EnvironmentModel::open()), 1.0);
        // frozen from the DenseUrban preset curve: 1/(1 + e^(0.12*20))
        let p = los_probability(15f64.to_radians(), &EnvironmentModel::dense_urban());
        assert_relative_eq!(p, 0.0831727, epsilon = 1e-6);
    }

    #[test]
    fn los_probability_monotone() {
        for env in [EnvironmentModel::suburban(), EnvironmentModel::dense_urban()] {
            let mut prev = 0.0;
            for step in 0..=90 {
                let p = los_probability((step as f64).to_radians().min(FRAC_PI_2), &env);
                assert!(p >= prev - 1e-12);
                prev = p;
            }
        }
    }

    #[test]
    fn cn0_endpoints_and_max_rule() {
        assert_relative_eq!(cn0_assign(FRAC_PI_2, SourceKind::Satellite, &[], 0.0), 50.0);
        assert_relative_eq!(cn0_assign(15f64.to_radians(), SourceKind::Satellite, &[], 0.0), 30.0);
        assert_eq!(cn0_assign(0.5, SourceKind::Haps, &[38.0, 44.0, 41.0], 0.0), 44.0);
        assert_eq!(cn0_assign(0.5, SourceKind::Haps, &[], 0.0), 50.0);
    }

    fn zero_error_config() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.errors.cn0_jitter_std = 0.0;
        cfg.environment.suburban.haps_error_std = 0.0;
        cfg.environment.dense_urban.haps_error_std = 0.0;
        cfg.environment.suburban.sat_error_sigma = 0.0;
        cfg.environment.dense_urban.sat_error_sigma = 0.0;
        cfg
    }

    fn all_sources(cfg: &ScenarioConfig, t: f64) -> Vec<SourceState> {
        let c = &cfg.constellation;
        let mut sources = synth_constellation(
            c.planes,
            c.sats_per_plane,
            c.semi_major_axis_m,
            c.inclination_deg.to_radians(),
            t,
        );
        for p in cfg.build_platforms().unwrap() {
            sources.push(haps_position(&p, t));
        }
        sources
    }

    #[test]
    fn zero_error_limit_satellites_and_haps() {
        let cfg = zero_error_config();
        let mut env = EnvironmentModel::open();
        env.haps_error_std = 0.0;
        let truth = cfg.receiver_position(0.0);
        let truth_geo = ecef_to_geodetic(&truth).unwrap();
        let sources = all_sources(&cfg, 0.0);
        let mut rng = epoch_rng(7, 0);
        let obs = synthesize_epoch(&truth, 0.0, 0.0, &sources, &env, &cfg, &BTreeMap::new(), &mut rng);
        assert!(obs.iter().any(|o| o.kind == SourceKind::Satellite));
        assert!(obs.iter().any(|o| o.kind == SourceKind::Haps));
        let vapor = vapor_pressure_from_rh(cfg.errors.temperature_k, cfg.errors.relative_humidity);
        for o in &obs {
            let src = sources.iter().find(|s| s.id == o.source_id).unwrap();
            let (rho, _) = emission_range(&truth, &src.position);
            match o.kind {
                SourceKind::Haps => assert_relative_eq!(o.pseudorange, rho, epsilon = 1e-6),
                SourceKind::Satellite => {
                    let (el, az) = elevation_azimuth(&truth, &src.position).unwrap();
                    let d_ion =
                        klobuchar_delay(&truth_geo, el, az, 0.0, &cfg.errors.klobuchar);
                    let d_trop = saastamoinen_delay(
                        &truth_geo,
                        el,
                        cfg.errors.pressure_hpa,
                        cfg.errors.temperature_k,
                        vapor,
                    )
                    .unwrap();
                    assert_relative_eq!(o.pseudorange, rho + d_ion + d_trop, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn dense_urban_cap_limits_satellites() {
        let mut cfg = zero_error_config();
        // force certain visibility so the cap is the only limiter
        cfg.environment.dense_urban.los_k_per_deg = 10.0;
        cfg.environment.dense_urban.los_el50_deg = -50.0;
        let env = cfg.environment.dense_urban;
        let truth = cfg.receiver_position(0.0);
        let sources = all_sources(&cfg, 0.0);
        let mut rng = epoch_rng(3, 5);
        let obs = synthesize_epoch(&truth, 0.0, 0.0, &sources, &env, &cfg, &BTreeMap::new(), &mut rng);
        let n_sat = obs.iter().filter(|o| o.kind == SourceKind::Satellite).count();
        assert_eq!(n_sat, 4);
    }

    #[test]
    fn truth_decomposition_recombines() {
        let cfg = ScenarioConfig::default();
        let sources = all_sources(&cfg, 0.0);
        let mut errors = BTreeMap::new();
        for s in &sources {
            errors.insert(s.id.clone(), 2.5);
        }
        for epoch_idx in 0..1000u64 {
            let t = epoch_idx as f64;
            let env = cfg.environment_at(t);
            let truth = cfg.receiver_position(t);
            let mut rng = epoch_rng(cfg.seed, epoch_idx);
            let obs =
                synthesize_epoch(&truth, 1e-4, t, &sources, &env, &cfg, &errors, &mut rng);
            for o in obs {
                let tr = o.truth.unwrap();
                let recombined = tr.geometric_range + tr.clock_term + tr.error_term;
                assert!((o.pseudorange - recombined).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn haps_observations_never_carry_ionosphere() {
        // with all stochastic errors zeroed, any HAPS error term must be 0
        // even though the Klobuchar coefficients are nonzero
        let cfg = zero_error_config();
        let env = EnvironmentModel { haps_error_std: 0.0, ..cfg.environment.suburban };
        let truth = cfg.receiver_position(100.0);
        let sources = all_sources(&cfg, 100.0);
        let mut rng = epoch_rng(11, 100);
        let obs =
            synthesize_epoch(&truth, 0.0, 100.0, &sources, &env, &cfg, &BTreeMap::new(), &mut rng);
        for o in obs.iter().filter(|o| o.kind == SourceKind::Haps) {
            assert_eq!(o.truth.unwrap().error_term, 0.0);
        }
    }

    #[test]
    fn identical_seed_identical_stream() {
        let cfg = ScenarioConfig::default();
        let sources = all_sources(&cfg, 0.0);
        let errors = BTreeMap::new();
        let run = || {
            let mut out = Vec::new();
            for epoch_idx in 0..50u64 {
                let t = epoch_idx as f64;
                let env = cfg.environment_at(t);
                let truth = cfg.receiver_position(t);
                let mut rng = epoch_rng(cfg.seed, epoch_idx);
                out.extend(synthesize_epoch(
                    &truth, 0.0, t, &sources, &env, &cfg, &errors, &mut rng,
                ));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::default();
        let text = cfg.to_toml();
        let parsed = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn invalid_mask_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.elevation_mask_deg = 45.0;
        assert!(matches!(cfg.validate(), Err(ScenarioError::Config { .. })));
    }
}
