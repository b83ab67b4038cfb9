//! Campaign driver and metrics: runs the simulation pipeline across
//! epochs and seeds, filters observations per system variant, solves with
//! or without fault detection, and emits CSV/JSON artifacts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::frames::{ecef_to_geodetic, elevation_azimuth, EcefPosition, GeodeticPosition};
use crate::orbits::{haps_position, synth_constellation, SourceKind, SourceState};
use crate::raim::solve_epoch_raim;
use crate::scenario::{
    gauss_markov_step, synthesize_epoch, GaussMarkovState, Observation, ScenarioConfig,
    ScenarioError,
};
use crate::solver::{
    build_geometry, dop_from_covariance, lsq_step, ned_covariance, solve_epoch,
    CorrectedObservation, ModelDelays, SolverSettings,
};

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Config(#[from] ScenarioError),
    #[error("invalid variant {name}: {message}")]
    InvalidVariant { name: String, message: String },
}

/// A positioning system under comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemVariant {
    pub name: String,
    pub use_gps: bool,
    /// Number of HAPS platforms, randomly re-selected each epoch when
    /// fewer than the configured count.
    pub n_haps: usize,
    pub raim: bool,
}

impl SystemVariant {
    pub fn gps_only() -> Self {
        Self { name: "gps".into(), use_gps: true, n_haps: 0, raim: false }
    }

    pub fn gps_plus_haps(n: usize) -> Self {
        Self { name: format!("gps+{n}haps"), use_gps: true, n_haps: n, raim: false }
    }

    pub fn with_raim(mut self) -> Self {
        self.raim = true;
        self.name.push_str("+raim");
        self
    }

    /// Parse names like `gps`, `gps+3haps`, `4haps`, `gps+6haps+raim`.
    pub fn parse(name: &str) -> Result<Self, HarnessError> {
        let invalid = |message: &str| HarnessError::InvalidVariant {
            name: name.into(),
            message: message.into(),
        };
        let mut rest = name;
        let raim = if let Some(s) = rest.strip_suffix("+raim") {
            rest = s;
            true
        } else {
            false
        };
        let (use_gps, haps_part) = if rest == "gps" {
            (true, None)
        } else if let Some(h) = rest.strip_prefix("gps+") {
            (true, Some(h))
        } else {
            (false, Some(rest))
        };
        let n_haps = match haps_part {
            None => 0,
            Some(h) => {
                let digits = h
                    .strip_suffix("haps")
                    .ok_or_else(|| invalid("expected <n>haps"))?;
                digits.parse::<usize>().map_err(|_| invalid("bad HAPS count"))?
            }
        };
        let v = Self { name: name.into(), use_gps, n_haps, raim };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_haps > 6 {
            return Err(HarnessError::InvalidVariant {
                name: self.name.clone(),
                message: "at most 6 HAPS".into(),
            });
        }
        if !self.use_gps && self.n_haps < 4 {
            return Err(HarnessError::InvalidVariant {
                name: self.name.clone(),
                message: "a HAPS-only system needs at least 4 platforms".into(),
            });
        }
        Ok(())
    }
}

/// One epoch of a campaign cell.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub t: f64,
    pub truth: EcefPosition,
    pub estimate: Option<EcefPosition>,
    /// 3D position error, meters; NaN when no fix.
    pub error_3d: f64,
    pub hdop: f64,
    pub vdop: f64,
    pub n_sat: usize,
    pub n_haps: usize,
    pub converged: bool,
    pub raim_applied: bool,
    pub raim_enabled_events: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seed: u64,
    pub p50_m: f64,
    pub p90_m: f64,
    pub p95_m: f64,
    /// Percent; None for an empty campaign.
    pub availability_pct: Option<f64>,
    pub raim_enabled_total: usize,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub summary: VariantSummary,
}

/// Nearest-rank percentile: the element at rank ceil(q/100 * n) of the
/// sorted list.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((q / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Percent of epochs with at least 4 accepted sources and a converged fix.
pub fn availability(rows: &[EpochRow]) -> Result<f64, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let good = rows
        .iter()
        .filter(|r| r.converged && r.n_sat + r.n_haps >= 4)
        .count();
    Ok(100.0 * good as f64 / rows.len() as f64)
}

/// Enabled-event count ratio A/B; NaN flags a zero denominator.
pub fn raim_enabled_ratio(count_a: usize, count_b: usize) -> f64 {
    if count_b == 0 {
        return f64::NAN;
    }
    count_a as f64 / count_b as f64
}

/// Epoch-level synthesized inputs shared by every variant of a seed.
struct EpochData {
    t: f64,
    truth: EcefPosition,
    observations: Vec<Observation>,
    sources: Vec<SourceState>,
}

fn synthesize_seed(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<EpochData>, HarnessError> {
    let platforms = cfg.build_platforms()?;
    let c = &cfg.constellation;
    // dedicated stream for the Gauss-Markov error chain
    let mut gm_rng = ChaCha8Rng::seed_from_u64(seed);
    gm_rng.set_stream(0);
    let mut gm_states: BTreeMap<String, GaussMarkovState> = BTreeMap::new();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for k in 0..cfg.epochs {
        let t = k as f64 * cfg.epoch_interval_s;
        let env = cfg.environment_at(t);
        let truth = cfg.receiver_position(t);
        let truth_clock = cfg.receiver_clock(t);

        let mut sources = synth_constellation(
            c.planes,
            c.sats_per_plane,
            c.semi_major_axis_m,
            c.inclination_deg.to_radians(),
            t,
        );
        for p in &platforms {
            sources.push(haps_position(p, t));
        }

        for s in sources.iter().filter(|s| s.kind == SourceKind::Satellite) {
            gm_states
                .entry(s.id.clone())
                .or_insert_with(|| {
                    GaussMarkovState::stationary(env.sat_error_tau, env.sat_error_sigma, &mut gm_rng)
                });
        }
        if k > 0 {
            for state in gm_states.values_mut() {
                let noise: f64 = gm_rng.sample(StandardNormal);
                *state = gauss_markov_step(state, cfg.epoch_interval_s, noise);
            }
        }
        let sat_errors: BTreeMap<String, f64> =
            gm_states.iter().map(|(id, s)| (id.clone(), s.x)).collect();

        let mut rng = crate::scenario::epoch_rng(seed, k as u64);
        let observations =
            synthesize_epoch(&truth, truth_clock, t, &sources, &env, cfg, &sat_errors, &mut rng);
        epochs.push(EpochData { t, truth, observations, sources });
    }
    Ok(epochs)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn filter_for_variant(
    data: &EpochData,
    variant: &SystemVariant,
    cfg: &ScenarioConfig,
    seed: u64,
    epoch_index: u64,
) -> Vec<Observation> {
    let mut kept: Vec<Observation> = Vec::new();
    if variant.use_gps {
        kept.extend(
            data.observations.iter().filter(|o| o.kind == SourceKind::Satellite).cloned(),
        );
    }
    let haps_ids: Vec<&str> = cfg.haps.iter().map(|h| h.id.as_str()).collect();
    let selected: Vec<&str> = if variant.n_haps >= haps_ids.len() {
        haps_ids
    } else if variant.n_haps == 0 {
        Vec::new()
    } else {
        // per-epoch random platform subset, deterministic per variant
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&variant.name));
        rng.set_stream(epoch_index.wrapping_add(1));
        let mut ids = haps_ids;
        for k in 0..variant.n_haps {
            let pick = rng.gen_range(k..ids.len());
            ids.swap(k, pick);
        }
        ids.truncate(variant.n_haps);
        ids
    };
    kept.extend(
        data.observations
            .iter()
            .filter(|o| o.kind == SourceKind::Haps && selected.contains(&o.source_id.as_str()))
            .cloned(),
    );
    kept
}

/// Run every (variant, seed) campaign cell. All variants of a seed share
/// one synthesized observation stream, so comparisons are paired.
pub fn run_campaign(
    cfg: &ScenarioConfig,
    variants: &[SystemVariant],
    seeds: &[u64],
) -> Result<Vec<CampaignResult>, HarnessError> {
    cfg.validate()?;
    for v in variants {
        v.validate()?;
    }
    let settings = SolverSettings {
        elevation_mask: cfg.elevation_mask_deg.to_radians(),
        ..SolverSettings::default()
    };
    let delays = ModelDelays {
        pressure_hpa: cfg.errors.pressure_hpa,
        temperature_k: cfg.errors.temperature_k,
        vapor_pressure_hpa: crate::atmosphere::vapor_pressure_from_rh(
            cfg.errors.temperature_k,
            cfg.errors.relative_humidity,
        ),
        klobuchar: cfg.errors.klobuchar,
    };

    let mut out = Vec::new();
    for &seed in seeds {
        let epochs = synthesize_seed(cfg, seed)?;
        for variant in variants {
            let mut rows = Vec::with_capacity(epochs.len());
            for (k, data) in epochs.iter().enumerate() {
                let obs = filter_for_variant(data, variant, cfg, seed, k as u64);
                let solved = if variant.raim {
                    solve_epoch_raim(&obs, &data.sources, &delays, &settings, &cfg.raim)
                        .map(|(sol, diag)| (sol, diag.enabled_count))
                } else {
                    solve_epoch(&obs, &data.sources, &delays, &settings).map(|sol| (sol, 0))
                };
                let row = match solved {
                    Ok((sol, enabled)) => {
                        let n_sat = sol
                            .used_sources
                            .iter()
                            .filter(|id| {
                                obs.iter()
                                    .any(|o| &o.source_id == *id && o.kind == SourceKind::Satellite)
                            })
                            .count();
                        let n_haps = sol.used_sources.len() - n_sat;
                        EpochRow {
                            t: data.t,
                            truth: data.truth,
                            estimate: Some(sol.position),
                            error_3d: data.truth.distance_to(&sol.position),
                            hdop: sol.hdop,
                            vdop: sol.vdop,
                            n_sat,
                            n_haps,
                            converged: sol.converged,
                            raim_applied: sol.raim_applied,
                            raim_enabled_events: enabled,
                        }
                    }
                    Err(_) => EpochRow {
                        t: data.t,
                        truth: data.truth,
                        estimate: None,
                        error_3d: f64::NAN,
                        hdop: f64::NAN,
                        vdop: f64::NAN,
                        n_sat: obs.iter().filter(|o| o.kind == SourceKind::Satellite).count(),
                        n_haps: obs.iter().filter(|o| o.kind == SourceKind::Haps).count(),
                        converged: false,
                        raim_applied: false,
                        raim_enabled_events: 0,
                    },
                };
                rows.push(row);
            }
            let summary = summarize(&variant.name, seed, &rows);
            out.push(CampaignResult { variant: variant.name.clone(), seed, rows, summary });
        }
    }
    Ok(out)
}

fn summarize(variant: &str, seed: u64, rows: &[EpochRow]) -> VariantSummary {
    let errors: Vec<f64> = rows
        .iter()
        .filter(|r| r.converged && r.error_3d.is_finite())
        .map(|r| r.error_3d)
        .collect();
    let pct = |q: f64| percentile(&errors, q).unwrap_or(f64::NAN);
    VariantSummary {
        variant: variant.into(),
        seed,
        p50_m: pct(50.0),
        p90_m: pct(90.0),
        p95_m: pct(95.0),
        availability_pct: availability(rows).ok(),
        raim_enabled_total: rows.iter().map(|r| r.raim_enabled_events).sum(),
    }
}

// ---------------------------------------------------------------------------
// DOP mapping

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lat_min_deg: f64,
    pub lat_max_deg: f64,
    pub lon_min_deg: f64,
    pub lon_max_deg: f64,
    pub step_deg: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GridCell {
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// None when fewer than 4 sources are visible or geometry is singular.
    pub dop: Option<(f64, f64)>,
}

/// HDOP/VDOP of the sources visible above `mask` from `position`.
pub fn dop_at(
    position: &EcefPosition,
    sources: &[SourceState],
    mask: f64,
) -> Option<(f64, f64)> {
    let rows: Vec<CorrectedObservation> = sources
        .iter()
        .filter(|s| {
            elevation_azimuth(position, &s.position)
                .map(|(el, _)| el > mask)
                .unwrap_or(false)
        })
        .map(|s| CorrectedObservation {
            source_id: s.id.clone(),
            kind: s.kind,
            corrected_pseudorange: position.distance_to(&s.position),
            emission_position: s.position,
            cn0: 45.0,
        })
        .collect();
    if rows.len() < 4 {
        return None;
    }
    // DOP is pure geometry; the Sagnac refinement is irrelevant here
    let geo = build_geometry(position, 0.0, &rows, false).ok()?;
    let result = lsq_step(&geo).ok()?;
    let receiver_geo = ecef_to_geodetic(position).ok()?;
    dop_from_covariance(&ned_covariance(&result.covariance, &receiver_geo)).ok()
}

/// DOP of the configured constellation plus HAPS over a lat/lon grid at
/// t = 0.
pub fn dop_grid(cfg: &ScenarioConfig, grid: &GridSpec) -> Result<Vec<GridCell>, HarnessError> {
    if grid.step_deg <= 0.0 || grid.lat_max_deg < grid.lat_min_deg
        || grid.lon_max_deg < grid.lon_min_deg
    {
        return Err(HarnessError::InvalidVariant {
            name: "grid".into(),
            message: "bad grid bounds or step".into(),
        });
    }
    let c = &cfg.constellation;
    let mut sources = if c.planes > 0 && c.sats_per_plane > 0 {
        synth_constellation(
            c.planes,
            c.sats_per_plane,
            c.semi_major_axis_m,
            c.inclination_deg.to_radians(),
            0.0,
        )
    } else {
        Vec::new()
    };
    for p in &cfg.build_platforms()? {
        sources.push(haps_position(p, 0.0));
    }
    let mask = cfg.elevation_mask_deg.to_radians();
    let height = cfg.receiver.waypoints.first().map(|w| w.3).unwrap_or(0.0);

    let mut cells = Vec::new();
    let n_lat = ((grid.lat_max_deg - grid.lat_min_deg) / grid.step_deg).round() as usize + 1;
    let n_lon = ((grid.lon_max_deg - grid.lon_min_deg) / grid.step_deg).round() as usize + 1;
    for i in 0..n_lat {
        let lat = grid.lat_min_deg + i as f64 * grid.step_deg;
        for j in 0..n_lon {
            let lon = grid.lon_min_deg + j as f64 * grid.step_deg;
            let pos = crate::frames::geodetic_to_ecef(&GeodeticPosition::from_degrees(
                lat, lon, height,
            ));
            cells.push(GridCell { lat_deg: lat, lon_deg: lon, dop: dop_at(&pos, &sources, mask) });
        }
    }
    Ok(cells)
}

// ---------------------------------------------------------------------------
// artifact serialization (fixed 6-decimal formatting, stable row order)

fn f6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

pub fn epochs_csv(result: &CampaignResult) -> String {
    let mut out = String::from(
        "t,truth_x,truth_y,truth_z,est_x,est_y,est_z,err_3d,hdop,vdop,n_sat,n_haps,converged,raim_applied,raim_enabled\n",
    );
    for r in &result.rows {
        let (ex, ey, ez) = match &r.estimate {
            Some(p) => (f6(p.x), f6(p.y), f6(p.z)),
            None => ("nan".into(), "nan".into(), "nan".into()),
        };
        out.push_str(&format!(
            "{},{},{},{},{ex},{ey},{ez},{},{},{},{},{},{},{},{}\n",
            f6(r.t),
            f6(r.truth.x),
            f6(r.truth.y),
            f6(r.truth.z),
            f6(r.error_3d),
            f6(r.hdop),
            f6(r.vdop),
            r.n_sat,
            r.n_haps,
            r.converged as u8,
            r.raim_applied as u8,
            r.raim_enabled_events,
        ));
    }
    out
}

/// Empirical CDF of the converged 3D errors, monotone and ending at 1.
pub fn cdf_csv(results: &[&CampaignResult]) -> String {
    let mut errors: Vec<f64> = results
        .iter()
        .flat_map(|r| r.rows.iter())
        .filter(|r| r.converged && r.error_3d.is_finite())
        .map(|r| r.error_3d)
        .collect();
    errors.sort_by(|a, b| a.total_cmp(b));
    let mut out = String::from("error_m,cdf\n");
    let n = errors.len();
    for (i, e) in errors.iter().enumerate() {
        out.push_str(&format!("{},{}\n", f6(*e), f6((i + 1) as f64 / n as f64)));
    }
    out
}

pub fn summary_json(results: &[CampaignResult]) -> String {
    let summaries: Vec<&VariantSummary> = results.iter().map(|r| &r.summary).collect();
    serde_json::to_string_pretty(&summaries).expect("summary serializes")
}

pub fn dopgrid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("lat_deg,lon_deg,hdop,vdop\n");
    for c in cells {
        let (h, v) = match c.dop {
            Some((h, v)) => (f6(h), f6(v)),
            None => ("nan".into(), "nan".into()),
        };
        out.push_str(&format!("{},{},{h},{v}\n", f6(c.lat_deg), f6(c.lon_deg)));
    }
    out
}
