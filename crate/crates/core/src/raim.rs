//! C/N0-weighted least squares with modified Danish iterative reweighting
//! for fault detection and exclusion.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::frames::{ecef_to_geodetic, EcefPosition};
use crate::orbits::SourceState;
use crate::scenario::{Observation, RaimConfig, ResidualStdMode};
use crate::solver::{
    build_geometry, correct_pseudorange, dop_from_covariance, ned_covariance, solve_epoch,
    wls_step, CorrectedObservation, DelaysProvider, EpochGeometry, EpochSolution, SolverError,
    SolverSettings,
};

/// Final-weight ratio under which a source is reported as effectively
/// excluded.
pub const EXCLUDED_WEIGHT_RATIO: f64 = 1e-3;

/// Observation variance (m^2) from carrier-to-noise density.
pub fn cn0_variance(cn0: f64) -> f64 {
    10.0 + 150.0 * 150.0 * 10f64.powf(-cn0 / 10.0)
}

/// Two-sided normal critical value for false-alarm rate `alpha0`.
pub fn critical_value(alpha0: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - alpha0 / 2.0)
}

/// Diagonal variance model for one epoch.
#[derive(Debug, Clone)]
pub struct ObservationWeights {
    /// A-priori variances from the C/N0 model, m^2.
    pub sigma0: DVector<f64>,
    /// Current (possibly inflated) variances, m^2.
    pub sigma: DVector<f64>,
}

impl ObservationWeights {
    pub fn from_cn0(cn0s: &[f64]) -> Self {
        let sigma0 = DVector::from_iterator(cn0s.len(), cn0s.iter().map(|&c| cn0_variance(c)));
        Self { sigma: sigma0.clone(), sigma0 }
    }

    /// Row weights 1/sigma_i^2 for the weighted solve.
    pub fn weights(&self) -> DVector<f64> {
        self.sigma.map(|s| 1.0 / s)
    }
}

/// Per-epoch fault-detection diagnostics.
#[derive(Debug, Clone)]
pub struct RaimDiagnostics {
    /// Final post-fit residuals, meters, in row order.
    pub residuals: DVector<f64>,
    /// Final normalized residuals.
    pub normalized: DVector<f64>,
    pub critical: f64,
    pub alpha0: f64,
    /// Number of (observation, iteration) pairs that tripped the test.
    pub enabled_count: usize,
    /// Final (possibly inflated) variances, m^2, in row order.
    pub final_variances: DVector<f64>,
    /// Sources whose final weight collapsed below
    /// [`EXCLUDED_WEIGHT_RATIO`] of the median weight.
    pub excluded: Vec<String>,
}

impl RaimDiagnostics {
    fn empty(alpha0: f64, critical: f64) -> Self {
        Self {
            residuals: DVector::zeros(0),
            normalized: DVector::zeros(0),
            critical,
            alpha0,
            enabled_count: 0,
            final_variances: DVector::zeros(0),
            excluded: Vec::new(),
        }
    }
}

/// Post-fit residuals v = H dx - b and their covariance
/// C_v = Sigma - H (H' Sigma^-1 H)^-1 H'.
pub fn residual_covariance(
    g: &EpochGeometry,
    sigma: &DVector<f64>,
    dx: &nalgebra::Vector4<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = g.len();
    let vhat = &g.design * DVector::from_iterator(4, dx.iter().cloned()) - &g.residuals;

    let mut normal: nalgebra::Matrix4<f64> = nalgebra::Matrix4::zeros();
    for i in 0..n {
        let w = 1.0 / sigma[i];
        let row = g.design.row(i);
        for a in 0..4 {
            for b in 0..4 {
                normal[(a, b)] += row[a] * w * row[b];
            }
        }
    }
    let q = normal.cholesky().map(|c| c.inverse()).unwrap_or_else(|| {
        normal.try_inverse().unwrap_or_else(nalgebra::Matrix4::zeros)
    });

    let mut c_v = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut hqh = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    hqh += g.design[(i, a)] * q[(a, b)] * g.design[(j, b)];
                }
            }
            c_v[(i, j)] = if i == j { sigma[i] - hqh } else { -hqh };
        }
    }
    (vhat, c_v)
}

/// Modified Danish variance update: inflate from the a-priori variance
/// when the normalized residual exceeds the critical value.
pub fn danish_update(w_bar: f64, sigma0_sq: f64, critical: f64, t: f64) -> f64 {
    if w_bar.abs() > critical {
        sigma0_sq * (w_bar.abs() / t).exp()
    } else {
        sigma0_sq
    }
}

/// Weighted solve with C/N0 variances and Danish reweighting, seeded from
/// the plain SPP solution. With fewer than five usable sources the plain
/// solution is returned with `raim_applied = false`.
pub fn solve_epoch_raim(
    observations: &[Observation],
    sources: &[SourceState],
    delays: &dyn DelaysProvider,
    settings: &SolverSettings,
    cfg: &RaimConfig,
) -> Result<(EpochSolution, RaimDiagnostics), SolverError> {
    let critical = critical_value(cfg.alpha0);
    let t = cfg.danish_t.unwrap_or(critical);

    let spp = solve_epoch(observations, sources, delays, settings)?;
    if spp.used_sources.len() < 5 {
        return Ok((spp, RaimDiagnostics::empty(cfg.alpha0, critical)));
    }

    let matched: Vec<(&Observation, &SourceState)> = spp
        .used_sources
        .iter()
        .filter_map(|id| {
            let o = observations.iter().find(|o| &o.source_id == id)?;
            let s = sources.iter().find(|s| &s.id == id)?;
            Some((o, s))
        })
        .collect();

    let mut est_pos = spp.position;
    let mut est_clock = spp.clock_offset;
    let mut weights = ObservationWeights::from_cn0(
        &matched.iter().map(|(o, _)| o.cn0).collect::<Vec<_>>(),
    );
    let mut first_denoms: Option<DVector<f64>> = None;
    let mut enabled_count = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut last: Option<(EpochGeometry, crate::solver::LsqResult, DVector<f64>)> = None;

    for _ in 0..settings.max_iterations {
        iterations += 1;
        let receiver_geo = ecef_to_geodetic(&est_pos)
            .map_err(|_| SolverError::DegenerateGeometry("receiver".into()))?;

        let rows: Vec<CorrectedObservation> = matched
            .iter()
            .map(|(obs, src)| {
                let (el, az) = crate::frames::elevation_azimuth(&est_pos, &src.position)
                    .unwrap_or((std::f64::consts::FRAC_PI_2, 0.0));
                let d = delays.delays(src.kind, &receiver_geo, el, az, obs.epoch);
                CorrectedObservation {
                    source_id: obs.source_id.clone(),
                    kind: src.kind,
                    corrected_pseudorange: correct_pseudorange(obs, src, &d),
                    emission_position: src.position,
                    cn0: obs.cn0,
                }
            })
            .collect();

        let geometry = build_geometry(&est_pos, est_clock, &rows, settings.apply_sagnac)?;
        let result = wls_step(&geometry, &weights.weights())?;
        let step = result.dx.fixed_rows::<3>(0).norm();

        let (vhat, c_v) = residual_covariance(&geometry, &weights.sigma, &result.dx);
        let denoms = DVector::from_fn(geometry.len(), |i, _| c_v[(i, i)].max(0.0).sqrt());
        if first_denoms.is_none() {
            first_denoms = Some(denoms.clone());
        }
        let effective = match cfg.residual_std_mode {
            ResidualStdMode::Recompute => &denoms,
            ResidualStdMode::FirstIteration => first_denoms.as_ref().unwrap(),
        };
        let normalized = DVector::from_fn(geometry.len(), |i, _| {
            if effective[i] > 1e-9 { vhat[i] / effective[i] } else { 0.0 }
        });

        // monotone inflation envelope: once an observation is inflated it
        // stays inflated for the rest of the epoch. Without this the
        // recompute mode oscillates: an excluded observation's normalized
        // residual shrinks (its own variance enters the denominator), the
        // variance resets, and the fault is re-detected forever.
        let mut sigma_stable = true;
        for i in 0..geometry.len() {
            if normalized[i].abs() > critical {
                enabled_count += 1;
            }
            let next = danish_update(normalized[i], weights.sigma0[i], critical, t)
                .max(weights.sigma[i]);
            if (next - weights.sigma[i]).abs() > 1e-3 * weights.sigma[i] {
                sigma_stable = false;
            }
            weights.sigma[i] = next;
        }

        est_pos = EcefPosition::new(
            est_pos.x + result.dx[0],
            est_pos.y + result.dx[1],
            est_pos.z + result.dx[2],
        );
        est_clock += result.clock_update;
        last = Some((geometry, result, normalized));

        // don't stop while the reweighting is still changing the
        // variances: the inflated weights must feed at least one solve
        if step <= settings.convergence_m && sigma_stable {
            converged = true;
            break;
        }
    }

    let (geometry, result, normalized) = last.expect("at least one iteration ran");
    let receiver_geo = ecef_to_geodetic(&est_pos)
        .map_err(|_| SolverError::DegenerateGeometry("receiver".into()))?;
    let q_ned = ned_covariance(&result.covariance, &receiver_geo);
    let (hdop, vdop) = dop_from_covariance(&q_ned)?;

    let vhat = &geometry.design * DVector::from_iterator(4, result.dx.iter().cloned())
        - &geometry.residuals;
    let residual_pairs = geometry
        .source_ids
        .iter()
        .cloned()
        .zip(vhat.iter().cloned())
        .collect();

    let w = weights.weights();
    let mut sorted: Vec<f64> = w.iter().cloned().collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    let excluded = geometry
        .source_ids
        .iter()
        .enumerate()
        .filter(|&(i, _)| w[i] < EXCLUDED_WEIGHT_RATIO * median)
        .map(|(_, id)| id.clone())
        .collect();

    let solution = EpochSolution {
        position: est_pos,
        clock_offset: est_clock,
        covariance: result.covariance,
        iterations,
        converged,
        hdop,
        vdop,
        residuals: residual_pairs,
        used_sources: geometry.source_ids.clone(),
        raim_applied: true,
    };
    let diagnostics = RaimDiagnostics {
        residuals: vhat,
        normalized,
        critical,
        alpha0: cfg.alpha0,
        enabled_count,
        final_variances: weights.sigma.clone(),
        excluded,
    };
    Ok((solution, diagnostics))
}
