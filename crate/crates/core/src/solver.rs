//! Single point positioning: pseudorange correction, geometry assembly
//! with Sagnac handling, iterative least squares, and DOP extraction.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

use crate::atmosphere::{klobuchar_delay, saastamoinen_delay, AtmosphericDelays, KlobucharCoefficients};
use crate::constants::SPEED_OF_LIGHT;
use crate::frames::{
    ecef_to_geodetic, elevation_azimuth, ned_rotation, sagnac_correct, EcefPosition,
    GeodeticPosition,
};
use crate::orbits::{SourceKind, SourceState};
use crate::scenario::Observation;

/// Condition number of H'H beyond which the geometry is declared singular.
pub const SINGULARITY_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    /// Fewer than four usable ranging sources.
    #[error("only {0} usable ranging sources; at least 4 required")]
    Unavailable(usize),
    /// Collinear observations: H'H condition number above threshold.
    #[error("singular geometry: H'H condition number {0:.3e}")]
    SingularGeometry(f64),
    /// A source is effectively co-located with the estimate.
    #[error("source {0} within 1 m of the position estimate")]
    DegenerateGeometry(String),
    /// Negative variance on the covariance diagonal.
    #[error("invalid covariance: negative diagonal entry {0}")]
    InvalidCovariance(f64),
}

/// Linearized epoch geometry: design matrix, a-priori range residuals,
/// geometric ranges, and unit line-of-sight vectors, in row order.
#[derive(Debug, Clone)]
pub struct EpochGeometry {
    /// N x 4 design matrix; each row is [-e_x, -e_y, -e_z, 1] with e the
    /// receiver-to-source unit vector.
    pub design: DMatrix<f64>,
    /// b = p_corrected - rho - c * clock_estimate, meters.
    pub residuals: DVector<f64>,
    /// Geometric ranges, meters.
    pub ranges: DVector<f64>,
    /// Unit line-of-sight vectors (receiver to source).
    pub los: Vec<Vector3<f64>>,
    pub source_ids: Vec<String>,
    pub kinds: Vec<SourceKind>,
    /// C/N0 per row, carried for the RAIM weighting.
    pub cn0s: Vec<f64>,
}

impl EpochGeometry {
    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }
}

/// One least-squares update.
#[derive(Debug, Clone)]
pub struct LsqResult {
    /// [dx, dy, dz, d(c*dt)] in meters.
    pub dx: Vector4<f64>,
    /// Q = (H'H)^-1 (or (H'WH)^-1 for the weighted solve).
    pub covariance: Matrix4<f64>,
    /// Clock update dx(4)/c, seconds.
    pub clock_update: f64,
}

/// Converged (or best-effort) epoch solution with diagnostics.
#[derive(Debug, Clone)]
pub struct EpochSolution {
    pub position: EcefPosition,
    /// Receiver clock offset, seconds.
    pub clock_offset: f64,
    pub covariance: Matrix4<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub hdop: f64,
    pub vdop: f64,
    /// Post-fit residuals per source, meters.
    pub residuals: Vec<(String, f64)>,
    pub used_sources: Vec<String>,
    pub raim_applied: bool,
}

/// Solver iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Elevation mask, radians.
    pub elevation_mask: f64,
    pub max_iterations: usize,
    /// Convergence threshold on |dx(1:3)|, meters.
    pub convergence_m: f64,
    /// Disable to measure the effect of the Earth-rotation correction.
    pub apply_sagnac: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            elevation_mask: 15f64.to_radians(),
            max_iterations: 20,
            convergence_m: 0.01,
            apply_sagnac: true,
        }
    }
}

/// Supplies atmospheric delays during the iterative solve.
pub trait DelaysProvider {
    fn delays(
        &self,
        kind: SourceKind,
        receiver: &GeodeticPosition,
        elevation: f64,
        azimuth: f64,
        epoch: f64,
    ) -> AtmosphericDelays;
}

/// No atmospheric correction at all.
pub struct ZeroDelays;

impl DelaysProvider for ZeroDelays {
    fn delays(&self, _: SourceKind, _: &GeodeticPosition, _: f64, _: f64, _: f64) -> AtmosphericDelays {
        AtmosphericDelays::zero()
    }
}

/// Saastamoinen + Klobuchar for satellites; HAPS signals receive no
/// atmospheric correction.
pub struct ModelDelays {
    pub pressure_hpa: f64,
    pub temperature_k: f64,
    pub vapor_pressure_hpa: f64,
    pub klobuchar: KlobucharCoefficients,
}

impl Default for ModelDelays {
    fn default() -> Self {
        Self {
            pressure_hpa: 1013.25,
            temperature_k: 288.15,
            vapor_pressure_hpa: crate::atmosphere::vapor_pressure_from_rh(288.15, 0.5),
            klobuchar: KlobucharCoefficients::default(),
        }
    }
}

impl DelaysProvider for ModelDelays {
    fn delays(
        &self,
        kind: SourceKind,
        receiver: &GeodeticPosition,
        elevation: f64,
        azimuth: f64,
        epoch: f64,
    ) -> AtmosphericDelays {
        if kind == SourceKind::Haps {
            return AtmosphericDelays::zero();
        }
        let el = elevation.max(5.001f64.to_radians());
        let d_trop = saastamoinen_delay(
            receiver,
            el,
            self.pressure_hpa,
            self.temperature_k,
            self.vapor_pressure_hpa,
        )
        .unwrap_or(0.0);
        let d_ion = klobuchar_delay(receiver, el, azimuth, epoch, &self.klobuchar);
        AtmosphericDelays { d_trop, d_ion }
    }
}

/// Sagnac-consistent geometric range from `receiver` to a source at
/// emission-time position `emission_pos`: one light-time fixed-point
/// refinement, returning the range and the reception-time position.
pub fn emission_range(receiver: &EcefPosition, emission_pos: &EcefPosition) -> (f64, EcefPosition) {
    let dt0 = (receiver.distance_to(emission_pos) / SPEED_OF_LIGHT).clamp(0.0, 0.999);
    let p1 = sagnac_correct(emission_pos, dt0).expect("clamped propagation time");
    let dt1 = (receiver.distance_to(&p1) / SPEED_OF_LIGHT).clamp(0.0, 0.999);
    let p2 = sagnac_correct(emission_pos, dt1).expect("clamped propagation time");
    (receiver.distance_to(&p2), p2)
}

/// Apply clock and atmospheric corrections to a raw pseudorange.
///
/// Satellites: p + c*dT - d_trop - d_ion. HAPS: p + c*dT only (their
/// pseudorange model carries no atmospheric terms to remove).
pub fn correct_pseudorange(obs: &Observation, src: &SourceState, delays: &AtmosphericDelays) -> f64 {
    match src.kind {
        SourceKind::Satellite => {
            obs.pseudorange + SPEED_OF_LIGHT * src.clock_offset - delays.d_trop - delays.d_ion
        }
        SourceKind::Haps => obs.pseudorange + SPEED_OF_LIGHT * src.clock_offset,
    }
}

/// Row input for [`build_geometry`]: corrected pseudorange plus the
/// emission-time source state.
#[derive(Debug, Clone)]
pub struct CorrectedObservation {
    pub source_id: String,
    pub kind: SourceKind,
    pub corrected_pseudorange: f64,
    pub emission_position: EcefPosition,
    pub cn0: f64,
}

/// Assemble the linearized geometry around the current estimate.
///
/// Per row: propagation time from the corrected pseudorange, refined once
/// through the Sagnac rotation, then range, unit LOS, and
/// b = p_corrected - rho - c * clock_estimate.
pub fn build_geometry(
    est_pos: &EcefPosition,
    est_clock: f64,
    rows: &[CorrectedObservation],
    apply_sagnac: bool,
) -> Result<EpochGeometry, SolverError> {
    assert!(!rows.is_empty());
    let n = rows.len();
    let mut design = DMatrix::zeros(n, 4);
    let mut residuals = DVector::zeros(n);
    let mut ranges = DVector::zeros(n);
    let mut los = Vec::with_capacity(n);
    let mut source_ids = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let mut cn0s = Vec::with_capacity(n);

    for (i, row) in rows.iter().enumerate() {
        let reception_pos = if apply_sagnac {
            let dt0 = (row.corrected_pseudorange / SPEED_OF_LIGHT).clamp(0.0, 0.999);
            let p1 = sagnac_correct(&row.emission_position, dt0).expect("clamped");
            let dt1 = (est_pos.distance_to(&p1) / SPEED_OF_LIGHT).clamp(0.0, 0.999);
            sagnac_correct(&row.emission_position, dt1).expect("clamped")
        } else {
            row.emission_position
        };
        let delta = reception_pos.as_vector() - est_pos.as_vector();
        let rho = delta.norm();
        if rho < 1.0 {
            return Err(SolverError::DegenerateGeometry(row.source_id.clone()));
        }
        let e = delta / rho;
        design[(i, 0)] = -e.x;
        design[(i, 1)] = -e.y;
        design[(i, 2)] = -e.z;
        design[(i, 3)] = 1.0;
        ranges[i] = rho;
        residuals[i] = row.corrected_pseudorange - rho - SPEED_OF_LIGHT * est_clock;
        los.push(e);
        source_ids.push(row.source_id.clone());
        kinds.push(row.kind);
        cn0s.push(row.cn0);
    }

    Ok(EpochGeometry { design, residuals, ranges, los, source_ids, kinds, cn0s })
}

fn normal_matrix_solve(
    normal: Matrix4<f64>,
    rhs: Vector4<f64>,
) -> Result<LsqResult, SolverError> {
    // condition check on the normal matrix
    let svd = normal.svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let cond = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    if !cond.is_finite() || cond > SINGULARITY_THRESHOLD {
        return Err(SolverError::SingularGeometry(cond));
    }
    let chol = normal
        .cholesky()
        .ok_or(SolverError::SingularGeometry(cond))?;
    let covariance = chol.inverse();
    let dx = covariance * rhs;
    Ok(LsqResult { dx, covariance, clock_update: dx[3] / SPEED_OF_LIGHT })
}

/// Unweighted least-squares step: Q = (H'H)^-1, dx = Q H' b.
pub fn lsq_step(g: &EpochGeometry) -> Result<LsqResult, SolverError> {
    if g.len() < 4 {
        return Err(SolverError::Unavailable(g.len()));
    }
    let ht = g.design.transpose();
    let normal = Matrix4::from_iterator((&ht * &g.design).iter().cloned());
    let rhs = Vector4::from_iterator((&ht * &g.residuals).iter().cloned());
    normal_matrix_solve(normal, rhs)
}

/// Weighted least-squares step with diagonal weights w (Q = (H'WH)^-1,
/// dx = Q H' W b). With unit weights this reduces to [`lsq_step`].
pub fn wls_step(g: &EpochGeometry, weights: &DVector<f64>) -> Result<LsqResult, SolverError> {
    if g.len() < 4 {
        return Err(SolverError::Unavailable(g.len()));
    }
    assert_eq!(weights.len(), g.len());
    let mut weighted = g.design.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let ht = g.design.transpose();
    let normal = Matrix4::from_iterator((&ht * &weighted).iter().cloned());
    let rhs = Vector4::from_iterator(
        (&ht * DVector::from_fn(g.len(), |i, _| weights[i] * g.residuals[i])).iter().cloned(),
    );
    normal_matrix_solve(normal, rhs)
}

/// Spatial covariance block rotated into the local horizontal frame.
pub fn ned_covariance(q: &Matrix4<f64>, receiver: &GeodeticPosition) -> Matrix3<f64> {
    let spatial = q.fixed_view::<3, 3>(0, 0).into_owned();
    let r = ned_rotation(receiver);
    r.matrix() * spatial * r.matrix().transpose()
}

/// HDOP/VDOP from the local-frame covariance.
pub fn dop_from_covariance(q_ned: &Matrix3<f64>) -> Result<(f64, f64), SolverError> {
    for i in 0..3 {
        if q_ned[(i, i)] < 0.0 {
            return Err(SolverError::InvalidCovariance(q_ned[(i, i)]));
        }
    }
    let hdop = (q_ned[(0, 0)] + q_ned[(1, 1)]).sqrt();
    let vdop = q_ned[(2, 2)].sqrt();
    Ok((hdop, vdop))
}

// membership freezes once the estimate step falls under this
const FREEZE_STEP_M: f64 = 1000.0;
// below this radius the estimate is still near the Earth-center
// initialization and elevation masking / delays are meaningless
const VALID_ESTIMATE_RADIUS_M: f64 = 1.0e6;

/// Iterative SPP solve for one epoch, from Earth-center initialization.
pub fn solve_epoch(
    observations: &[Observation],
    sources: &[SourceState],
    delays: &dyn DelaysProvider,
    settings: &SolverSettings,
) -> Result<EpochSolution, SolverError> {
    let matched: Vec<(&Observation, &SourceState)> = observations
        .iter()
        .filter_map(|o| sources.iter().find(|s| s.id == o.source_id).map(|s| (o, s)))
        .collect();
    if matched.len() <= 3 {
        return Err(SolverError::Unavailable(matched.len()));
    }

    let mut est_pos = EcefPosition::new(0.0, 0.0, 0.0);
    let mut est_clock = 0.0f64;
    let mut frozen_membership: Option<Vec<usize>> = None;
    let mut last_geometry: Option<EpochGeometry> = None;
    let mut last_result: Option<LsqResult> = None;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..settings.max_iterations {
        iterations += 1;
        let estimate_valid = est_pos.norm() > VALID_ESTIMATE_RADIUS_M;
        let receiver_geo = if estimate_valid {
            ecef_to_geodetic(&est_pos).ok()
        } else {
            None
        };

        // elevation masking waits for membership to freeze: while the
        // estimate is still converging, an intermediate position far
        // from the final fix would drop sources spuriously
        let active: Vec<usize> = match &frozen_membership {
            Some(m) => m.clone(),
            None => (0..matched.len()).collect(),
        };
        if active.len() <= 3 {
            return Err(SolverError::Unavailable(active.len()));
        }

        let rows: Vec<CorrectedObservation> = active
            .iter()
            .map(|&i| {
                let (obs, src) = matched[i];
                let d = match &receiver_geo {
                    Some(geo) => {
                        let (el, az) = elevation_azimuth(&est_pos, &src.position)
                            .unwrap_or((std::f64::consts::FRAC_PI_2, 0.0));
                        delays.delays(src.kind, geo, el, az, obs.epoch)
                    }
                    None => AtmosphericDelays::zero(),
                };
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
        let result = lsq_step(&geometry)?;
        let step = result.dx.fixed_rows::<3>(0).norm();

        est_pos = EcefPosition::new(
            est_pos.x + result.dx[0],
            est_pos.y + result.dx[1],
            est_pos.z + result.dx[2],
        );
        est_clock += result.clock_update;
        last_geometry = Some(geometry);
        last_result = Some(result);

        if frozen_membership.is_none() && step < FREEZE_STEP_M {
            // the estimate is near-final: apply the mask here, once
            let kept: Vec<usize> = active
                .iter()
                .cloned()
                .filter(|&i| {
                    elevation_azimuth(&est_pos, &matched[i].1.position)
                        .map(|(el, _)| el > settings.elevation_mask)
                        .unwrap_or(false)
                })
                .collect();
            if kept.len() <= 3 {
                return Err(SolverError::Unavailable(kept.len()));
            }
            let dropped = kept.len() != active.len();
            frozen_membership = Some(kept);
            if dropped {
                // converge again on the reduced membership
                continue;
            }
        }
        if step <= settings.convergence_m {
            converged = true;
            break;
        }
    }

    let geometry = last_geometry.expect("at least one iteration ran");
    let result = last_result.expect("at least one iteration ran");

    let receiver_geo = ecef_to_geodetic(&est_pos)
        .map_err(|_| SolverError::DegenerateGeometry("receiver".into()))?;
    let q_ned = ned_covariance(&result.covariance, &receiver_geo);
    let (hdop, vdop) = dop_from_covariance(&q_ned)?;

    // post-fit residuals v = H dx - b for the final step
    let vhat = &geometry.design
        * DVector::from_iterator(4, result.dx.iter().cloned())
        - &geometry.residuals;
    let residuals = geometry
        .source_ids
        .iter()
        .cloned()
        .zip(vhat.iter().cloned())
        .collect();

    Ok(EpochSolution {
        position: est_pos,
        clock_offset: est_clock,
        covariance: result.covariance,
        iterations,
        converged,
        hdop,
        vdop,
        residuals,
        used_sources: geometry.source_ids.clone(),
        raim_applied: false,
    })
}
