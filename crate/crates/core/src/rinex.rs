//! RINEX 2.11/3.0x GPS navigation and observation parsers plus the HAPS
//! augmentation sidecar CSV, all feeding the same solver path as the
//! simulator.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::atmosphere::KlobucharCoefficients;
use crate::frames::EcefPosition;
use crate::orbits::EphemerisRecord;

const EPHEMERIS_WINDOW_S: f64 = 4.0 * 3600.0;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RinexError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("malformed epoch at line {line}: {message}")]
    MalformedEpoch { line: usize, message: String },
    #[error("no ephemeris for PRN {0} within 4 h")]
    NoEphemeris(u8),
    #[error("sidecar schema error at row {row}: {message}")]
    SchemaError { row: usize, message: String },
    #[error("sidecar timestamp {0} does not align with any observation epoch")]
    TimestampMisaligned(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavHeader {
    pub version: f64,
    pub leap_seconds: Option<i32>,
    pub klobuchar: Option<KlobucharCoefficients>,
}

/// Parsed navigation file. Malformed records are skipped and reported in
/// `errors`; non-GPS records are skipped and counted.
#[derive(Debug, Clone)]
pub struct NavFile {
    pub header: NavHeader,
    pub records: Vec<EphemerisRecord>,
    pub errors: Vec<RinexError>,
    pub skipped_non_gps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsHeader {
    pub version: f64,
    pub approx_position: Option<EcefPosition>,
    /// GPS observation codes in file order.
    pub obs_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRecord {
    pub prn: u8,
    /// C1/C1C pseudorange, meters.
    pub pseudorange: f64,
    /// S1/S1C carrier-to-noise density; None when the file omits it.
    pub cn0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsEpoch {
    /// GPS seconds of week.
    pub t: f64,
    pub observations: Vec<ObsRecord>,
}

#[derive(Debug, Clone)]
pub struct ObsFile {
    pub header: ObsHeader,
    pub epochs: Vec<ObsEpoch>,
    pub errors: Vec<RinexError>,
    pub skipped_non_gps: usize,
}

/// One HAPS augmentation measurement row.
#[derive(Debug, Clone, PartialEq)]
pub struct HapsRow {
    pub t_gps_s: f64,
    pub haps_id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub pseudorange_m: f64,
    pub cn0_dbhz: f64,
}

pub const HAPS_SIDECAR_HEADER: &str = "t_gps_s,haps_id,x_m,y_m,z_m,pseudorange_m,cn0_dbhz";

#[derive(Debug, Clone, Default)]
pub struct HapsSidecar {
    pub rows: Vec<HapsRow>,
}

impl HapsSidecar {
    /// Rows grouped by timestamp, in time order.
    pub fn epochs(&self) -> BTreeMap<i64, Vec<&HapsRow>> {
        let mut out: BTreeMap<i64, Vec<&HapsRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry((r.t_gps_s * 1000.0).round() as i64).or_default().push(r);
        }
        out
    }

    pub fn rows_at(&self, t: f64, tolerance: f64) -> Vec<&HapsRow> {
        self.rows.iter().filter(|r| (r.t_gps_s - t).abs() <= tolerance).collect()
    }

    /// Every sidecar timestamp must land within half an epoch interval of
    /// some observation epoch.
    pub fn check_alignment(&self, obs: &ObsFile, interval: f64) -> Result<(), RinexError> {
        let tol = 0.5 * interval;
        for r in &self.rows {
            if !obs.epochs.iter().any(|e| (e.t - r.t_gps_s).abs() <= tol) {
                return Err(RinexError::TimestampMisaligned(r.t_gps_s));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HAPS_SIDECAR_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.t_gps_s, r.haps_id, r.x_m, r.y_m, r.z_m, r.pseudorange_m, r.cn0_dbhz
            ));
        }
        out
    }
}

/// Fortran 'D' exponents normalized, then standard float parsing.
fn parse_float(field: &str) -> Result<f64, String> {
    let t = field.trim();
    if t.is_empty() {
        return Err("empty numeric field".into());
    }
    t.replace(['D', 'd'], "E")
        .parse::<f64>()
        .map_err(|e| format!("bad float {t:?}: {e}"))
}

fn slice(line: &str, start: usize, width: usize) -> &str {
    let chars: &str = line;
    let len = chars.len();
    if start >= len {
        return "";
    }
    &chars[start..(start + width).min(len)]
}

/// Days from civil date; Gregorian, proleptic.
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = (y - era * 400) as i64;
    let mp = ((m + 9) % 12) as i64;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

/// GPS seconds of week from a civil date-time (leap seconds ignored).
pub fn gps_seconds_of_week(year: i64, month: u32, day: u32, h: u32, min: u32, s: f64) -> f64 {
    // GPS epoch: 1980-01-06
    let days = days_from_civil(year, month, day) - days_from_civil(1980, 1, 6);
    let dow = days.rem_euclid(7);
    dow as f64 * 86_400.0 + h as f64 * 3600.0 + min as f64 * 60.0 + s
}

fn two_digit_year(yy: i64) -> i64 {
    if yy >= 80 { 1900 + yy } else { 2000 + yy }
}

fn parse_version(line: &str) -> Result<f64, RinexError> {
    parse_float(slice(line, 0, 9))
        .map_err(|e| RinexError::MalformedHeader(format!("version: {e}")))
}

fn parse_ion_quad(line: &str) -> Option<[f64; 4]> {
    // v2 ION ALPHA/BETA: four D12.4 fields starting at column 2
    let mut out = [0.0; 4];
    for (i, v) in out.iter_mut().enumerate() {
        *v = parse_float(slice(line, 2 + 12 * i, 12)).ok()?;
    }
    Some(out)
}

fn parse_iono_corr(line: &str) -> Option<[f64; 4]> {
    // v3 IONOSPHERIC CORR: four 12.4 fields starting at column 5
    let mut out = [0.0; 4];
    for (i, v) in out.iter_mut().enumerate() {
        *v = parse_float(slice(line, 5 + 12 * i, 12)).ok()?;
    }
    Some(out)
}

/// Parse a RINEX 2.11 or 3.0x GPS navigation file.
pub fn parse_nav(text: &str) -> Result<NavFile, RinexError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut version = 0.0;
    let mut leap = None;
    let mut alpha: Option<[f64; 4]> = None;
    let mut beta: Option<[f64; 4]> = None;
    let mut body_start = None;

    for (i, line) in lines.iter().enumerate() {
        let label = slice(line, 60, 20).trim();
        match label {
            "RINEX VERSION / TYPE" => version = parse_version(line)?,
            "LEAP SECONDS" => leap = parse_float(slice(line, 0, 6)).ok().map(|v| v as i32),
            "ION ALPHA" => alpha = parse_ion_quad(line),
            "ION BETA" => beta = parse_ion_quad(line),
            "IONOSPHERIC CORR" => {
                let kind = slice(line, 0, 4).trim();
                if kind == "GPSA" {
                    alpha = parse_iono_corr(line);
                } else if kind == "GPSB" {
                    beta = parse_iono_corr(line);
                }
            }
            "END OF HEADER" => {
                body_start = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let body_start =
        body_start.ok_or_else(|| RinexError::MalformedHeader("missing END OF HEADER".into()))?;
    if version == 0.0 {
        return Err(RinexError::MalformedHeader("missing RINEX VERSION / TYPE".into()));
    }
    let v3 = version >= 3.0;

    let klobuchar = match (alpha, beta) {
        (Some(a), Some(b)) => Some(KlobucharCoefficients { alpha: a, beta: b }),
        _ => None,
    };

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut skipped_non_gps = 0usize;
    let mut i = body_start;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        if i + 7 >= lines.len() + 1 && lines.len() - i < 8 {
            errors.push(RinexError::MalformedRecord {
                line: i + 1,
                message: "truncated record".into(),
            });
            break;
        }
        if v3 {
            let sys = slice(lines[i], 0, 1);
            if sys != "G" {
                skipped_non_gps += 1;
                i += 8;
                continue;
            }
        }
        match parse_nav_record(&lines[i..i + 8], v3) {
            Ok(rec) => records.push(rec),
            Err(message) => errors.push(RinexError::MalformedRecord { line: i + 1, message }),
        }
        i += 8;
    }

    Ok(NavFile {
        header: NavHeader { version, leap_seconds: leap, klobuchar },
        records,
        errors,
        skipped_non_gps,
    })
}

fn parse_nav_record(block: &[&str], v3: bool) -> Result<EphemerisRecord, String> {
    let clock = block[0];
    let (prn, clock_fields_start) = if v3 {
        let prn: u8 = slice(clock, 1, 2).trim().parse().map_err(|_| "bad PRN".to_string())?;
        (prn, 23)
    } else {
        let prn: u8 = slice(clock, 0, 2).trim().parse().map_err(|_| "bad PRN".to_string())?;
        (prn, 22)
    };
    let af: Vec<f64> = (0..3)
        .map(|k| parse_float(slice(clock, clock_fields_start + 19 * k, 19)))
        .collect::<Result<_, _>>()?;

    let indent = if v3 { 4 } else { 3 };
    let field = |row: usize, col: usize| -> Result<f64, String> {
        parse_float(slice(block[row], indent + 19 * col, 19))
    };

    Ok(EphemerisRecord {
        prn,
        crs: field(1, 1)?,
        delta_n: field(1, 2)?,
        m0: field(1, 3)?,
        cuc: field(2, 0)?,
        e: field(2, 1)?,
        cus: field(2, 2)?,
        sqrt_a: field(2, 3)?,
        toe: field(3, 0)?,
        cic: field(3, 1)?,
        omega0: field(3, 2)?,
        cis: field(3, 3)?,
        i0: field(4, 0)?,
        crc: field(4, 1)?,
        omega: field(4, 2)?,
        omega_dot: field(4, 3)?,
        i_dot: field(5, 0)?,
        week: field(5, 2)? as u16,
        af0: af[0],
        af1: af[1],
        af2: af[2],
    })
}

/// Parse a RINEX 2.11 or 3.0x observation file, keeping C1/C1C and
/// S1/S1C for GPS satellites only.
pub fn parse_obs(text: &str) -> Result<ObsFile, RinexError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut version = 0.0;
    let mut approx = None;
    let mut obs_types: Vec<String> = Vec::new();
    let mut body_start = None;

    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let label = slice(line, 60, 20).trim();
        match label {
            "RINEX VERSION / TYPE" => version = parse_version(line)?,
            "APPROX POSITION XYZ" => {
                let coords: Vec<f64> = (0..3)
                    .filter_map(|k| parse_float(slice(line, 14 * k, 14)).ok())
                    .collect();
                if coords.len() == 3 {
                    approx = Some(EcefPosition::new(coords[0], coords[1], coords[2]));
                }
            }
            "# / TYPES OF OBSERV" => {
                // v2: count at cols 0..6, then up to 9 types of width 6
                for k in 0..9 {
                    let t = slice(line, 6 + 6 * k, 6).trim();
                    if !t.is_empty() {
                        obs_types.push(t.to_string());
                    }
                }
            }
            "SYS / # / OBS TYPES" => {
                if slice(line, 0, 1) == "G" || (slice(line, 0, 1) == " " && !obs_types.is_empty())
                {
                    for k in 0..13 {
                        let t = slice(line, 7 + 4 * k, 3).trim();
                        if !t.is_empty() {
                            obs_types.push(t.to_string());
                        }
                    }
                }
            }
            "END OF HEADER" => {
                body_start = Some(i + 1);
                break;
            }
            _ => {}
        }
        i += 1;
    }
    let body_start =
        body_start.ok_or_else(|| RinexError::MalformedHeader("missing END OF HEADER".into()))?;
    if version == 0.0 {
        return Err(RinexError::MalformedHeader("missing RINEX VERSION / TYPE".into()));
    }
    let v3 = version >= 3.0;

    let code_idx = obs_types.iter().position(|t| t == "C1" || t == "C1C");
    let cn0_idx = obs_types.iter().position(|t| t == "S1" || t == "S1C");
    let code_idx = code_idx
        .ok_or_else(|| RinexError::MalformedHeader("no C1/C1C observable declared".into()))?;

    let mut epochs: Vec<ObsEpoch> = Vec::new();
    let mut errors = Vec::new();
    let mut skipped_non_gps = 0usize;

    let mut i = body_start;
    while i < lines.len() {
        let line = lines[i];
        if line.trim().is_empty() {
            i += 1;
            continue;
        }
        if v3 {
            if !line.starts_with('>') {
                errors.push(RinexError::MalformedEpoch {
                    line: i + 1,
                    message: "expected '>' epoch marker".into(),
                });
                i += 1;
                continue;
            }
            let parts: Vec<&str> = line[1..].split_whitespace().collect();
            if parts.len() < 8 {
                errors.push(RinexError::MalformedEpoch {
                    line: i + 1,
                    message: "short epoch line".into(),
                });
                i += 1;
                continue;
            }
            let parse = || -> Result<(f64, usize), String> {
                let y: i64 = parts[0].parse().map_err(|_| "year")?;
                let mo: u32 = parts[1].parse().map_err(|_| "month")?;
                let d: u32 = parts[2].parse().map_err(|_| "day")?;
                let h: u32 = parts[3].parse().map_err(|_| "hour")?;
                let mi: u32 = parts[4].parse().map_err(|_| "minute")?;
                let s: f64 = parts[5].parse().map_err(|_| "second")?;
                let n: usize = parts[7].parse().map_err(|_| "count")?;
                Ok((gps_seconds_of_week(y, mo, d, h, mi, s), n))
            };
            let (t, nsat) = match parse() {
                Ok(v) => v,
                Err(m) => {
                    errors.push(RinexError::MalformedEpoch {
                        line: i + 1,
                        message: m.to_string(),
                    });
                    i += 1;
                    continue;
                }
            };
            let mut observations = Vec::new();
            for k in 0..nsat {
                let li = i + 1 + k;
                if li >= lines.len() {
                    errors.push(RinexError::MalformedEpoch {
                        line: li + 1,
                        message: "truncated epoch block".into(),
                    });
                    break;
                }
                let sl = lines[li];
                if slice(sl, 0, 1) != "G" {
                    skipped_non_gps += 1;
                    continue;
                }
                let prn: u8 = match slice(sl, 1, 2).trim().parse() {
                    Ok(p) => p,
                    Err(_) => {
                        errors.push(RinexError::MalformedEpoch {
                            line: li + 1,
                            message: "bad satellite id".into(),
                        });
                        continue;
                    }
                };
                let get = |idx: usize| parse_float(slice(sl, 3 + 16 * idx, 14)).ok();
                let Some(pr) = get(code_idx) else {
                    errors.push(RinexError::MalformedEpoch {
                        line: li + 1,
                        message: format!("G{prn:02}: missing pseudorange"),
                    });
                    continue;
                };
                let cn0 = cn0_idx.and_then(get);
                observations.push(ObsRecord { prn, pseudorange: pr, cn0 });
            }
            epochs.push(ObsEpoch { t, observations });
            i += 1 + nsat;
        } else {
            // v2 epoch line: yy mm dd hh mm ss.s  flag nsat satlist
            let head: Vec<&str> = slice(line, 0, 32).split_whitespace().collect();
            if head.len() < 8 {
                errors.push(RinexError::MalformedEpoch {
                    line: i + 1,
                    message: "short epoch line".into(),
                });
                i += 1;
                continue;
            }
            let parse = || -> Result<(f64, usize), String> {
                let y = two_digit_year(head[0].parse().map_err(|_| "year")?);
                let mo: u32 = head[1].parse().map_err(|_| "month")?;
                let d: u32 = head[2].parse().map_err(|_| "day")?;
                let h: u32 = head[3].parse().map_err(|_| "hour")?;
                let mi: u32 = head[4].parse().map_err(|_| "minute")?;
                let s: f64 = head[5].parse().map_err(|_| "second")?;
                let n: usize = head[7].parse().map_err(|_| "count")?;
                Ok((gps_seconds_of_week(y, mo, d, h, mi, s), n))
            };
            let (t, nsat) = match parse() {
                Ok(v) => v,
                Err(m) => {
                    errors.push(RinexError::MalformedEpoch {
                        line: i + 1,
                        message: m.to_string(),
                    });
                    i += 1;
                    continue;
                }
            };
            // satellite list, 12 ids per line
            let mut ids = Vec::new();
            let mut list_lines = 0;
            while ids.len() < nsat {
                let src = lines.get(i + list_lines).copied().unwrap_or("");
                for k in 0..12usize.min(nsat - ids.len()) {
                    ids.push(slice(src, 32 + 3 * k, 3).to_string());
                }
                list_lines += 1;
            }
            let lines_per_sat = obs_types.len().div_ceil(5);
            let mut observations = Vec::new();
            for (k, id) in ids.iter().enumerate() {
                let base = i + list_lines + k * lines_per_sat;
                if slice(id, 0, 1) != "G" && slice(id, 0, 1) != " " {
                    skipped_non_gps += 1;
                    continue;
                }
                let prn: u8 = match slice(id, 1, 2).trim().parse() {
                    Ok(p) => p,
                    Err(_) => {
                        errors.push(RinexError::MalformedEpoch {
                            line: base + 1,
                            message: "bad satellite id".into(),
                        });
                        continue;
                    }
                };
                let get = |idx: usize| -> Option<f64> {
                    let row = lines.get(base + idx / 5).copied().unwrap_or("");
                    parse_float(slice(row, 16 * (idx % 5), 14)).ok()
                };
                let Some(pr) = get(code_idx) else {
                    errors.push(RinexError::MalformedEpoch {
                        line: base + 1,
                        message: format!("G{prn:02}: missing pseudorange"),
                    });
                    continue;
                };
                let cn0 = cn0_idx.and_then(get);
                observations.push(ObsRecord { prn, pseudorange: pr, cn0 });
            }
            epochs.push(ObsEpoch { t, observations });
            i += list_lines + ids.len() * lines_per_sat;
        }
    }

    Ok(ObsFile {
        header: ObsHeader { version, approx_position: approx, obs_types },
        epochs,
        errors,
        skipped_non_gps,
    })
}

/// Record with the smallest |t - toe| for a PRN; ties go to the later
/// record. Fails when nothing lies within 4 h.
pub fn select_ephemeris<'a>(
    nav: &'a NavFile,
    prn: u8,
    t: f64,
) -> Result<&'a EphemerisRecord, RinexError> {
    nav.records
        .iter()
        .filter(|r| r.prn == prn)
        .filter(|r| (t - r.toe).abs() < EPHEMERIS_WINDOW_S)
        .min_by(|a, b| {
            let da = (t - a.toe).abs();
            let db = (t - b.toe).abs();
            da.partial_cmp(&db).unwrap().then(b.toe.partial_cmp(&a.toe).unwrap())
        })
        .ok_or(RinexError::NoEphemeris(prn))
}

/// Parse and validate the HAPS sidecar CSV.
pub fn load_haps_sidecar(text: &str) -> Result<HapsSidecar, RinexError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| RinexError::SchemaError { row: 0, message: "empty file".into() })?;
    if header.trim() != HAPS_SIDECAR_HEADER {
        return Err(RinexError::SchemaError {
            row: 0,
            message: format!("expected header {HAPS_SIDECAR_HEADER:?}, got {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(RinexError::SchemaError {
                row: ln,
                message: format!("expected 7 columns, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64, RinexError> {
            fields[i].trim().parse::<f64>().map_err(|e| RinexError::SchemaError {
                row: ln,
                message: format!("column {}: {e}", i + 1),
            })
        };
        let row = HapsRow {
            t_gps_s: num(0)?,
            haps_id: fields[1].trim().to_string(),
            x_m: num(2)?,
            y_m: num(3)?,
            z_m: num(4)?,
            pseudorange_m: num(5)?,
            cn0_dbhz: num(6)?,
        };
        if row.haps_id.is_empty() {
            return Err(RinexError::SchemaError { row: ln, message: "empty haps_id".into() });
        }
        if row.pseudorange_m <= 0.0 {
            return Err(RinexError::SchemaError {
                row: ln,
                message: format!("non-positive pseudorange {}", row.pseudorange_m),
            });
        }
        rows.push(row);
    }
    Ok(HapsSidecar { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{geodetic_to_ecef, GeodeticPosition};
    use crate::orbits::{haps_position, propagate_ephemeris, HapsPlatform, SourceKind};
    use crate::scenario::Observation;
    use crate::solver::{emission_range, solve_epoch, SolverSettings, ZeroDelays};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d19(v: f64) -> String {
        // 19-char Fortran-style D-exponent field
        let s = format!("{v:.12E}");
        let (mant, exp) = s.split_once('E').unwrap();
        let exp: i32 = exp.parse().unwrap();
        format!("{:>19}", format!("{mant}D{exp:+03}"))
    }

    fn nav_v3_record(prn: u8, toe: f64, sqrt_a: f64, week: u16) -> String {
        let z = d19(0.0);
        let mut out = String::new();
        out.push_str(&format!(
            "G{prn:02} 2024 01 07 00 00 00{}{}{}\n",
            d19(1.0e-5),
            d19(2.0e-12),
            z
        ));
        // iode, crs, delta_n, m0
        out.push_str(&format!("    {}{}{}{}\n", d19(10.0), d19(12.5), d19(4.5e-9), d19(0.7)));
        // cuc, e, cus, sqrt_a
        out.push_str(&format!("    {}{}{}{}\n", d19(1.0e-6), d19(0.01), d19(8.0e-6), d19(sqrt_a)));
        // toe, cic, omega0, cis
        out.push_str(&format!("    {}{}{}{}\n", d19(toe), d19(2.0e-8), d19(1.2), d19(-1.0e-8)));
        // i0, crc, omega, omega_dot
        out.push_str(&format!("    {}{}{}{}\n", d19(0.96), d19(250.0), d19(0.5), d19(-8.0e-9)));
        // idot, codes, week, l2p
        out.push_str(&format!("    {}{}{}{}\n", d19(3.0e-10), z, d19(week as f64), z));
        out.push_str(&format!("    {}{}{}{}\n", z, z, d19(4.5), z));
        out.push_str(&format!("    {}{}\n", z, z));
        out
    }

    fn nav_v3_header() -> String {
        let mut h = String::new();
        h.push_str(&format!("{:<60}RINEX VERSION / TYPE\n", "     3.04           N: GNSS NAV DATA    G: GPS"));
        h.push_str(&format!(
            "{:<60}IONOSPHERIC CORR\n",
            format!(
                "GPSA {:>12.4E}{:>12.4E}{:>12.4E}{:>12.4E}",
                1.1176e-8, 7.4506e-9, -5.9605e-8, -5.9605e-8
            )
        ));
        h.push_str(&format!(
            "{:<60}IONOSPHERIC CORR\n",
            format!(
                "GPSB {:>12.4E}{:>12.4E}{:>12.4E}{:>12.4E}",
                90112.0, 16384.0, -131072.0, -65536.0
            )
        ));
        h.push_str(&format!("{:<60}LEAP SECONDS\n", "    18"));
        h.push_str(&format!("{:<60}END OF HEADER\n", ""));
        h
    }

    #[test]
    fn nav_single_record_round_trip() {
        let text = nav_v3_header() + &nav_v3_record(7, 432_000.0, 5153.7, 2300);
        let nav = parse_nav(&text).unwrap();
        assert_eq!(nav.header.version, 3.04);
        assert_eq!(nav.header.leap_seconds, Some(18));
        assert!(nav.errors.is_empty());
        assert_eq!(nav.records.len(), 1);
        let r = &nav.records[0];
        assert_eq!(r.prn, 7);
        assert_relative_eq!(r.toe, 432_000.0);
        assert_relative_eq!(r.sqrt_a, 5153.7);
        assert_relative_eq!(r.e, 0.01);
        assert_relative_eq!(r.crs, 12.5);
        assert_relative_eq!(r.af0, 1.0e-5);
        assert_eq!(r.week, 2300);
        let k = nav.header.klobuchar.unwrap();
        assert_relative_eq!(k.alpha[0], 1.1176e-8, max_relative = 1e-3);
        assert_relative_eq!(k.beta[2], -131072.0, max_relative = 1e-3);
    }

    #[test]
    fn nav_empty_body() {
        let nav = parse_nav(&nav_v3_header()).unwrap();
        assert!(nav.records.is_empty());
        assert!(nav.errors.is_empty());
    }

    #[test]
    fn nav_mangled_record_skipped_with_line_number() {
        let good = nav_v3_record(7, 432_000.0, 5153.7, 2300);
        let bad = nav_v3_record(9, 432_000.0, 5153.7, 2300).replace("5.153", "5.!53");
        let text = nav_v3_header() + &bad + &good;
        let nav = parse_nav(&text).unwrap();
        assert_eq!(nav.records.len(), 1);
        assert_eq!(nav.records[0].prn, 7);
        assert_eq!(nav.errors.len(), 1);
        // header is 5 lines, so the bad record starts at line 6
        assert!(matches!(nav.errors[0], RinexError::MalformedRecord { line: 6, .. }));
    }

    #[test]
    fn nav_non_gps_skipped() {
        let glonass = nav_v3_record(5, 432_000.0, 5153.7, 2300).replacen('G', "R", 1);
        let text = nav_v3_header() + &glonass + &nav_v3_record(7, 432_000.0, 5153.7, 2300);
        let nav = parse_nav(&text).unwrap();
        assert_eq!(nav.records.len(), 1);
        assert_eq!(nav.skipped_non_gps, 1);
    }

    #[test]
    fn parsed_ephemeris_propagates_sanely() {
        let text = nav_v3_header() + &nav_v3_record(7, 432_000.0, 5153.7, 2300);
        let nav = parse_nav(&text).unwrap();
        let r = &nav.records[0];
        let a = r.sqrt_a * r.sqrt_a;
        let s0 = propagate_ephemeris(r, 432_000.0).unwrap();
        let s1 = propagate_ephemeris(r, 432_001.0).unwrap();
        let radius = s0.position.norm();
        assert!((radius - a).abs() < 0.02 * a, "radius = {radius}");
        let speed = s0.position.distance_to(&s1.position);
        assert!(speed < 4200.0, "speed = {speed}");
    }

    #[test]
    fn select_ephemeris_nearest_and_window() {
        let text = nav_v3_header()
            + &nav_v3_record(7, 0.0, 5153.7, 2300)
            + &nav_v3_record(7, 7200.0, 5153.8, 2300);
        let nav = parse_nav(&text).unwrap();
        assert_relative_eq!(select_ephemeris(&nav, 7, 3000.0).unwrap().toe, 0.0);
        assert_relative_eq!(select_ephemeris(&nav, 7, 3601.0).unwrap().toe, 7200.0);
        // tie broken toward the later record
        assert_relative_eq!(select_ephemeris(&nav, 7, 3600.0).unwrap().toe, 7200.0);
        assert!(matches!(select_ephemeris(&nav, 9, 3000.0), Err(RinexError::NoEphemeris(9))));
        assert!(matches!(
            select_ephemeris(&nav, 7, 7200.0 + 20_000.0),
            Err(RinexError::NoEphemeris(7))
        ));
    }

    fn obs_v3_fixture() -> String {
        let mut t = String::new();
        t.push_str(&format!("{:<60}RINEX VERSION / TYPE\n", "     3.04           OBSERVATION DATA    G"));
        t.push_str(&format!("{:<60}SYS / # / OBS TYPES\n", "G    3 C1C L1C S1C"));
        t.push_str(&format!("{:<60}END OF HEADER\n", ""));
        for (k, sec) in [0.0f64, 1.0].iter().enumerate() {
            t.push_str(&format!("> 2024 01 07 00 00 {sec:2.0}  0  6\n"));
            for prn in 1..=5u8 {
                let pr = 2.0e7 + 1000.0 * prn as f64 + k as f64;
                let cn0 = 40.0 + prn as f64;
                t.push_str(&format!("G{prn:02}{pr:14.3}  {:14.3}  {cn0:14.3}\n", 1.0e8));
            }
            t.push_str(&format!("R05{:14.3}  {:14.3}  {:14.3}\n", 2.3e7, 1.0e8, 41.0));
        }
        t
    }

    #[test]
    fn obs_two_epochs_five_sats() {
        let obs = parse_obs(&obs_v3_fixture()).unwrap();
        assert_eq!(obs.epochs.len(), 2);
        assert_eq!(obs.skipped_non_gps, 2);
        assert!(obs.errors.is_empty());
        for (k, e) in obs.epochs.iter().enumerate() {
            assert_eq!(e.observations.len(), 5);
            assert_relative_eq!(e.observations[0].pseudorange, 2.0e7 + 1000.0 + k as f64);
            assert_eq!(e.observations[2].cn0, Some(43.0));
        }
        // 2024-01-07 is a GPS Sunday: seconds of week restart
        assert_relative_eq!(obs.epochs[0].t, 0.0);
        assert_relative_eq!(obs.epochs[1].t, 1.0);
    }

    #[test]
    fn obs_missing_cn0_kept_as_none() {
        let text = obs_v3_fixture().replace(
            &format!("{:14.3}", 43.0),
            &" ".repeat(14),
        );
        let obs = parse_obs(&text).unwrap();
        let e = &obs.epochs[0];
        assert_eq!(e.observations[2].prn, 3);
        assert_eq!(e.observations[2].cn0, None);
        assert!(e.observations[2].pseudorange > 1.0e7);
    }

    #[test]
    fn obs_v2_fixture_parses() {
        let mut t = String::new();
        t.push_str(&format!("{:<60}RINEX VERSION / TYPE\n", "     2.11           OBSERVATION DATA    G"));
        t.push_str(&format!("{:<60}# / TYPES OF OBSERV\n", "     3    C1    L1    S1"));
        t.push_str(&format!("{:<60}END OF HEADER\n", ""));
        t.push_str(&format!("{:<32}", " 24  1  7  0  0  0.0000000  0  2"));
        t.push_str("G02G04\n");
        t.push_str(&format!("{:14.3}  {:14.3}  {:14.3}\n", 2.1e7, 1.1e8, 44.0));
        t.push_str(&format!("{:14.3}  {:14.3}  {:14.3}\n", 2.2e7, 1.2e8, 46.0));
        let obs = parse_obs(&t).unwrap();
        assert_eq!(obs.epochs.len(), 1);
        let e = &obs.epochs[0];
        assert_eq!(e.observations.len(), 2);
        assert_eq!(e.observations[0].prn, 2);
        assert_relative_eq!(e.observations[0].pseudorange, 2.1e7);
        assert_eq!(e.observations[1].cn0, Some(46.0));
    }

    #[test]
    fn sidecar_round_trip_and_grouping() {
        let mut rows = Vec::new();
        for epoch in 0..10 {
            for h in 1..=6 {
                rows.push(HapsRow {
                    t_gps_s: epoch as f64,
                    haps_id: format!("H{h:02}"),
                    x_m: 1.1e6 + h as f64,
                    y_m: -4.3e6,
                    z_m: 4.5e6,
                    pseudorange_m: 2.0e4 + epoch as f64,
                    cn0_dbhz: 50.0,
                });
            }
        }
        let sidecar = HapsSidecar { rows };
        let parsed = load_haps_sidecar(&sidecar.to_csv()).unwrap();
        assert_eq!(parsed.rows.len(), 60);
        assert_eq!(parsed.epochs().len(), 10);
        for (a, b) in sidecar.rows.iter().zip(&parsed.rows) {
            assert!((a.t_gps_s - b.t_gps_s).abs() < 1e-9);
            assert_eq!(a.haps_id, b.haps_id);
            assert!((a.x_m - b.x_m).abs() < 1e-9);
            assert!((a.pseudorange_m - b.pseudorange_m).abs() < 1e-9);
        }
    }

    #[test]
    fn sidecar_rejects_bad_rows() {
        let bad_header = "time,id,x,y,z,pr,cn0\n1,H01,1,2,3,4,5\n";
        assert!(matches!(
            load_haps_sidecar(bad_header),
            Err(RinexError::SchemaError { row: 0, .. })
        ));

        let neg = format!("{HAPS_SIDECAR_HEADER}\n1.0,H01,1.0,2.0,3.0,-5.0,50.0\n");
        assert!(matches!(load_haps_sidecar(&neg), Err(RinexError::SchemaError { row: 1, .. })));

        let short = format!("{HAPS_SIDECAR_HEADER}\n1.0,H01,1.0,2.0\n");
        assert!(matches!(load_haps_sidecar(&short), Err(RinexError::SchemaError { row: 1, .. })));
    }

    #[test]
    fn sidecar_alignment_check() {
        let obs = ObsFile {
            header: ObsHeader { version: 3.04, approx_position: None, obs_types: vec![] },
            epochs: (0..5).map(|k| ObsEpoch { t: k as f64, observations: vec![] }).collect(),
            errors: vec![],
            skipped_non_gps: 0,
        };
        let good = HapsSidecar {
            rows: vec![HapsRow {
                t_gps_s: 2.1,
                haps_id: "H01".into(),
                x_m: 0.0,
                y_m: 0.0,
                z_m: 0.0,
                pseudorange_m: 2.0e4,
                cn0_dbhz: 50.0,
            }],
        };
        assert!(good.check_alignment(&obs, 1.0).is_ok());
        let bad = HapsSidecar {
            rows: vec![HapsRow { t_gps_s: 7.3, ..good.rows[0].clone() }],
        };
        assert!(matches!(
            bad.check_alignment(&obs, 1.0),
            Err(RinexError::TimestampMisaligned(_))
        ));
    }

    #[test]
    fn synthesized_sidecar_feeds_solver() {
        // sidecar built from truth must solve like simulated observations
        let truth = geodetic_to_ecef(&GeodeticPosition::from_degrees(45.3876, -75.696, 70.0));
        let platforms: Vec<HapsPlatform> = crate::orbits::reference_haps_layout(
            &GeodeticPosition::from_degrees(45.3876, -75.696, 70.0),
            20_000.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for p in &platforms {
            let state = haps_position(p, 0.0);
            let (rho, _) = emission_range(&truth, &state.position);
            rows.push(HapsRow {
                t_gps_s: 0.0,
                haps_id: p.id.clone(),
                x_m: state.position.x,
                y_m: state.position.y,
                z_m: state.position.z,
                pseudorange_m: rho + 2.0 * rng.gen_range(-1.0f64..1.0),
                cn0_dbhz: 50.0,
            });
        }
        let sidecar = load_haps_sidecar(&(HapsSidecar { rows }).to_csv()).unwrap();

        // GPS backbone plus the parsed HAPS augmentation rows
        let mut obs = Vec::new();
        let mut sources = Vec::new();
        for s in crate::orbits::synth_constellation(6, 4, 26_560_000.0, 55f64.to_radians(), 0.0) {
            let (el, _) = match crate::frames::elevation_azimuth(&truth, &s.position) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if el < 15f64.to_radians() {
                continue;
            }
            let (rho, _) = emission_range(&truth, &s.position);
            obs.push(Observation {
                source_id: s.id.clone(),
                kind: SourceKind::Satellite,
                epoch: 0.0,
                pseudorange: rho + 2.0 * rng.gen_range(-1.0f64..1.0),
                cn0: 45.0,
                truth: None,
            });
            sources.push(s);
        }
        for r in sidecar.rows_at(0.0, 0.5) {
            sources.push(crate::orbits::SourceState {
                id: r.haps_id.clone(),
                kind: SourceKind::Haps,
                position: EcefPosition::new(r.x_m, r.y_m, r.z_m),
                clock_offset: 0.0,
            });
            obs.push(Observation {
                source_id: r.haps_id.clone(),
                kind: SourceKind::Haps,
                epoch: r.t_gps_s,
                pseudorange: r.pseudorange_m,
                cn0: r.cn0_dbhz,
                truth: None,
            });
        }
        let settings = SolverSettings { elevation_mask: 0.0, ..SolverSettings::default() };
        let sol = solve_epoch(&obs, &sources, &ZeroDelays, &settings).unwrap();
        assert!(sol.converged);
        assert!(truth.distance_to(&sol.position) < 50.0);
    }
}
