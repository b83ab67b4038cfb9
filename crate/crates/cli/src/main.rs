use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hapsnav::constants::SPEED_OF_LIGHT;
use hapsnav::harness::{
    self, cdf_csv, dop_grid, dopgrid_csv, epochs_csv, run_campaign, summary_json, GridSpec,
    SystemVariant,
};
use hapsnav::orbits::{propagate_ephemeris, SourceKind, SourceState};
use hapsnav::raim::solve_epoch_raim;
use hapsnav::rinex::{load_haps_sidecar, parse_nav, parse_obs, select_ephemeris};
use hapsnav::scenario::{Observation, RaimConfig, ScenarioConfig};
use hapsnav::solver::{solve_epoch, ModelDelays, SolverSettings};
use hapsnav::EcefPosition;

#[derive(Parser)]
#[command(name = "hapsnav", about = "HAPS-aided GPS positioning toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated positioning campaign.
    Sim {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list, e.g. 1,2,3.
        #[arg(long)]
        seeds: String,
        /// Comma-separated variant names, e.g. gps,gps+6haps+raim.
        #[arg(long)]
        variants: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Position from RINEX observation + navigation files.
    Rinex {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        nav: PathBuf,
        /// HAPS augmentation sidecar CSV.
        #[arg(long)]
        haps: Option<PathBuf>,
        #[arg(long)]
        raim: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit a DOP map over a latitude/longitude grid.
    Dopmap {
        #[arg(long)]
        config: PathBuf,
        /// latmin,latmax,lonmin,lonmax,step in degrees.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(kind: &str, message: impl ToString) -> ExitCode {
    let payload = serde_json::json!({
        "error": { "kind": kind, "message": message.to_string() }
    });
    eprintln!("{payload}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Sim { config, seeds, variants, out } => run_sim(&config, &seeds, &variants, &out),
        Command::Rinex { obs, nav, haps, raim, out } => {
            run_rinex(&obs, &nav, haps.as_deref(), raim, &out)
        }
        Command::Dopmap { config, grid, out } => run_dopmap(&config, &grid, &out),
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("seed {s:?}: {e}")))
        .collect()
}

fn run_sim(config: &Path, seeds: &str, variants: &str, out: &Path) -> ExitCode {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => return fail("io", format!("{}: {e}", config.display())),
    };
    let cfg = match ScenarioConfig::from_toml(&text) {
        Ok(c) => c,
        Err(e) => return fail("config", e),
    };
    let seeds = match parse_seeds(seeds) {
        Ok(s) => s,
        Err(e) => return fail("args", e),
    };
    let variants: Vec<SystemVariant> = match variants
        .split(',')
        .map(|v| SystemVariant::parse(v.trim()))
        .collect::<Result<_, _>>()
    {
        Ok(v) => v,
        Err(e) => return fail("args", e),
    };
    let results = match run_campaign(&cfg, &variants, &seeds) {
        Ok(r) => r,
        Err(e) => return fail("campaign", e),
    };
    if let Err(e) = fs::create_dir_all(out) {
        return fail("io", format!("{}: {e}", out.display()));
    }
    for r in &results {
        let path = out.join(format!("epochs_{}_{}.csv", r.variant, r.seed));
        if let Err(e) = fs::write(&path, epochs_csv(r)) {
            return fail("io", format!("{}: {e}", path.display()));
        }
    }
    for v in &variants {
        let cell: Vec<&harness::CampaignResult> =
            results.iter().filter(|r| r.variant == v.name).collect();
        let path = out.join(format!("cdf_{}.csv", v.name));
        if let Err(e) = fs::write(&path, cdf_csv(&cell)) {
            return fail("io", format!("{}: {e}", path.display()));
        }
    }
    if let Err(e) = fs::write(out.join("summary.json"), summary_json(&results)) {
        return fail("io", e);
    }
    ExitCode::SUCCESS
}

fn run_rinex(obs: &Path, nav: &Path, haps: Option<&Path>, raim: bool, out: &Path) -> ExitCode {
    let obs_text = match fs::read_to_string(obs) {
        Ok(t) => t,
        Err(e) => return fail("io", format!("{}: {e}", obs.display())),
    };
    let nav_text = match fs::read_to_string(nav) {
        Ok(t) => t,
        Err(e) => return fail("io", format!("{}: {e}", nav.display())),
    };
    let obs_file = match parse_obs(&obs_text) {
        Ok(f) => f,
        Err(e) => return fail("rinex", e),
    };
    let nav_file = match parse_nav(&nav_text) {
        Ok(f) => f,
        Err(e) => return fail("rinex", e),
    };
    let sidecar = match haps {
        Some(p) => {
            let text = match fs::read_to_string(p) {
                Ok(t) => t,
                Err(e) => return fail("io", format!("{}: {e}", p.display())),
            };
            match load_haps_sidecar(&text) {
                Ok(s) => Some(s),
                Err(e) => return fail("sidecar", e),
            }
        }
        None => None,
    };
    let interval = if obs_file.epochs.len() >= 2 {
        (obs_file.epochs[1].t - obs_file.epochs[0].t).abs().max(1e-3)
    } else {
        1.0
    };
    if let Some(s) = &sidecar {
        if let Err(e) = s.check_alignment(&obs_file, interval) {
            return fail("sidecar", e);
        }
    }

    let delays = ModelDelays {
        klobuchar: nav_file.header.klobuchar.unwrap_or_default(),
        ..ModelDelays::default()
    };
    let settings = SolverSettings::default();
    let raim_cfg = RaimConfig::default();

    let mut csv = String::from(
        "t,est_x,est_y,est_z,clock_s,hdop,vdop,n_sat,n_haps,converged,raim_applied\n",
    );
    let mut solved = 0usize;
    for epoch in &obs_file.epochs {
        let mut observations = Vec::new();
        let mut sources = Vec::new();
        for rec in &epoch.observations {
            let eph = match select_ephemeris(&nav_file, rec.prn, epoch.t) {
                Ok(e) => e,
                Err(_) => continue,
            };
            let t_emit = epoch.t - rec.pseudorange / SPEED_OF_LIGHT;
            let Ok(state) = propagate_ephemeris(eph, t_emit) else { continue };
            observations.push(Observation {
                source_id: state.id.clone(),
                kind: SourceKind::Satellite,
                epoch: epoch.t,
                pseudorange: rec.pseudorange,
                cn0: rec.cn0.unwrap_or(35.0),
                truth: None,
            });
            sources.push(state);
        }
        if let Some(s) = &sidecar {
            for row in s.rows_at(epoch.t, 0.5 * interval) {
                observations.push(Observation {
                    source_id: row.haps_id.clone(),
                    kind: SourceKind::Haps,
                    epoch: epoch.t,
                    pseudorange: row.pseudorange_m,
                    cn0: row.cn0_dbhz,
                    truth: None,
                });
                sources.push(SourceState {
                    id: row.haps_id.clone(),
                    kind: SourceKind::Haps,
                    position: EcefPosition::new(row.x_m, row.y_m, row.z_m),
                    clock_offset: 0.0,
                });
            }
        }
        let solution = if raim {
            solve_epoch_raim(&observations, &sources, &delays, &settings, &raim_cfg)
                .map(|(s, _)| s)
        } else {
            solve_epoch(&observations, &sources, &delays, &settings)
        };
        match solution {
            Ok(sol) => {
                solved += 1;
                let n_haps = sol
                    .used_sources
                    .iter()
                    .filter(|id| {
                        observations
                            .iter()
                            .any(|o| &o.source_id == *id && o.kind == SourceKind::Haps)
                    })
                    .count();
                csv.push_str(&format!(
                    "{:.6},{:.6},{:.6},{:.6},{:.9},{:.6},{:.6},{},{},{},{}\n",
                    epoch.t,
                    sol.position.x,
                    sol.position.y,
                    sol.position.z,
                    sol.clock_offset,
                    sol.hdop,
                    sol.vdop,
                    sol.used_sources.len() - n_haps,
                    n_haps,
                    sol.converged as u8,
                    sol.raim_applied as u8,
                ));
            }
            Err(_) => {
                csv.push_str(&format!(
                    "{:.6},nan,nan,nan,nan,nan,nan,{},0,0,0\n",
                    epoch.t,
                    observations.len(),
                ));
            }
        }
    }

    if let Err(e) = fs::create_dir_all(out) {
        return fail("io", format!("{}: {e}", out.display()));
    }
    if let Err(e) = fs::write(out.join("epochs_rinex.csv"), csv) {
        return fail("io", e);
    }
    let summary = serde_json::json!({
        "epochs": obs_file.epochs.len(),
        "solved": solved,
        "availability_pct": if obs_file.epochs.is_empty() { None } else {
            Some(100.0 * solved as f64 / obs_file.epochs.len() as f64)
        },
        "nav_parse_errors": nav_file.errors.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
        "obs_parse_errors": obs_file.errors.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
        "skipped_non_gps": obs_file.skipped_non_gps + nav_file.skipped_non_gps,
    });
    if let Err(e) = fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    ) {
        return fail("io", e);
    }
    ExitCode::SUCCESS
}

fn run_dopmap(config: &Path, grid: &str, out: &Path) -> ExitCode {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => return fail("io", format!("{}: {e}", config.display())),
    };
    let cfg = match ScenarioConfig::from_toml(&text) {
        Ok(c) => c,
        Err(e) => return fail("config", e),
    };
    let parts: Vec<f64> = match grid
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
    {
        Ok(p) => p,
        Err(e) => return fail("args", format!("grid: {e}")),
    };
    if parts.len() != 5 {
        return fail("args", "grid needs latmin,latmax,lonmin,lonmax,step");
    }
    let spec = GridSpec {
        lat_min_deg: parts[0],
        lat_max_deg: parts[1],
        lon_min_deg: parts[2],
        lon_max_deg: parts[3],
        step_deg: parts[4],
    };
    let cells = match dop_grid(&cfg, &spec) {
        Ok(c) => c,
        Err(e) => return fail("dopmap", e),
    };
    if let Err(e) = fs::create_dir_all(out) {
        return fail("io", format!("{}: {e}", out.display()));
    }
    if let Err(e) = fs::write(out.join("dopgrid.csv"), dopgrid_csv(&cells)) {
        return fail("io", e);
    }
    ExitCode::SUCCESS
}
