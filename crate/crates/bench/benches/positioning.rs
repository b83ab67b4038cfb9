use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hapsnav::frames::{ecef_to_geodetic, geodetic_to_ecef, ned_rotation};
use hapsnav::harness::{run_campaign, SystemVariant};
use hapsnav::orbits::{synth_constellation, SourceKind, SourceState};
use hapsnav::raim::solve_epoch_raim;
use hapsnav::scenario::{Observation, RaimConfig, ScenarioConfig};
use hapsnav::solver::{emission_range, solve_epoch, SolverSettings, ZeroDelays};
use hapsnav::{EcefPosition, GeodeticPosition};

fn test_scene(n: usize) -> (EcefPosition, Vec<SourceState>, Vec<Observation>) {
    let rx = geodetic_to_ecef(&GeodeticPosition::from_degrees(45.4215, -75.6972, 70.0));
    let geo = ecef_to_geodetic(&rx).unwrap();
    let r = ned_rotation(&geo);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let sources: Vec<SourceState> = (0..n)
        .map(|i| {
            let el = rng.gen_range(0.35f64..1.5);
            let az = rng.gen_range(-3.1f64..3.1);
            let dir = r.matrix().transpose()
                * nalgebra_vec(az.sin() * el.cos(), az.cos() * el.cos(), el.sin());
            SourceState {
                id: format!("S{i:02}"),
                kind: SourceKind::Satellite,
                position: EcefPosition::from_vector(rx.as_vector() + dir * 2.2e7),
                clock_offset: 0.0,
            }
        })
        .collect();
    let observations = sources
        .iter()
        .map(|s| {
            let (rho, _) = emission_range(&rx, &s.position);
            Observation {
                source_id: s.id.clone(),
                kind: s.kind,
                epoch: 0.0,
                pseudorange: rho + rng.gen_range(-5.0..5.0),
                cn0: 45.0,
                truth: None,
            }
        })
        .collect();
    (rx, sources, observations)
}

fn nalgebra_vec(x: f64, y: f64, z: f64) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(x, y, z)
}

fn bench_solve_epoch(c: &mut Criterion) {
    let (_, sources, obs) = test_scene(8);
    let settings = SolverSettings { elevation_mask: 0.0, ..SolverSettings::default() };
    c.bench_function("solve_epoch_8_sources", |b| {
        b.iter(|| solve_epoch(&obs, &sources, &ZeroDelays, &settings).unwrap())
    });
}

fn bench_solve_raim(c: &mut Criterion) {
    let (_, sources, mut obs) = test_scene(8);
    obs[3].pseudorange += 100.0;
    let settings = SolverSettings { elevation_mask: 0.0, ..SolverSettings::default() };
    let cfg = RaimConfig::default();
    c.bench_function("solve_epoch_raim_8_sources_one_fault", |b| {
        b.iter(|| solve_epoch_raim(&obs, &sources, &ZeroDelays, &settings, &cfg).unwrap())
    });
}

fn bench_constellation(c: &mut Criterion) {
    c.bench_function("synth_constellation_24", |b| {
        b.iter(|| synth_constellation(6, 4, 26_560_000.0, 55f64.to_radians(), 1234.5))
    });
}

fn bench_campaign(c: &mut Criterion) {
    let cfg = ScenarioConfig { epochs: 50, ..ScenarioConfig::default() };
    let variants = [SystemVariant::gps_plus_haps(6)];
    c.bench_function("campaign_50_epochs_gps6haps", |b| {
        b.iter(|| run_campaign(&cfg, &variants, &[1]).unwrap())
    });
}

criterion_group!(
    benches,
    bench_solve_epoch,
    bench_solve_raim,
    bench_constellation,
    bench_campaign
);
criterion_main!(benches);
