//! HAPS-aided GPS positioning toolkit.
//!
//! Simulates a GPS constellation augmented with high altitude platform
//! stations (HAPS) acting as extra ranging sources, solves receiver
//! positions from pseudoranges via iterative least squares, and applies a
//! C/N0-variance weighted RAIM with modified Danish reweighting. A RINEX
//! ingestion path feeds real GPS observation/navigation files through the
//! identical solver.

pub mod atmosphere;
pub mod constants;
pub mod frames;
pub mod harness;
pub mod orbits;
pub mod raim;
pub mod rinex;
pub mod scenario;
pub mod solver;

pub use constants::PhysicalConstants;
pub use frames::{EcefPosition, GeodeticPosition, RotationMatrix3};
pub use orbits::{EphemerisRecord, HapsPlatform, SourceKind, SourceState};
pub use scenario::{EnvironmentModel, Observation, ScenarioConfig};
pub use solver::EpochSolution;
