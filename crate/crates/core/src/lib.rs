//! Debiased sieve estimation of conditional treatment effects under
//! two-way clustering, with multiway cluster-robust uniform bands.

pub mod bootstrap;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod nuisance;
pub mod pipeline;
pub mod rng;
pub mod sieve;
pub mod signals;
pub mod simulation;

pub use bootstrap::{build_bands, BandConfig, BandMethod, BandResult, ScoreProcess, VarianceMode};
pub use config::RunConfig;
pub use data::{load_csv, read_csv, write_csv, CsvSchema, GridSpec, Mode, Observation, Treatment, TwoWaySample};
pub use error::{Error, ErrorClass, Result};
pub use estimator::{fit_cross_fitted, fit_full_sample, SieveFit};
pub use nuisance::NuisanceConfig;
pub use pipeline::{run_estimation, EstimationConfig, EstimationOutput, EstimatorKind};
pub use sieve::BasisSpec;
pub use simulation::{run_coverage, simulate_cate, simulate_cte, CoverageReport, DgpConfig, Shape};
