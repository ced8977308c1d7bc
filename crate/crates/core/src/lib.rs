//! Coulomb-counting SOC estimation with closed-form error budgets, seeded
//! Monte-Carlo validation, and a variance-aware recursive tracker.

pub mod error;
pub mod error_model;
pub mod model;
pub mod montecarlo;
pub mod profiles;
pub mod rng;
pub mod sum;
pub mod tracker;

pub use error::{Error, Result};
pub use error_model::{
    corrupt, inject, predict_budget, predict_combined, predict_sigma_capacity, predict_sigma_current,
    predict_sigma_efficiency, predict_sigma_integration, predict_sigma_timing, rho_delta_from_drift, to_percent,
    BudgetEntry, ErrorBudget, ErrorClass, ErrorSource, NoiseSpec, Scenario, TimingModel, TimingPrediction,
};
pub use model::{cc_step, cc_trace, decompose, BatteryTruth, BeliefParams, CcDecomposition, EfficiencyWeighting, SocTrace};
pub use montecarlo::{fit_kappa, run_mc, KappaFit, McResult};
pub use profiles::{
    exact_coulombs, generate_profile, sample, stats, true_soc_trace, Extent, LoadStats, ProfileGenSpec,
    SampledCurrent, Segment, SegmentProfile,
};
pub use tracker::{
    measurement_step, process_step, track, FilterState, MeasurementModel, ProcessNoise, ProcessNoiseRule,
    TrackOptions, TrackResult,
};
