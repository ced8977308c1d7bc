//! Shared fixtures for the criterion benches.

use coulomb_core::{generate_profile, BatteryTruth, Extent, NoiseSpec, ProfileGenSpec, Scenario};

/// Mixed charge/discharge scenario sampled at 1 s over `horizon_s` seconds.
pub fn scenario(horizon_s: f64, spec: NoiseSpec) -> Scenario {
    let profile = generate_profile(&ProfileGenSpec {
        extent: Extent::Horizon(horizon_s),
        amplitude: (-1.5, 1.5),
        duration: (10.0, 300.0),
        duration_step: Some(1.0),
        seed: spec.seed,
    })
    .expect("valid generator settings");
    let truth = BatteryTruth::new(1.5, 1.0, 1.0, 1.0).expect("valid battery");
    Scenario::matched(profile, truth, spec, 0.5)
}

pub fn full_noise(seed: u64) -> NoiseSpec {
    NoiseSpec {
        sigma_i: 0.01,
        sigma_batt: 0.05,
        sigma_eta_c: 0.01,
        sigma_eta_d: 0.01,
        sigma_delta: 1e-4,
        seed,
        ..Default::default()
    }
}
