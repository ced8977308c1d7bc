use coulomb_core::error_model::{
    inject, predict_combined, predict_sigma_current, predict_sigma_integration, ErrorSource, NoiseSpec, Scenario,
};
use coulomb_core::model::{cc_trace, decompose, BatteryTruth, BeliefParams, CcDecomposition};
use coulomb_core::profiles::{sample, true_soc_trace, Segment, SegmentProfile};
use coulomb_core::tracker::{measurement_step, process_step, FilterState, MeasurementModel, ProcessNoise};
use proptest::prelude::*;

fn currents(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..len)
}

fn aligned_profile(delta: f64) -> impl Strategy<Value = SegmentProfile> {
    prop::collection::vec((1u32..40, -3.0f64..3.0), 1..30).prop_map(move |segs| {
        SegmentProfile::new(
            segs.into_iter().map(|(steps, amplitude)| Segment { duration: steps as f64 * delta, amplitude }).collect(),
        )
        .unwrap()
    })
}

fn increments(trace: &[f64], s0: f64) -> Vec<f64> {
    trace.iter().map(|s| s - s0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn counting_is_linear_in_current(a in currents(200), scale in -3.0f64..3.0) {
        let belief = BeliefParams::new(2.0, 1.0, 1.0, 1.0).unwrap();
        let b: Vec<f64> = a.iter().map(|x| x * 0.5 + 0.1).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ta = increments(&cc_trace(&a, 0.3, &belief).unwrap().values, 0.3);
        let tb = increments(&cc_trace(&b, 0.3, &belief).unwrap().values, 0.3);
        let ts = increments(&cc_trace(&sum, 0.3, &belief).unwrap().values, 0.3);
        for k in 0..a.len() {
            prop_assert!((ts[k] - ta[k] - tb[k]).abs() < 1e-12);
        }
        let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        let tsc = increments(&cc_trace(&scaled, 0.3, &belief).unwrap().values, 0.3);
        for k in 0..a.len() {
            prop_assert!((tsc[k] - scale * ta[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_efficiencies_give_sign_symmetry(a in currents(200), eta in 0.8f64..1.0) {
        let belief = BeliefParams::new(1.5, eta, eta, 0.5).unwrap();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let d = decompose(&a, &belief).unwrap();
        let n = decompose(&neg, &belief).unwrap();
        prop_assert!((d.s_cc + n.s_cc).abs() < 1e-12);
        prop_assert_eq!(d.n_c, n.n_d);
        prop_assert!((d.s_cc - d.s_cc_c - d.s_cc_d).abs() < 1e-15);
    }

    #[test]
    fn counter_matches_geometric_oracle(profile in aligned_profile(0.5), eta_c in 0.85f64..1.0, eta_d in 0.85f64..1.0) {
        let truth = BatteryTruth::new(1.5, eta_c, eta_d, 0.5).unwrap();
        let belief = BeliefParams::from(&truth);
        let counted = cc_trace(&sample(&profile, 0.5, 0.0).samples, 0.5, &belief).unwrap();
        let oracle = true_soc_trace(&profile, &truth, 0.5, 0.5).unwrap();
        prop_assert_eq!(counted.len(), oracle.len());
        for (c, o) in counted.values.iter().zip(&oracle.values) {
            prop_assert!((c - o).abs() < 1e-9);
        }
    }

    #[test]
    fn time_cumulative_sd_grows_as_root_n(n in 1u32..1_000_000, delta in 0.01f64..100.0, sigma in 0.0f64..0.5) {
        let one = predict_sigma_current(delta, sigma, 1.5, n as f64).unwrap();
        let four = predict_sigma_current(delta, sigma, 1.5, 4.0 * n as f64).unwrap();
        prop_assert!((four - 2.0 * one).abs() <= 1e-12 * four.max(1e-300));
    }

    #[test]
    fn oversampling_follows_root_delta(steps in 1u32..100_000, delta in 0.01f64..10.0, kappa in 0.1f64..2.0) {
        // fixed horizon: σ ∝ Δ·√(T/Δ) = √(Δ·T)
        let horizon = steps as f64 * delta;
        let coarse = predict_sigma_integration(delta, kappa, 0.2, 1.5, horizon / delta).unwrap();
        let fine = predict_sigma_integration(delta / 4.0, kappa, 0.2, 1.5, horizon / (delta / 4.0)).unwrap();
        prop_assert!((coarse - 2.0 * fine).abs() <= 1e-12 * coarse);
    }

    #[test]
    fn combined_variance_is_additive(
        sigma_i in 0.0f64..0.05, kappa in 0.0f64..1.5, sigma_l in 0.0f64..1.0, sigma_batt in 0.0f64..0.2,
        sigma_eta_c in 0.0f64..0.05, sigma_eta_d in 0.0f64..0.05, sigma_delta in 0.0f64..1e-3,
        n_c in 0u64..100_000, n_d in 0u64..100_000, s_c in 0.0f64..2.0, s_d in -2.0f64..0.0,
    ) {
        let belief = BeliefParams::new(1.5, 0.97, 0.93, 1.0).unwrap();
        let d = CcDecomposition { s_cc: s_c + s_d, s_cc_c: s_c, s_cc_d: s_d, n_c, n_d };
        let full = NoiseSpec { sigma_i, kappa, sigma_l, sigma_batt, sigma_eta_c, sigma_eta_d, sigma_delta, ..Default::default() };
        let parts = [
            NoiseSpec { sigma_i, ..Default::default() },
            NoiseSpec { kappa, sigma_l, ..Default::default() },
            NoiseSpec { sigma_batt, ..Default::default() },
            NoiseSpec { sigma_eta_c, sigma_eta_d, ..Default::default() },
            NoiseSpec { sigma_delta, ..Default::default() },
        ];
        let total = predict_combined(&full, &belief, &d).unwrap().variance();
        let sum: f64 = parts.iter().map(|p| predict_combined(p, &belief, &d).unwrap().variance()).sum();
        prop_assert!((total - sum).abs() <= 1e-12 * total.max(1e-300));
    }

    #[test]
    fn variance_never_negative_and_updates_never_inflate(
        zs in prop::collection::vec(-3.0f64..3.0, 1..100),
        volts in prop::collection::vec(3.0f64..4.1, 100),
        sigma_z in 1e-4f64..1.0,
    ) {
        let belief = BeliefParams::new(1.5, 0.98, 0.95, 1.0).unwrap();
        let spec = NoiseSpec { sigma_i: 0.02, sigma_batt: 0.1, sigma_eta_c: 0.02, sigma_eta_d: 0.02, sigma_delta: 1e-4, ..Default::default() };
        let model = MeasurementModel { sigma_z, ..Default::default() };
        let mut state = FilterState::new(0.5, 1e-4).unwrap();
        for (z, v) in zs.iter().zip(&volts) {
            state = process_step(&state, *z, &belief, &spec, ProcessNoise::default()).unwrap();
            let prior = state.p;
            state = measurement_step(&state, *v, &[*z], &model).unwrap();
            prop_assert!(state.p >= 0.0);
            prop_assert!(state.p <= prior);
        }
    }
}

fn scenario(spec: NoiseSpec) -> Scenario {
    let profile =
        SegmentProfile::from_pairs(&[(120.0, 1.2), (300.0, -0.8), (60.0, 2.0), (240.0, -1.5), (180.0, 0.4)]).unwrap();
    Scenario::matched(profile, BatteryTruth::new(1.5, 0.97, 0.94, 1.0).unwrap(), spec, 0.5)
}

/// `|mean error| ≤ 3·σ̂/√M` at a few checkpoints.
fn assert_unbiased(source: ErrorSource, spec: NoiseSpec, runs: u64) {
    let sc = scenario(spec);
    let mut sum = vec![0.0; 900];
    let mut sq = vec![0.0; 900];
    for m in 0..runs {
        for (k, e) in inject(source, &sc, m).unwrap().errors().enumerate() {
            sum[k] += e;
            sq[k] += e * e;
        }
    }
    for k in [99, 299, 599, 899] {
        let mean = sum[k] / runs as f64;
        let sd = (sq[k] / runs as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sd / (runs as f64).sqrt(), "{source} k={k}: mean {mean:e}, sd {sd:e}");
    }
}

#[test]
fn current_noise_is_unbiased() {
    assert_unbiased(ErrorSource::Current, NoiseSpec { sigma_i: 0.05, seed: 21, ..Default::default() }, 1000);
}

#[test]
fn capacity_error_is_unbiased_at_small_spread() {
    // the 1/Ĉ nonlinearity adds a bias of order ρ_C² that shows up at large M
    assert_unbiased(ErrorSource::Capacity, NoiseSpec { sigma_batt: 0.05, seed: 22, ..Default::default() }, 1000);
}

#[test]
fn efficiency_error_is_unbiased() {
    let spec = NoiseSpec { sigma_eta_c: 0.02, sigma_eta_d: 0.03, seed: 23, ..Default::default() };
    assert_unbiased(ErrorSource::Efficiency, spec, 1000);
}

#[test]
fn stochastic_timing_error_is_unbiased() {
    assert_unbiased(ErrorSource::Timing, NoiseSpec { sigma_delta: 1e-3, seed: 24, ..Default::default() }, 1000);
}

#[test]
fn combined_draws_reuse_single_source_draws() {
    let spec = NoiseSpec { sigma_i: 0.05, sigma_batt: 0.05, seed: 25, ..Default::default() };
    let sc = scenario(spec);
    let cap = coulomb_core::error_model::corrupt(ErrorSource::Capacity, &sc, 7).unwrap();
    let cur = coulomb_core::error_model::corrupt(ErrorSource::Current, &sc, 7).unwrap();
    let both = coulomb_core::error_model::corrupt(ErrorSource::Combined, &sc, 7).unwrap();
    assert_eq!(both.belief.c_batt, cap.belief.c_batt);
    // the combined run also permutes the profile, so compare the added noise
    let noise = |c: &coulomb_core::error_model::Corruption| -> Vec<f64> {
        c.measured.samples.iter().zip(&c.true_current).map(|(z, i)| z - i).collect()
    };
    let (a, b) = (noise(&both), noise(&cur));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
}
