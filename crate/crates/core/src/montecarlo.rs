//! Seeded Monte-Carlo validation of the closed-form predictors, and the
//! least-squares fit of the integration-error constant.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_model::{
    capacity_coefficient, inject, predict_combined, predict_sigma_capacity, predict_sigma_current,
    predict_sigma_efficiency, predict_sigma_integration, predict_sigma_timing, ErrorSource, Scenario,
    TimingPrediction,
};
use crate::model::CcDecomposition;
use crate::profiles::stats;
use crate::sum::NeumaierSum;

/// Runs per parallel work unit. Fixed so the reduction order never depends
/// on the thread count.
const BLOCK: u64 = 32;

/// Relative deviation is only evaluated where the theoretical s.d. exceeds
/// this many ulps per accumulated sample.
const BURN_IN_FLOOR_ULPS: f64 = 10.0;

pub const CURRENT_TOLERANCE: f64 = 0.07;
pub const CAPACITY_TOLERANCE: f64 = 0.12;
pub const INTEGRATION_RESIDUAL_TOLERANCE: f64 = 0.10;

/// Samples skipped when scoring a κ fit. Integration-error variance grows as
/// `n·A + B`; the constant term from the first step decays as `B/(2nA)`
/// relative, and is below about 2% after this many samples.
pub const KAPPA_FIT_BURN_IN: usize = 10;

/// Tolerance applied to `max_rel_dev` when nothing else is configured.
pub fn default_tolerance(source: ErrorSource) -> f64 {
    match source {
        ErrorSource::Capacity => CAPACITY_TOLERANCE,
        ErrorSource::Integration => INTEGRATION_RESIDUAL_TOLERANCE,
        _ => CURRENT_TOLERANCE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub source: ErrorSource,
    pub runs: u64,
    pub seed: u64,
    /// True sample period.
    pub delta: f64,
    /// `√(mean over runs of (s_true − s_m)²)` after every sample.
    pub empirical_sd: Vec<f64>,
    pub theoretical_sd: Vec<f64>,
    /// Mean of `s_m − s_true` after every sample.
    pub mean_error: Vec<f64>,
    /// First sample index where the relative deviation is evaluated.
    pub k_min: Option<usize>,
    /// `max |σ̂ − σ| / σ` over evaluated samples; `None` if none qualify.
    pub max_rel_dev: Option<f64>,
    /// Capacity source only: s.d. without the first-order approximation.
    pub exact_capacity_sd: Option<Vec<f64>>,
}

impl McResult {
    pub fn len(&self) -> usize {
        self.empirical_sd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.empirical_sd.is_empty()
    }

    /// True when no deviation was evaluated or the worst one is within `tolerance`.
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_dev.is_none_or(|d| d <= tolerance)
    }

    /// Replaces the theoretical curve and recomputes the deviation summary,
    /// ignoring the first `skip` samples.
    pub fn with_theory(mut self, theoretical_sd: Vec<f64>, skip: usize) -> Self {
        let (k_min, max_rel_dev) = relative_deviation_from(&self.empirical_sd, &theoretical_sd, skip);
        self.theoretical_sd = theoretical_sd;
        self.k_min = k_min;
        self.max_rel_dev = max_rel_dev;
        self
    }

    /// CSV with columns `k,t_s,empirical_sd,theoretical_sd`, SOC fractions.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "t_s", "empirical_sd", "theoretical_sd"]).map_err(csv_err)?;
        for (j, (e, t)) in self.empirical_sd.iter().zip(&self.theoretical_sd).enumerate() {
            let k = j + 1;
            out.write_record([k.to_string(), (k as f64 * self.delta).to_string(), e.to_string(), t.to_string()])
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> McSummary {
        McSummary {
            source: self.source,
            runs: self.runs,
            seed: self.seed,
            samples: self.len(),
            k_min: self.k_min,
            max_rel_dev: self.max_rel_dev,
            final_empirical_sd: self.empirical_sd.last().copied(),
            final_theoretical_sd: self.theoretical_sd.last().copied(),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

/// Scalar digest of an [`McResult`] for metadata sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub source: ErrorSource,
    pub runs: u64,
    pub seed: u64,
    pub samples: usize,
    pub k_min: Option<usize>,
    pub max_rel_dev: Option<f64>,
    pub final_empirical_sd: Option<f64>,
    pub final_theoretical_sd: Option<f64>,
}

fn burn_in_floor(k: usize) -> f64 {
    BURN_IN_FLOOR_ULPS * f64::EPSILON * (k + 1) as f64
}

/// `(k_min, max relative deviation)` over samples whose theory clears the floor.
pub fn relative_deviation(empirical: &[f64], theoretical: &[f64]) -> (Option<usize>, Option<f64>) {
    relative_deviation_from(empirical, theoretical, 0)
}

pub fn relative_deviation_from(empirical: &[f64], theoretical: &[f64], skip: usize) -> (Option<usize>, Option<f64>) {
    let mut k_min = None;
    let mut worst: Option<f64> = None;
    for (k, (&e, &t)) in empirical.iter().zip(theoretical).enumerate().skip(skip) {
        if t > burn_in_floor(k) {
            k_min.get_or_insert(k);
            let dev = (e - t).abs() / t;
            worst = Some(worst.map_or(dev, |w| w.max(dev)));
        }
    }
    (k_min, worst)
}

#[derive(Clone)]
struct Moments {
    linear: Vec<NeumaierSum>,
    squared: Vec<NeumaierSum>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { linear: vec![NeumaierSum::new(); n], squared: vec![NeumaierSum::new(); n] }
    }

    fn merge(&mut self, other: &Moments) {
        for (a, b) in self.linear.iter_mut().zip(&other.linear) {
            a.merge(b);
        }
        for (a, b) in self.squared.iter_mut().zip(&other.squared) {
            a.merge(b);
        }
    }
}

fn run_block(source: ErrorSource, scenario: &Scenario, runs: std::ops::Range<u64>, n: usize) -> Result<Moments> {
    let mut acc = Moments::new(n);
    for m in runs {
        let run = inject(source, scenario, m)?;
        if run.estimate.len() != n || run.reference.len() != n {
            return Err(Error::InvalidInput(format!(
                "run {m} produced {} samples, expected {n}",
                run.estimate.len()
            )));
        }
        for (k, e) in run.errors().enumerate() {
            acc.linear[k].add(e);
            acc.squared[k].add(e * e);
        }
    }
    Ok(acc)
}

/// Runs `runs` seeded simulations of `source` and compares the empirical
/// error s.d. against the matching predictor.
///
/// The result is bit-identical for a fixed scenario regardless of how many
/// threads execute the runs.
pub fn run_mc(source: ErrorSource, scenario: &Scenario, runs: u64) -> Result<McResult> {
    if runs < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 runs, got {runs}")));
    }
    scenario.validate()?;
    let decomps = scenario.clean_decomposition()?;
    let n = decomps.len();

    let blocks: Vec<std::ops::Range<u64>> =
        (0..runs.div_ceil(BLOCK)).map(|b| b * BLOCK..((b + 1) * BLOCK).min(runs)).collect();
    let partials = blocks
        .into_par_iter()
        .map(|range| run_block(source, scenario, range, n))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Moments::new(n);
    for p in &partials {
        total.merge(p);
    }

    let m = runs as f64;
    let empirical_sd: Vec<f64> = total.squared.iter().map(|s| (s.value().max(0.0) / m).sqrt()).collect();
    let mean_error: Vec<f64> = total.linear.iter().map(|s| s.value() / m).collect();
    let theoretical_sd = theoretical_curve(source, scenario, &decomps)?;
    let exact_capacity_sd = (source == ErrorSource::Capacity).then(|| {
        let factor = exact_capacity_factor(capacity_coefficient(scenario.spec.sigma_batt, scenario.truth.c_true));
        decomps.iter().map(|d| factor * d.s_cc.abs()).collect()
    });

    let (k_min, max_rel_dev) = relative_deviation(&empirical_sd, &theoretical_sd);
    Ok(McResult {
        source,
        runs,
        seed: scenario.spec.seed,
        delta: scenario.truth.delta_true,
        empirical_sd,
        theoretical_sd,
        mean_error,
        k_min,
        max_rel_dev,
        exact_capacity_sd,
    })
}

/// Load-current s.d. used by the integration predictor: the spec value when
/// given, otherwise the sample s.d. of the clean profile.
fn load_sd(scenario: &Scenario) -> Result<f64> {
    if scenario.spec.sigma_l > 0.0 {
        return Ok(scenario.spec.sigma_l);
    }
    Ok(stats(&scenario.clean_samples(), scenario.belief.c_batt, None)?.sigma_l)
}

/// Predicted s.d. of `source` after every sample of the clean decomposition.
pub fn theoretical_curve(source: ErrorSource, scenario: &Scenario, decomps: &[CcDecomposition]) -> Result<Vec<f64>> {
    let spec = &scenario.spec;
    let belief = &scenario.belief;
    let weighting = spec.weighting();
    let count = |d: &CcDecomposition| d.weighted_count(belief.eta_c, belief.eta_d, weighting);
    let sigma_l = if source == ErrorSource::Integration { load_sd(scenario)? } else { 0.0 };
    let rho_c = capacity_coefficient(spec.sigma_batt, scenario.truth.c_true);
    let timing = spec.timing_model()?;
    decomps
        .iter()
        .map(|d| match source {
            ErrorSource::Current => predict_sigma_current(belief.delta, spec.sigma_i, belief.c_batt, count(d)),
            ErrorSource::Integration => {
                predict_sigma_integration(belief.delta, spec.kappa, sigma_l, belief.c_batt, count(d))
            }
            ErrorSource::Capacity => predict_sigma_capacity(rho_c, d.s_cc),
            ErrorSource::Efficiency => predict_sigma_efficiency(spec.sigma_eta_c, spec.sigma_eta_d, d.s_cc_c, d.s_cc_d),
            ErrorSource::Timing => Ok(match predict_sigma_timing(timing, d.s_cc)? {
                TimingPrediction::Sd(sd) => sd,
                TimingPrediction::Bias(b) => b.abs(),
            }),
            ErrorSource::Combined => {
                let e = predict_combined(spec, belief, d)?;
                Ok(e.combined.hypot(e.timing_bias))
            }
        })
        .collect()
}

/// RMS of `C/Ĉ − 1` for `Ĉ = C·(1 + ρ·x)`, `x ~ N(0, 1)`, by quadrature over
/// `|x| ≤ 8` restricted to positive capacities.
pub fn exact_capacity_factor(rho_c: f64) -> f64 {
    if rho_c == 0.0 {
        return 0.0;
    }
    const STEPS: usize = 16_000;
    let (lo, hi) = (-8.0, 8.0);
    let h = (hi - lo) / STEPS as f64;
    let mut mass = NeumaierSum::new();
    let mut second = NeumaierSum::new();
    for j in 0..=STEPS {
        let x = lo + j as f64 * h;
        let scale = 1.0 + rho_c * x;
        if scale <= 0.0 {
            continue;
        }
        let w = if j == 0 || j == STEPS { 0.5 } else { 1.0 } * (-0.5 * x * x).exp();
        let err = 1.0 / scale - 1.0;
        mass.add(w);
        second.add(w * err * err);
    }
    (second.value() / mass.value()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaFit {
    pub kappa: f64,
    /// Load-current s.d. of the clean sampled profile, amperes.
    pub sigma_l: f64,
    /// Integration Monte-Carlo result with the fitted theoretical curve.
    pub result: McResult,
}

/// Fits the integration-error constant by least squares of the empirical
/// s.d. against the `κ = 1` prediction: `κ̂ = Σ σ̂·b / Σ b²`.
///
/// The residual in the returned result skips the first
/// [`KAPPA_FIT_BURN_IN`] samples.
pub fn fit_kappa(scenario: &Scenario, runs: u64) -> Result<KappaFit> {
    let clean = scenario.clean_samples();
    let sigma_l = stats(&clean, scenario.belief.c_batt, None)
        .map_err(|_| Error::DegenerateProfile("profile has fewer than two samples".into()))?
        .sigma_l;
    if sigma_l <= 0.0 {
        return Err(Error::DegenerateProfile("load current is constant (zero s.d.)".into()));
    }
    let mut unit = scenario.clone();
    unit.spec.kappa = 1.0;
    unit.spec.sigma_l = sigma_l;
    let mc = run_mc(ErrorSource::Integration, &unit, runs)?;
    let basis = mc.theoretical_sd.clone();
    let num: NeumaierSum = mc.empirical_sd.iter().zip(&basis).map(|(s, b)| s * b).collect();
    let den: NeumaierSum = basis.iter().map(|b| b * b).collect();
    let kappa = if den.value() > 0.0 { num.value() / den.value() } else { 0.0 };
    let fitted = basis.iter().map(|b| kappa * b).collect();
    Ok(KappaFit { kappa, sigma_l, result: mc.with_theory(fitted, KAPPA_FIT_BURN_IN) })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::error_model::NoiseSpec;
    use crate::model::BatteryTruth;
    use crate::profiles::{generate_profile, Extent, ProfileGenSpec, SegmentProfile};

    fn scenario(spec: NoiseSpec, horizon: f64, step: Option<f64>) -> Scenario {
        let profile = generate_profile(&ProfileGenSpec {
            extent: Extent::Horizon(horizon),
            amplitude: (-1.5, 1.5),
            duration: (3.0, 40.0),
            duration_step: step,
            seed: 5,
        })
        .unwrap();
        Scenario::matched(profile, BatteryTruth::new(1.5, 1.0, 1.0, 1.0).unwrap(), spec, 0.5)
    }

    #[test]
    fn zero_spec_gives_zero_sd_and_no_deviation() {
        let sc = scenario(NoiseSpec::default(), 600.0, Some(1.0));
        for source in ErrorSource::SINGLE {
            let r = run_mc(source, &sc, 4).unwrap();
            assert!(r.empirical_sd.iter().all(|&v| v < 1e-14), "{source}");
            assert_eq!(r.max_rel_dev, None);
            assert!(r.within(0.0));
        }
    }

    #[test]
    fn needs_two_runs() {
        let sc = scenario(NoiseSpec::default(), 60.0, Some(1.0));
        assert!(run_mc(ErrorSource::Current, &sc, 1).is_err());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let spec = NoiseSpec { sigma_i: 0.02, sigma_batt: 0.05, seed: 77, ..Default::default() };
        let sc = scenario(spec, 300.0, Some(1.0));
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = single.install(|| run_mc(ErrorSource::Combined, &sc, 100).unwrap());
        let b = run_mc(ErrorSource::Combined, &sc, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_sd_is_proportional_to_accumulated_soc() {
        let spec = NoiseSpec { sigma_batt: 0.1, seed: 3, ..Default::default() };
        let sc = scenario(spec, 900.0, Some(1.0));
        let r = run_mc(ErrorSource::Capacity, &sc, 400).unwrap();
        let ratios: Vec<f64> = r
            .empirical_sd
            .iter()
            .zip(&r.theoretical_sd)
            .filter(|(_, &t)| t > 1e-6)
            .map(|(e, t)| e / t)
            .collect();
        let first = ratios[0];
        assert!(ratios.iter().all(|q| (q - first).abs() < 1e-9));
        assert!(r.exact_capacity_sd.is_some());
    }

    #[test]
    fn exact_capacity_factor_exceeds_linearisation() {
        assert_eq!(exact_capacity_factor(0.0), 0.0);
        let rho = 0.1 / 1.5;
        let f = exact_capacity_factor(rho);
        // E[y²/(1+y)²] = ρ²(1 + 9ρ² + 75ρ⁴ + …) for y ~ N(0, ρ²)
        let series = rho * (1.0 + 9.0 * rho.powi(2) + 75.0 * rho.powi(4)).sqrt();
        assert_relative_eq!(f, series, max_relative = 1e-4);
    }

    #[test]
    fn fixed_timing_rms_equals_bias() {
        let spec = NoiseSpec { rho_delta_fixed: Some(1e-3), ..Default::default() };
        let sc = scenario(spec, 300.0, Some(1.0));
        let r = run_mc(ErrorSource::Timing, &sc, 2).unwrap();
        for (e, t) in r.empirical_sd.iter().zip(&r.theoretical_sd) {
            assert!((e - t).abs() < 1e-14, "{e} vs {t}");
        }
    }

    #[test]
    fn aligned_profile_fits_zero_kappa() {
        let sc = scenario(NoiseSpec { seed: 1, ..Default::default() }, 600.0, Some(1.0));
        let fit = fit_kappa(&sc, 8).unwrap();
        // zero up to round-off between the counter and the oracle
        assert!(fit.kappa.abs() < 1e-9, "{}", fit.kappa);
        assert!(fit.result.empirical_sd.iter().all(|&v| v < 1e-14));
    }

    #[test]
    fn constant_profile_is_degenerate() {
        let profile = SegmentProfile::from_pairs(&[(100.0, 1.0)]).unwrap();
        let sc = Scenario::matched(profile, BatteryTruth::new(1.5, 1.0, 1.0, 1.0).unwrap(), NoiseSpec::default(), 0.5);
        assert!(matches!(fit_kappa(&sc, 4), Err(Error::DegenerateProfile(_))));
    }

    #[test]
    fn csv_layout() {
        let sc = scenario(NoiseSpec { sigma_i: 0.01, ..Default::default() }, 5.0, Some(1.0));
        let r = run_mc(ErrorSource::Current, &sc, 2).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("k,t_s,empirical_sd,theoretical_sd"));
        assert!(lines.next().unwrap().starts_with("1,1,"));
        assert_eq!(text.lines().count(), r.len() + 1);
    }

    #[test]
    fn deviation_skips_zero_theory() {
        let (k, d) = relative_deviation(&[0.0, 1.0, 2.2], &[0.0, 1.0, 2.0]);
        assert_eq!(k, Some(1));
        assert_relative_eq!(d.unwrap(), 0.1, max_relative = 1e-12);
        assert_eq!(relative_deviation(&[0.1], &[0.0]), (None, None));
        assert_eq!(relative_deviation_from(&[0.0, 1.0, 2.2], &[0.0, 1.0, 2.0], 2).0, Some(2));
    }
}
