//! Closed-form SOC-error predictors for the five Coulomb-counting error
//! sources, and injectors that corrupt a clean simulation with them.
//!
//! Two families of error appear:
//!
//! * **time-cumulative** (current noise, integration): variance grows with the
//!   number of samples and is unbounded;
//! * **SOC-proportional** (capacity, efficiency, timing): s.d. scales with the
//!   accumulated SOC change and peaks within one cycle.
//!
//! All predictors return SOC fractions. Use [`to_percent`] at the edges.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_nonnegative, ensure_positive, Error, Result};
use crate::model::{
    cc_trace, BatteryTruth, BeliefParams, CcDecomposition, EfficiencyWeighting, RunningDecomposition, SocTrace,
    SECONDS_PER_HOUR,
};
use crate::profiles::{sample, true_soc_trace, SampledCurrent, SegmentProfile};
use crate::rng::{stream, StreamPurpose};

/// Standard deviations and coefficients of every error source.
///
/// Deserializes from JSON with every field optional (zero by default).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Current-sensor noise s.d., amperes.
    pub sigma_i: f64,
    /// Integration-error constant.
    pub kappa: f64,
    /// Load-current s.d., amperes.
    pub sigma_l: f64,
    /// Capacity uncertainty s.d., A·h.
    pub sigma_batt: f64,
    /// S.d. of the relative charging-efficiency error.
    pub sigma_eta_c: f64,
    /// S.d. of the relative discharging-efficiency error.
    pub sigma_eta_d: f64,
    /// S.d. of the relative clock error.
    pub sigma_delta: f64,
    /// Known, fixed relative clock error. Mutually exclusive with `sigma_delta`.
    pub rho_delta_fixed: Option<f64>,
    pub seed: u64,
    /// Weight sample counts by squared efficiencies in the time-cumulative terms.
    pub efficiency_squared: bool,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_i", self.sigma_i),
            ("kappa", self.kappa),
            ("sigma_l", self.sigma_l),
            ("sigma_batt", self.sigma_batt),
            ("sigma_eta_c", self.sigma_eta_c),
            ("sigma_eta_d", self.sigma_eta_d),
            ("sigma_delta", self.sigma_delta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        self.timing_model().map(|_| ())
    }

    pub fn weighting(&self) -> EfficiencyWeighting {
        EfficiencyWeighting::from_flag(self.efficiency_squared)
    }

    pub fn timing_model(&self) -> Result<TimingModel> {
        match self.rho_delta_fixed {
            Some(_) if self.sigma_delta > 0.0 => Err(Error::Config(
                "sigma_delta and rho_delta_fixed are mutually exclusive".into(),
            )),
            Some(rho) if !rho.is_finite() || rho <= -1.0 => {
                Err(Error::Config(format!("rho_delta_fixed must be finite and > -1, got {rho}")))
            }
            Some(rho) => Ok(TimingModel::Fixed(rho)),
            None => Ok(TimingModel::Stochastic(self.sigma_delta)),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NoiseSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Which mechanism an injector perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorSource {
    Current,
    Integration,
    Capacity,
    Efficiency,
    Timing,
    Combined,
}

impl ErrorSource {
    pub const SINGLE: [ErrorSource; 5] = [
        ErrorSource::Current,
        ErrorSource::Integration,
        ErrorSource::Capacity,
        ErrorSource::Efficiency,
        ErrorSource::Timing,
    ];

    /// `None` for the combined source, which mixes both classes.
    pub fn class(self) -> Option<ErrorClass> {
        match self {
            Self::Current | Self::Integration => Some(ErrorClass::TimeCumulative),
            Self::Capacity | Self::Efficiency | Self::Timing => Some(ErrorClass::SocProportional),
            Self::Combined => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Current => "current",
            Self::Integration => "integration",
            Self::Capacity => "capacity",
            Self::Efficiency => "efficiency",
            Self::Timing => "timing",
            Self::Combined => "combined",
        }
    }

    fn includes(self, other: ErrorSource) -> bool {
        self == other || self == Self::Combined
    }
}

impl fmt::Display for ErrorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(Self::Current),
            "integration" => Ok(Self::Integration),
            "capacity" => Ok(Self::Capacity),
            "efficiency" => Ok(Self::Efficiency),
            "timing" => Ok(Self::Timing),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!("unknown error source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    TimeCumulative,
    SocProportional,
}

/// How the clock error is modelled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimingModel {
    /// Relative clock error drawn once per run from `N(0, σ²)`.
    Stochastic(f64),
    /// Known relative clock error; produces a bias rather than a spread.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimingPrediction {
    Sd(f64),
    Bias(f64),
}

pub fn to_percent(fraction: f64) -> f64 {
    100.0 * fraction
}

/// `σ_batt / C`.
pub fn capacity_coefficient(sigma_batt: f64, capacity: f64) -> f64 {
    sigma_batt / capacity
}

/// Relative clock error of an oscillator that drifts `drift_s` seconds over
/// `period_s` seconds.
pub fn rho_delta_from_drift(drift_s: f64, period_s: f64) -> f64 {
    drift_s / period_s
}

/// S.d. of the SOC error caused by zero-mean current noise:
/// `(Δ·σ_i / (3600·C)) · √(weighted sample count)`.
pub fn predict_sigma_current(delta: f64, sigma_i: f64, c_batt: f64, weighted_count: f64) -> Result<f64> {
    ensure_nonnegative("delta", delta)?;
    ensure_nonnegative("sigma_i", sigma_i)?;
    ensure_positive("c_batt", c_batt)?;
    ensure_nonnegative("weighted_count", weighted_count)?;
    Ok(delta * (sigma_i / c_batt) / SECONDS_PER_HOUR * weighted_count.sqrt())
}

/// S.d. of the SOC error from rectangular integration:
/// `(κ·Δ·σ_L / (3600·C)) · √(weighted sample count)`.
pub fn predict_sigma_integration(
    delta: f64,
    kappa: f64,
    sigma_l: f64,
    c_batt: f64,
    weighted_count: f64,
) -> Result<f64> {
    ensure_nonnegative("kappa", kappa)?;
    ensure_nonnegative("sigma_l", sigma_l)?;
    Ok(kappa * predict_sigma_current(delta, sigma_l, c_batt, weighted_count)?)
}

/// `ρ_C·|s_CC|`.
pub fn predict_sigma_capacity(rho_c: f64, s_cc: f64) -> Result<f64> {
    ensure_nonnegative("rho_c", rho_c)?;
    ensure_finite("s_cc", s_cc)?;
    Ok(rho_c * s_cc.abs())
}

/// `√(σ_ηc²·s_CCc² + σ_ηd²·s_CCd²)`.
pub fn predict_sigma_efficiency(sigma_eta_c: f64, sigma_eta_d: f64, s_cc_c: f64, s_cc_d: f64) -> Result<f64> {
    ensure_nonnegative("sigma_eta_c", sigma_eta_c)?;
    ensure_nonnegative("sigma_eta_d", sigma_eta_d)?;
    ensure_finite("s_cc_c", s_cc_c)?;
    ensure_finite("s_cc_d", s_cc_d)?;
    Ok((sigma_eta_c * s_cc_c).hypot(sigma_eta_d * s_cc_d))
}

pub fn predict_sigma_timing(model: TimingModel, s_cc: f64) -> Result<TimingPrediction> {
    ensure_finite("s_cc", s_cc)?;
    match model {
        TimingModel::Stochastic(sd) => {
            ensure_nonnegative("sigma_delta", sd)?;
            Ok(TimingPrediction::Sd(sd * s_cc.abs()))
        }
        TimingModel::Fixed(rho) => Ok(TimingPrediction::Bias(rho * s_cc)),
    }
}

/// Per-source error s.d. at one sample index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub sigma_s_i: f64,
    pub sigma_s_int: f64,
    pub sigma_s_c: f64,
    pub sigma_s_eta: f64,
    pub sigma_s_delta: f64,
    /// Root-sum-square of the five terms above.
    pub combined: f64,
    /// Deterministic clock bias when the clock error is fixed; zero otherwise.
    pub timing_bias: f64,
}

impl BudgetEntry {
    pub fn get(&self, source: ErrorSource) -> f64 {
        match source {
            ErrorSource::Current => self.sigma_s_i,
            ErrorSource::Integration => self.sigma_s_int,
            ErrorSource::Capacity => self.sigma_s_c,
            ErrorSource::Efficiency => self.sigma_s_eta,
            ErrorSource::Timing => self.sigma_s_delta,
            ErrorSource::Combined => self.combined,
        }
    }

    pub fn variance(&self) -> f64 {
        self.combined * self.combined
    }
}

/// Naive independent combination of all five sources for one decomposition.
/// The capacity coefficient is taken relative to the believed capacity.
pub fn predict_combined(spec: &NoiseSpec, belief: &BeliefParams, decomp: &CcDecomposition) -> Result<BudgetEntry> {
    spec.validate()?;
    belief.check_usable()?;
    let count = decomp.weighted_count(belief.eta_c, belief.eta_d, spec.weighting());
    let sigma_s_i = predict_sigma_current(belief.delta, spec.sigma_i, belief.c_batt, count)?;
    let sigma_s_int = predict_sigma_integration(belief.delta, spec.kappa, spec.sigma_l, belief.c_batt, count)?;
    let rho_c = capacity_coefficient(spec.sigma_batt, belief.c_batt);
    let sigma_s_c = predict_sigma_capacity(rho_c, decomp.s_cc)?;
    let sigma_s_eta = predict_sigma_efficiency(spec.sigma_eta_c, spec.sigma_eta_d, decomp.s_cc_c, decomp.s_cc_d)?;
    let (sigma_s_delta, timing_bias) = match predict_sigma_timing(spec.timing_model()?, decomp.s_cc)? {
        TimingPrediction::Sd(sd) => (sd, 0.0),
        TimingPrediction::Bias(b) => (0.0, b),
    };
    let variance = sigma_s_i.powi(2)
        + sigma_s_int.powi(2)
        + sigma_s_c.powi(2)
        + sigma_s_eta.powi(2)
        + sigma_s_delta.powi(2);
    Ok(BudgetEntry { sigma_s_i, sigma_s_int, sigma_s_c, sigma_s_eta, sigma_s_delta, combined: variance.sqrt(), timing_bias })
}

/// Predicted error budget after every sample of a clean current sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub entries: Vec<BudgetEntry>,
}

impl ErrorBudget {
    pub fn series(&self, source: ErrorSource) -> Vec<f64> {
        self.entries.iter().map(|e| e.get(source)).collect()
    }

    pub fn class_of(source: ErrorSource) -> Option<ErrorClass> {
        source.class()
    }
}

pub fn predict_budget(spec: &NoiseSpec, belief: &BeliefParams, currents: &[f64]) -> Result<ErrorBudget> {
    let mut running = RunningDecomposition::new();
    let entries = currents
        .iter()
        .map(|&i| {
            ensure_finite("current", i)?;
            running.push(i, belief);
            predict_combined(spec, belief, &running.snapshot())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorBudget { entries })
}

/// A clean reference scenario that injectors corrupt.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub profile: SegmentProfile,
    pub truth: BatteryTruth,
    /// Parameters the counter uses for every mechanism that is not perturbed.
    pub belief: BeliefParams,
    pub spec: NoiseSpec,
    pub s0: f64,
}

impl Scenario {
    /// Scenario whose counter believes exactly the true parameters.
    pub fn matched(profile: SegmentProfile, truth: BatteryTruth, spec: NoiseSpec, s0: f64) -> Self {
        Self { profile, belief: BeliefParams::from(&truth), truth, spec, s0 }
    }

    /// Clean samples of the profile at the true sample period.
    pub fn clean_samples(&self) -> SampledCurrent {
        sample(&self.profile, self.truth.delta_true, 0.0)
    }

    /// Decomposition of the clean samples after every sample.
    pub fn clean_decomposition(&self) -> Result<Vec<CcDecomposition>> {
        crate::model::decomposition_series(&self.clean_samples().samples, &self.belief)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        self.belief.check_usable()?;
        self.spec.validate()?;
        ensure_finite("s0", self.s0)
    }
}

/// Everything a corrupted run produces before the counter is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    /// Profile actually driven through the battery in this run.
    pub profile: SegmentProfile,
    /// True current at each sample time.
    pub true_current: Vec<f64>,
    /// What the counter sees: possibly noisy samples with the believed period.
    pub measured: SampledCurrent,
    /// Possibly perturbed parameters the counter uses.
    pub belief: BeliefParams,
    /// Geometric true SOC at each sample time.
    pub reference: SocTrace,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Builds the measurements and beliefs of run `run_index` with only the
/// mechanisms of `source` perturbed.
///
/// Capacity, efficiency and clock errors are drawn once per run. Current
/// noise is drawn per sample. Integration error is physical: the counter sees
/// right-endpoint samples of the true profile, and each run permutes the
/// segment amplitudes so the error differs between runs.
pub fn corrupt(source: ErrorSource, scenario: &Scenario, run_index: u64) -> Result<Corruption> {
    scenario.validate()?;
    let spec = &scenario.spec;
    let truth = &scenario.truth;
    let seed = spec.seed;
    if source != ErrorSource::Combined
        && source != ErrorSource::Integration
        && !scenario.profile.is_aligned(truth.delta_true)
    {
        return Err(Error::InvalidInput(format!(
            "isolating the {source} source needs segment boundaries on multiples of the sample period {}",
            truth.delta_true
        )));
    }

    let profile = if source.includes(ErrorSource::Integration) {
        scenario.profile.shuffled(seed, run_index)
    } else {
        scenario.profile.clone()
    };

    let mut belief = scenario.belief;
    if source.includes(ErrorSource::Capacity) && spec.sigma_batt > 0.0 {
        let draw = normal(&mut stream(seed, run_index, StreamPurpose::Capacity));
        belief.c_batt = truth.c_true + spec.sigma_batt * draw;
        if belief.c_batt <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "capacity draw {} A·h is not positive; sigma_batt is too large",
                belief.c_batt
            )));
        }
    }
    if source.includes(ErrorSource::Efficiency) && (spec.sigma_eta_c > 0.0 || spec.sigma_eta_d > 0.0) {
        let mut rng = stream(seed, run_index, StreamPurpose::Efficiency);
        let rho_c = spec.sigma_eta_c * normal(&mut rng);
        let rho_d = spec.sigma_eta_d * normal(&mut rng);
        belief.eta_c = truth.eta_c_true * (1.0 + rho_c);
        belief.eta_d = truth.eta_d_true * (1.0 + rho_d);
        if belief.eta_c <= 0.0 || belief.eta_d <= 0.0 {
            return Err(Error::InvalidInput("efficiency draw is not positive".into()));
        }
    }
    if source.includes(ErrorSource::Timing) {
        let rho = match spec.timing_model()? {
            TimingModel::Fixed(rho) => rho,
            TimingModel::Stochastic(sd) if sd > 0.0 => {
                sd * normal(&mut stream(seed, run_index, StreamPurpose::Timing))
            }
            TimingModel::Stochastic(_) => 0.0,
        };
        belief.delta = truth.delta_true * (1.0 + rho);
    }

    let clean = sample(&profile, truth.delta_true, 0.0);
    let mut measured = SampledCurrent { delta: belief.delta, samples: clean.samples.clone() };
    if source.includes(ErrorSource::Current) && spec.sigma_i > 0.0 {
        let mut rng = stream(seed, run_index, StreamPurpose::CurrentNoise);
        for z in &mut measured.samples {
            *z += spec.sigma_i * normal(&mut rng);
        }
    }
    let reference = true_soc_trace(&profile, truth, scenario.s0, truth.delta_true)?;
    Ok(Corruption { profile, true_current: clean.samples, measured, belief, reference })
}

/// Counter output of one corrupted run alongside the true SOC it tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedRun {
    pub estimate: SocTrace,
    pub reference: SocTrace,
}

impl InjectedRun {
    /// `estimate − reference` at every sample.
    pub fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.estimate.values.iter().zip(&self.reference.values).map(|(e, r)| e - r)
    }
}

pub fn inject(source: ErrorSource, scenario: &Scenario, run_index: u64) -> Result<InjectedRun> {
    let c = corrupt(source, scenario, run_index)?;
    let estimate = cc_trace(&c.measured.samples, scenario.s0, &c.belief)?;
    Ok(InjectedRun { estimate, reference: c.reference })
}

#[cfg(test)]
mod tests {
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    use super::*;
    use crate::model::decompose;
    use crate::profiles::{generate_profile, Extent, ProfileGenSpec};

    const DAY: f64 = 86_400.0;
    const YEAR: f64 = 365.0 * DAY;

    fn current_pct(delta: f64, horizon: f64) -> f64 {
        let n = (horizon / delta).round();
        to_percent(predict_sigma_current(delta, 0.01, 1.5, n).unwrap())
    }

    #[test]
    fn current_noise_table_entries() {
        assert_abs_diff_eq!(current_pct(1.0, DAY), 0.0544, epsilon = 1e-4);
        assert_abs_diff_eq!(current_pct(10.0, YEAR), 3.2886, epsilon = 1e-4);
        assert_eq!(predict_sigma_current(1.0, 0.0, 1.5, 1000.0).unwrap(), 0.0);
    }

    #[test]
    fn integration_table_entries() {
        let pct = |rho: f64, delta: f64, horizon: f64| {
            to_percent(predict_sigma_integration(delta, 1.0, rho, 1.0, (horizon / delta).round()).unwrap())
        };
        assert_abs_diff_eq!(pct(0.1115, 1.0, 3600.0), 0.1858, epsilon = 1e-4);
        assert_abs_diff_eq!(pct(0.0348, 10.0, DAY), 0.8985, epsilon = 1e-4);
        assert_eq!(predict_sigma_integration(1.0, 0.0, 0.2, 1.5, 100.0).unwrap(), 0.0);
        assert_eq!(predict_sigma_integration(1.0, 1.0, 0.0, 1.5, 100.0).unwrap(), 0.0);
    }

    #[test]
    fn capacity_examples() {
        assert_abs_diff_eq!(predict_sigma_capacity(0.1, 0.4).unwrap(), 0.04, epsilon = 1e-15);
        assert_eq!(predict_sigma_capacity(0.1, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(predict_sigma_capacity(0.1, 1.0).unwrap(), 0.1);
        assert_abs_diff_eq!(predict_sigma_capacity(0.1, -0.4).unwrap(), 0.04, epsilon = 1e-15);
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(predict_sigma_efficiency(0.0, 0.0, 0.7, -0.2).unwrap(), 0.0);
        assert_abs_diff_eq!(predict_sigma_efficiency(0.05, 0.0, 1.0, -0.3).unwrap(), 0.05);
        assert_abs_diff_eq!(predict_sigma_efficiency(0.03, 0.04, 0.8, -0.6).unwrap(), 0.033941, epsilon = 1e-6);
    }

    #[test]
    fn timing_examples() {
        let rho = rho_delta_from_drift(3.0 * 60.0, 30.0 * DAY);
        assert_abs_diff_eq!(rho, 6.9444e-5, epsilon = 1e-9);
        assert_eq!(predict_sigma_timing(TimingModel::Fixed(rho), 1.0).unwrap(), TimingPrediction::Bias(rho));
        assert_eq!(predict_sigma_timing(TimingModel::Stochastic(0.0), 0.7).unwrap(), TimingPrediction::Sd(0.0));
        let both = NoiseSpec { sigma_delta: 1e-4, rho_delta_fixed: Some(1e-4), ..Default::default() };
        assert!(matches!(both.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(predict_sigma_current(1.0, -0.1, 1.5, 10.0).is_err());
        assert!(predict_sigma_current(1.0, 0.1, 0.0, 10.0).is_err());
        assert!(predict_sigma_capacity(-0.1, 0.5).is_err());
        assert!(NoiseSpec { sigma_i: -1.0, ..Default::default() }.validate().is_err());
    }

    fn decomp_all_charge(n: u64) -> CcDecomposition {
        CcDecomposition { n_c: n, ..Default::default() }
    }

    #[test]
    fn combined_degenerate_cases() {
        let belief = BeliefParams::new(1.5, 1.0, 1.0, 1.0).unwrap();
        let d = CcDecomposition { s_cc: 0.4, s_cc_c: 0.6, s_cc_d: -0.2, n_c: 500, n_d: 300 };
        assert_eq!(predict_combined(&NoiseSpec::default(), &belief, &d).unwrap().combined, 0.0);
        let only_i = NoiseSpec { sigma_i: 0.01, ..Default::default() };
        assert_eq!(
            predict_combined(&only_i, &belief, &d).unwrap().combined,
            predict_sigma_current(1.0, 0.01, 1.5, 800.0).unwrap()
        );
    }

    #[test]
    fn combined_table_case() {
        let belief = BeliefParams::new(1.5, 1.0, 1.0, 1.0).unwrap();
        let spec = NoiseSpec { sigma_i: 0.01, kappa: 1.0, sigma_l: 0.1115 * 1.5, ..Default::default() };
        let e = predict_combined(&spec, &belief, &decomp_all_charge(86_400)).unwrap();
        assert_abs_diff_eq!(to_percent(e.combined), 0.9120, epsilon = 1e-4);
        assert_relative_eq!(e.variance(), e.sigma_s_i.powi(2) + e.sigma_s_int.powi(2), max_relative = 1e-14);
    }

    #[test]
    fn fixed_timing_is_bias_not_spread() {
        let belief = BeliefParams::new(1.5, 1.0, 1.0, 1.0).unwrap();
        let spec = NoiseSpec { rho_delta_fixed: Some(1e-3), ..Default::default() };
        let d = CcDecomposition { s_cc: -0.5, s_cc_d: -0.5, n_d: 10, ..Default::default() };
        let e = predict_combined(&spec, &belief, &d).unwrap();
        assert_eq!(e.combined, 0.0);
        assert_abs_diff_eq!(e.timing_bias, -5e-4);
    }

    #[test]
    fn source_names_round_trip() {
        for s in ErrorSource::SINGLE.iter().chain([ErrorSource::Combined].iter()) {
            assert_eq!(s.as_str().parse::<ErrorSource>().unwrap(), *s);
        }
        assert!("bogus".parse::<ErrorSource>().is_err());
    }

    #[test]
    fn noise_spec_json_defaults() {
        let spec = NoiseSpec::from_json(r#"{"sigma_i": 0.01, "seed": 3}"#).unwrap();
        assert_eq!(spec.sigma_i, 0.01);
        assert_eq!(spec.seed, 3);
        assert_eq!(spec.sigma_batt, 0.0);
        assert_eq!(NoiseSpec::from_json("{}").unwrap(), NoiseSpec::default());
        assert!(NoiseSpec::from_json(r#"{"sigma_x": 1}"#).is_err());
    }

    fn aligned_scenario(spec: NoiseSpec) -> Scenario {
        let profile = generate_profile(&ProfileGenSpec {
            extent: Extent::Horizon(1800.0),
            amplitude: (-2.0, 2.0),
            duration: (5.0, 60.0),
            duration_step: Some(1.0),
            seed: 11,
        })
        .unwrap();
        let truth = BatteryTruth::new(1.5, 0.98, 0.96, 1.0).unwrap();
        Scenario::matched(profile, truth, spec, 0.5)
    }

    #[test]
    fn zero_spec_injection_is_exact() {
        let scenario = aligned_scenario(NoiseSpec::default());
        for source in ErrorSource::SINGLE.into_iter().chain([ErrorSource::Combined]) {
            let run = inject(source, &scenario, 4).unwrap();
            assert_eq!(run.estimate.len(), run.reference.len());
            for e in run.errors() {
                assert!(e.abs() < 1e-12, "{source}: {e}");
            }
        }
    }

    #[test]
    fn injection_is_deterministic() {
        let spec = NoiseSpec { sigma_i: 0.05, sigma_batt: 0.1, sigma_eta_c: 0.02, sigma_delta: 1e-3, seed: 9, ..Default::default() };
        let scenario = aligned_scenario(spec);
        assert_eq!(inject(ErrorSource::Combined, &scenario, 2).unwrap(), inject(ErrorSource::Combined, &scenario, 2).unwrap());
        assert_ne!(inject(ErrorSource::Combined, &scenario, 2).unwrap(), inject(ErrorSource::Combined, &scenario, 3).unwrap());
    }

    #[test]
    fn only_the_requested_mechanism_moves() {
        let spec = NoiseSpec { sigma_i: 0.05, sigma_batt: 0.1, sigma_eta_c: 0.02, sigma_delta: 1e-3, seed: 9, ..Default::default() };
        let scenario = aligned_scenario(spec);
        let c = corrupt(ErrorSource::Capacity, &scenario, 0).unwrap();
        assert_ne!(c.belief.c_batt, scenario.truth.c_true);
        assert_eq!(c.belief.eta_c, scenario.belief.eta_c);
        assert_eq!(c.belief.delta, scenario.belief.delta);
        assert_eq!(c.measured.samples, c.true_current);

        let c = corrupt(ErrorSource::Current, &scenario, 0).unwrap();
        assert_eq!(c.belief, scenario.belief);
        assert_ne!(c.measured.samples, c.true_current);

        let c = corrupt(ErrorSource::Timing, &scenario, 0).unwrap();
        assert_ne!(c.belief.delta, scenario.truth.delta_true);
        assert_eq!(c.measured.samples, c.true_current);
    }

    #[test]
    fn fixed_clock_error_scales_accumulated_soc() {
        let rho = rho_delta_from_drift(180.0, 30.0 * DAY);
        let scenario = aligned_scenario(NoiseSpec { rho_delta_fixed: Some(rho), ..Default::default() });
        let run = inject(ErrorSource::Timing, &scenario, 0).unwrap();
        let clean = scenario.clean_samples();
        let d = decompose(&clean.samples, &scenario.belief).unwrap();
        let last = run.errors().last().unwrap();
        assert_relative_eq!(last, rho * d.s_cc, max_relative = 1e-9);
    }

    #[test]
    fn capacity_draws_centre_on_truth() {
        let scenario = aligned_scenario(NoiseSpec { sigma_batt: 0.1, seed: 1, ..Default::default() });
        let draws: Vec<f64> =
            (0..1000).map(|m| corrupt(ErrorSource::Capacity, &scenario, m).unwrap().belief.c_batt).collect();
        let mean = draws.iter().sum::<f64>() / 1000.0;
        let sd = (draws.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        // 3 standard errors for the mean, ~3/√(2M) relative for the s.d.
        assert!((mean - 1.5).abs() < 3.0 * 0.1 / 1000f64.sqrt(), "mean {mean}");
        assert!((sd / 0.1 - 1.0).abs() < 0.07, "sd {sd}");
    }

    #[test]
    fn misaligned_profile_rejected_for_isolated_sources() {
        let profile = SegmentProfile::from_pairs(&[(1.5, 1.0), (2.5, -1.0)]).unwrap();
        let truth = BatteryTruth::new(1.5, 1.0, 1.0, 1.0).unwrap();
        let scenario = Scenario::matched(profile, truth, NoiseSpec::default(), 0.5);
        assert!(matches!(inject(ErrorSource::Capacity, &scenario, 0), Err(Error::InvalidInput(_))));
        assert!(inject(ErrorSource::Integration, &scenario, 0).is_ok());
    }

    #[test]
    fn current_noise_diverges_within_hours() {
        let profile = SegmentProfile::from_pairs(&[(3.5 * 3600.0, -0.4)]).unwrap();
        let truth = BatteryTruth::new(1.5, 1.0, 1.0, 0.2).unwrap();
        let spec = NoiseSpec { sigma_i: 0.01, seed: 2, ..Default::default() };
        let run = inject(ErrorSource::Current, &Scenario::matched(profile, truth, spec, 1.0), 0).unwrap();
        let first = run.errors().next().unwrap().abs();
        let last = run.errors().last().unwrap().abs();
        assert!(first < 1e-6);
        assert!(last > first);
    }
}
