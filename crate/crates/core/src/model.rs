//! Battery parameters and the discrete Coulomb-counting recursion.
//!
//! SOC is carried as a fraction throughout; percentages only appear at the
//! reporting boundary. Traces are never clamped to `[0, 1]` since the error
//! analysis relies on unclamped accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::sum::NeumaierSum;

/// Seconds per hour, the conversion between A·s and A·h.
pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Traces at least this long are accumulated with compensated summation.
pub const COMPENSATION_THRESHOLD: usize = 100_000;

fn check_efficiency(name: &str, eta: f64) -> Result<()> {
    if eta.is_finite() && eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must lie in (0, 1], got {eta}")))
    }
}

/// Ground-truth battery parameters used to build reference SOC traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryTruth {
    /// True capacity in A·h.
    pub c_true: f64,
    pub eta_c_true: f64,
    pub eta_d_true: f64,
    /// True sample period in seconds.
    pub delta_true: f64,
}

impl BatteryTruth {
    pub fn new(c_true: f64, eta_c_true: f64, eta_d_true: f64, delta_true: f64) -> Result<Self> {
        let truth = Self { c_true, eta_c_true, eta_d_true, delta_true };
        truth.validate()?;
        Ok(truth)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("c_true", self.c_true)?;
        check_efficiency("eta_c_true", self.eta_c_true)?;
        check_efficiency("eta_d_true", self.eta_d_true)?;
        ensure_positive("delta_true", self.delta_true)
    }

    /// Efficiency applied to a current of the given sign.
    pub fn efficiency(&self, current: f64) -> f64 {
        select_efficiency(current, self.eta_c_true, self.eta_d_true)
    }
}

/// Parameters the Coulomb counter believes in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefParams {
    /// Assumed capacity in A·h.
    pub c_batt: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    /// Assumed sample period in seconds.
    pub delta: f64,
}

impl BeliefParams {
    pub fn new(c_batt: f64, eta_c: f64, eta_d: f64, delta: f64) -> Result<Self> {
        let belief = Self { c_batt, eta_c, eta_d, delta };
        belief.validate()?;
        Ok(belief)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("c_batt", self.c_batt)?;
        check_efficiency("eta_c", self.eta_c)?;
        check_efficiency("eta_d", self.eta_d)?;
        ensure_positive("delta", self.delta)
    }

    /// Looser check used by the counter itself. Perturbed beliefs drawn by the
    /// injectors may carry an efficiency slightly above one.
    pub(crate) fn check_usable(&self) -> Result<()> {
        ensure_positive("c_batt", self.c_batt)?;
        ensure_positive("eta_c", self.eta_c)?;
        ensure_positive("eta_d", self.eta_d)?;
        ensure_positive("delta", self.delta)
    }

    pub fn efficiency(&self, current: f64) -> f64 {
        select_efficiency(current, self.eta_c, self.eta_d)
    }

    /// SOC change contributed by one sample of `current` amperes.
    #[inline]
    pub fn increment(&self, current: f64) -> f64 {
        self.efficiency(current) * self.delta * current / (SECONDS_PER_HOUR * self.c_batt)
    }
}

impl From<&BatteryTruth> for BeliefParams {
    fn from(truth: &BatteryTruth) -> Self {
        Self {
            c_batt: truth.c_true,
            eta_c: truth.eta_c_true,
            eta_d: truth.eta_d_true,
            delta: truth.delta_true,
        }
    }
}

/// Charging efficiency for positive current, discharging for negative. At
/// zero current the term vanishes, so the choice is immaterial.
#[inline]
pub fn select_efficiency(current: f64, eta_c: f64, eta_d: f64) -> f64 {
    if current > 0.0 {
        eta_c
    } else {
        eta_d
    }
}

/// A sequence of SOC values, one per sample.
///
/// `values[j]` is the SOC after sample `j + 1`, i.e. at time `(j + 1)·delta`.
/// The initial SOC is kept separately in `s0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocTrace {
    pub s0: f64,
    pub values: Vec<f64>,
    pub delta: f64,
}

impl SocTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn final_soc(&self) -> f64 {
        self.values.last().copied().unwrap_or(self.s0)
    }

    /// Sample time of `values[j]` in seconds.
    pub fn time_of(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.delta
    }
}

/// Total SOC change split into its charging and discharging parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CcDecomposition {
    pub s_cc: f64,
    pub s_cc_c: f64,
    pub s_cc_d: f64,
    /// Samples with strictly positive current.
    pub n_c: u64,
    /// Samples with strictly negative current.
    pub n_d: u64,
}

impl CcDecomposition {
    /// `η_c·n_c + η_d·n_d` (or the squared-efficiency variant).
    pub fn weighted_count(&self, eta_c: f64, eta_d: f64, weighting: EfficiencyWeighting) -> f64 {
        weighting.weighted_count(eta_c, eta_d, self.n_c, self.n_d)
    }
}

/// How efficiencies weight the sample counts in the time-cumulative variance
/// formulas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencyWeighting {
    /// `η_c·n_c + η_d·n_d`, as the closed-form tables are built.
    #[default]
    Literal,
    /// `η_c²·n_c + η_d²·n_d`, which is what the per-sample noise terms imply.
    Squared,
}

impl EfficiencyWeighting {
    pub fn from_flag(efficiency_squared: bool) -> Self {
        if efficiency_squared {
            Self::Squared
        } else {
            Self::Literal
        }
    }

    pub fn weight(self, eta: f64) -> f64 {
        match self {
            Self::Literal => eta,
            Self::Squared => eta * eta,
        }
    }

    pub fn weighted_count(self, eta_c: f64, eta_d: f64, n_c: u64, n_d: u64) -> f64 {
        self.weight(eta_c) * n_c as f64 + self.weight(eta_d) * n_d as f64
    }
}

/// Incrementally built [`CcDecomposition`].
#[derive(Debug, Clone, Default)]
pub struct RunningDecomposition {
    charge: NeumaierSum,
    discharge: NeumaierSum,
    n_c: u64,
    n_d: u64,
}

impl RunningDecomposition {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, current: f64, belief: &BeliefParams) {
        let inc = belief.increment(current);
        if current > 0.0 {
            self.charge.add(inc);
            self.n_c += 1;
        } else if current < 0.0 {
            self.discharge.add(inc);
            self.n_d += 1;
        }
    }

    pub fn snapshot(&self) -> CcDecomposition {
        let s_cc_c = self.charge.value();
        let s_cc_d = self.discharge.value();
        CcDecomposition { s_cc: s_cc_c + s_cc_d, s_cc_c, s_cc_d, n_c: self.n_c, n_d: self.n_d }
    }
}

/// One step of the Coulomb counter: `s + η·Δ·i / (3600·C)`.
pub fn cc_step(s_prev: f64, current: f64, belief: &BeliefParams) -> Result<f64> {
    ensure_finite("s_prev", s_prev)?;
    ensure_finite("current", current)?;
    belief.check_usable()?;
    Ok(s_prev + belief.increment(current))
}

/// Runs the counter over a whole current sequence starting from `s0`.
pub fn cc_trace(currents: &[f64], s0: f64, belief: &BeliefParams) -> Result<SocTrace> {
    ensure_finite("s0", s0)?;
    belief.check_usable()?;
    if let Some(bad) = currents.iter().position(|i| !i.is_finite()) {
        return Err(Error::InvalidInput(format!("current sample {bad} is not finite")));
    }

    let mut values = Vec::with_capacity(currents.len());
    if currents.len() < COMPENSATION_THRESHOLD {
        let mut s = s0;
        for &i in currents {
            s += belief.increment(i);
            values.push(s);
        }
    } else {
        let mut acc = NeumaierSum::new();
        for &i in currents {
            acc.add(belief.increment(i));
            values.push(s0 + acc.value());
        }
    }
    Ok(SocTrace { s0, values, delta: belief.delta })
}

/// Splits the total SOC change of `currents` into charging and discharging
/// parts. Zero-current samples count towards neither `n_c` nor `n_d`.
pub fn decompose(currents: &[f64], belief: &BeliefParams) -> Result<CcDecomposition> {
    belief.check_usable()?;
    let mut running = RunningDecomposition::new();
    for (k, &i) in currents.iter().enumerate() {
        ensure_finite(&format!("current sample {k}"), i)?;
        running.push(i, belief);
    }
    Ok(running.snapshot())
}

/// Decomposition after every sample; entry `j` covers samples `0..=j`.
pub fn decomposition_series(currents: &[f64], belief: &BeliefParams) -> Result<Vec<CcDecomposition>> {
    belief.check_usable()?;
    let mut running = RunningDecomposition::new();
    currents
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            ensure_finite(&format!("current sample {k}"), i)?;
            running.push(i, belief);
            Ok(running.snapshot())
        })
        .collect()
}
