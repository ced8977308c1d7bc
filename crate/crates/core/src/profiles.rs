//! Piecewise-constant current profiles and their exact (geometric) integrals.
//!
//! A [`SegmentProfile`] is a run of rectangles, so the Coulombs it moves up to
//! any time are a sum of signed rectangle areas. That sum is the ground truth
//! every Coulomb-counting experiment is compared against.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::model::{BatteryTruth, SocTrace, SECONDS_PER_HOUR};
use crate::rng::{stream, StreamPurpose};
use crate::sum::NeumaierSum;

/// Relative slack used when deciding whether a time sits on a segment boundary.
const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Relative spacing tolerance for uniformly sampled current logs.
pub const UNIFORM_SPACING_TOLERANCE: f64 = 1e-6;

/// Number of bins in the first-difference histogram.
pub const HISTOGRAM_BINS: usize = 101;

/// Half-width of the histogram in units of the first-difference s.d.
pub const HISTOGRAM_HALF_WIDTH_SD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Seconds.
    pub duration: f64,
    /// Amperes, positive when charging.
    pub amplitude: f64,
}

/// Piecewise-constant true current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProfile {
    segments: Vec<Segment>,
    total_duration: f64,
}

impl SegmentProfile {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (j, s) in segments.iter().enumerate() {
            ensure_positive(&format!("segment {j} duration"), s.duration)?;
            ensure_finite(&format!("segment {j} amplitude"), s.amplitude)?;
        }
        let total_duration = segments.iter().map(|s| s.duration).collect::<NeumaierSum>().value();
        Ok(Self { segments, total_duration })
    }

    /// Builds a profile from `(duration, amplitude)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(duration, amplitude)| Segment { duration, amplitude }).collect())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.total_duration
    }

    /// Start time of every segment followed by the end time of the last one.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut acc = NeumaierSum::new();
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        out.push(0.0);
        for s in &self.segments {
            acc.add(s.duration);
            out.push(acc.value());
        }
        out
    }

    /// Appends `other` after `self`.
    pub fn concat(&self, other: &SegmentProfile) -> SegmentProfile {
        let mut segments = self.segments.clone();
        segments.extend_from_slice(&other.segments);
        SegmentProfile::new(segments).expect("segments already validated")
    }

    /// True when every segment boundary is a whole multiple of `delta`.
    pub fn is_aligned(&self, delta: f64) -> bool {
        self.boundaries().iter().all(|&b| {
            let steps = b / delta;
            (steps - steps.round()).abs() <= BOUNDARY_TOLERANCE * steps.abs().max(1.0)
        })
    }

    /// Durations and amplitudes independently permuted by the given run's
    /// shuffle stream. Total duration, alignment and both multisets are kept.
    pub fn shuffled(&self, seed: u64, run_index: u64) -> SegmentProfile {
        let mut rng = stream(seed, run_index, StreamPurpose::ProfileShuffle);
        let mut durations: Vec<f64> = self.segments.iter().map(|s| s.duration).collect();
        let mut amplitudes: Vec<f64> = self.segments.iter().map(|s| s.amplitude).collect();
        durations.shuffle(&mut rng);
        amplitudes.shuffle(&mut rng);
        let segments = durations
            .into_iter()
            .zip(amplitudes)
            .map(|(duration, amplitude)| Segment { duration, amplitude })
            .collect();
        SegmentProfile { segments, total_duration: self.total_duration }
    }
}

/// How many segments a generated profile has.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    Count(usize),
    /// Keep drawing segments until this many seconds are covered, trimming
    /// the last one.
    Horizon(f64),
}

/// Parameters of the random profile generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileGenSpec {
    pub extent: Extent,
    /// Inclusive amplitude range in amperes.
    pub amplitude: (f64, f64),
    /// Inclusive duration range in seconds.
    pub duration: (f64, f64),
    /// When set, every duration is a whole multiple of this step.
    pub duration_step: Option<f64>,
    pub seed: u64,
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(Error::InvalidSpec(format!("{name} range [{lo}, {hi}] is empty")));
    }
    Ok(())
}

/// Draws a random piecewise-constant profile. Amplitudes and durations are
/// uniform on their ranges; the same spec always yields the same profile.
pub fn generate_profile(spec: &ProfileGenSpec) -> Result<SegmentProfile> {
    check_range("amplitude", spec.amplitude)?;
    check_range("duration", spec.duration)?;
    if spec.duration.0 <= 0.0 {
        return Err(Error::InvalidSpec("durations must be positive".into()));
    }
    let step_range = match spec.duration_step {
        Some(step) => {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::InvalidSpec(format!("duration step must be positive, got {step}")));
            }
            let lo = (spec.duration.0 / step - BOUNDARY_TOLERANCE).ceil().max(1.0) as u64;
            let hi = (spec.duration.1 / step + BOUNDARY_TOLERANCE).floor() as u64;
            if lo > hi {
                return Err(Error::InvalidSpec(format!(
                    "no multiple of {step} s lies in [{}, {}]",
                    spec.duration.0, spec.duration.1
                )));
            }
            Some((step, lo, hi))
        }
        None => None,
    };
    match spec.extent {
        Extent::Count(0) => return Err(Error::InvalidSpec("segment count must be at least 1".into())),
        Extent::Horizon(h) if !(h.is_finite() && h > 0.0) => {
            return Err(Error::InvalidSpec(format!("horizon must be positive, got {h}")))
        }
        _ => {}
    }

    let mut rng = stream(spec.seed, 0, StreamPurpose::ProfileGeneration);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let amplitude = draw_inclusive(rng, spec.amplitude);
        let duration = match step_range {
            Some((step, lo, hi)) => rng.random_range(lo..=hi) as f64 * step,
            None => draw_inclusive(rng, spec.duration),
        };
        Segment { duration, amplitude }
    };

    let segments = match spec.extent {
        Extent::Count(count) => (0..count).map(|_| draw(&mut rng)).collect(),
        Extent::Horizon(horizon) => {
            let mut segments = Vec::new();
            let mut covered = 0.0;
            while covered < horizon * (1.0 - BOUNDARY_TOLERANCE) {
                let mut seg = draw(&mut rng);
                if covered + seg.duration > horizon {
                    seg.duration = horizon - covered;
                }
                covered += seg.duration;
                segments.push(seg);
            }
            segments
        }
    };
    SegmentProfile::new(segments)
}

fn draw_inclusive<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn check_up_to(profile: &SegmentProfile, up_to: f64) -> Result<f64> {
    let total = profile.total_duration();
    if !up_to.is_finite() || up_to < 0.0 || up_to > total * (1.0 + BOUNDARY_TOLERANCE) {
        return Err(Error::InvalidInput(format!("time {up_to} s outside profile span [0, {total}] s")));
    }
    Ok(up_to.min(total))
}

/// Signed rectangle area (A·s) under the profile on `[0, up_to]`.
pub fn exact_coulombs(profile: &SegmentProfile, up_to: f64) -> Result<f64> {
    let up_to = check_up_to(profile, up_to)?;
    let mut area = NeumaierSum::new();
    let mut remaining = up_to;
    for s in profile.segments() {
        if remaining <= 0.0 {
            break;
        }
        area.add(s.amplitude * s.duration.min(remaining));
        remaining -= s.duration;
    }
    Ok(area.value())
}

/// Number of whole sample periods inside `span` seconds.
pub fn sample_count(span: f64, delta: f64) -> usize {
    (span / delta + BOUNDARY_TOLERANCE).floor() as usize
}

/// True SOC at every sample time `k·delta`, from the geometric integral with
/// the true capacity and the true efficiency of each segment's sign.
pub fn true_soc_trace(profile: &SegmentProfile, truth: &BatteryTruth, s0: f64, delta: f64) -> Result<SocTrace> {
    truth.validate()?;
    ensure_finite("s0", s0)?;
    ensure_positive("delta", delta)?;
    let n = sample_count(profile.total_duration(), delta);
    let scale = SECONDS_PER_HOUR * truth.c_true;
    let segments = profile.segments();
    let boundaries = profile.boundaries();

    // sweep: `closed` holds the efficiency-weighted area of all segments that
    // end at or before the current sample time
    let mut closed = NeumaierSum::new();
    let mut j = 0;
    let mut values = Vec::with_capacity(n);
    for k in 1..=n {
        let t = k as f64 * delta;
        while j < segments.len() && boundaries[j + 1] <= t {
            let s = &segments[j];
            closed.add(truth.efficiency(s.amplitude) * s.amplitude * s.duration);
            j += 1;
        }
        let mut area = closed;
        if j < segments.len() {
            let s = &segments[j];
            let partial = (t - boundaries[j]).max(0.0);
            area.add(truth.efficiency(s.amplitude) * s.amplitude * partial);
        }
        values.push(s0 + area.value() / scale);
    }
    Ok(SocTrace { s0, values, delta })
}

/// Uniformly sampled current; sample `k` (0-based) belongs to time `(k + 1)·delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCurrent {
    pub delta: f64,
    pub samples: Vec<f64>,
}

/// Samples the profile with a right-endpoint convention: each sample carries
/// the current of the segment that covers the end of its sample interval.
///
/// `clock_error` is the relative error of the sampling clock. The counter
/// believes the period is `delta` while samples are actually taken every
/// `delta / (1 + clock_error)` seconds of true time.
pub fn sample(profile: &SegmentProfile, delta: f64, clock_error: f64) -> SampledCurrent {
    let true_period = delta / (1.0 + clock_error);
    let n = sample_count(profile.total_duration(), true_period);
    let segments = profile.segments();
    let boundaries = profile.boundaries();
    let mut samples = Vec::with_capacity(n);
    let mut j = 0;
    for k in 1..=n {
        let t = k as f64 * true_period;
        let slack = BOUNDARY_TOLERANCE * t.max(true_period);
        while j + 1 < segments.len() && boundaries[j + 1] < t - slack {
            j += 1;
        }
        samples.push(segments.get(j).map_or(0.0, |s| s.amplitude));
    }
    SampledCurrent { delta, samples }
}

/// First-difference histogram with uniform bins spanning ±5 s.d. around zero.
/// Differences beyond the span fall into the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl DiffHistogram {
    fn build(diffs: &[f64]) -> Self {
        let sd = sample_sd(diffs);
        let half = HISTOGRAM_HALF_WIDTH_SD * sd;
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        let centre = HISTOGRAM_BINS / 2;
        for &d in diffs {
            let bin = if half > 0.0 {
                let pos = (d + half) / (2.0 * half) * HISTOGRAM_BINS as f64;
                (pos.floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                centre
            };
            counts[bin] += 1;
        }
        Self { lo: -half, hi: half, counts }
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Load statistics of a sampled current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub samples: usize,
    /// Sample s.d. of the load current, amperes.
    pub sigma_l: f64,
    /// `σ_i / C_batt` in 1/h, when a current-noise s.d. was supplied.
    pub rho_i_coeff: Option<f64>,
    /// `σ_L / C_batt` in 1/h.
    pub rho_int_coeff: f64,
    pub diff_histogram: DiffHistogram,
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().copied().collect::<NeumaierSum>().value() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).collect::<NeumaierSum>().value();
    (ss / (n - 1.0)).sqrt()
}

pub fn stats(sc: &SampledCurrent, c_batt: f64, sigma_i: Option<f64>) -> Result<LoadStats> {
    ensure_positive("c_batt", c_batt)?;
    let sigma_l = sample_sd(&sc.samples);
    let diffs: Vec<f64> = sc.samples.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(LoadStats {
        samples: sc.samples.len(),
        sigma_l,
        rho_i_coeff: sigma_i.map(|s| s / c_batt),
        rho_int_coeff: sigma_l / c_batt,
        diff_histogram: DiffHistogram::build(&diffs),
    })
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, path: &Path, expected: [&str; 2]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: 1,
        message: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        return Err(Error::Format {
            path: path.to_owned(),
            message: format!("expected header `{}`, found `{}`", expected.join(","), found.join(",")),
        });
    }
    Ok(())
}

fn parse_rows<R: Read>(reader: R, path: &Path, header: [&str; 2]) -> Result<Vec<(u64, f64, f64)>> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, path, header)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("`{raw}` is not a finite number in column `{}`", header[idx]),
            })
        };
        if record.len() != 2 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        rows.push((line, field(0)?, field(1)?));
    }
    Ok(rows)
}

/// Parses a `t_s,i_a` current log. Timestamps must increase strictly with a
/// uniform spacing.
pub fn read_current_log<R: Read>(reader: R, path: &Path) -> Result<SampledCurrent> {
    let rows = parse_rows(reader, path, ["t_s", "i_a"])?;
    if rows.len() < 2 {
        return Err(Error::Format {
            path: path.to_owned(),
            message: "at least two samples are needed to infer the sample period".into(),
        });
    }
    for w in rows.windows(2) {
        if w[1].1 <= w[0].1 {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("timestamps not strictly increasing at line {}", w[1].0),
            });
        }
    }
    let (first, last) = (rows[0].1, rows[rows.len() - 1].1);
    let delta = (last - first) / (rows.len() - 1) as f64;
    for w in rows.windows(2) {
        let dt = w[1].1 - w[0].1;
        if (dt - delta).abs() > UNIFORM_SPACING_TOLERANCE * delta {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("non-uniform spacing at line {}: {dt} s vs {delta} s", w[1].0),
            });
        }
    }
    Ok(SampledCurrent { delta, samples: rows.into_iter().map(|r| r.2).collect() })
}

pub fn load_csv(path: &Path) -> Result<SampledCurrent> {
    read_current_log(File::open(path)?, path)
}

/// Parses a `duration_s,amps` segment list.
pub fn read_segments<R: Read>(reader: R, path: &Path) -> Result<SegmentProfile> {
    let rows = parse_rows(reader, path, ["duration_s", "amps"])?;
    for &(line, duration, _) in &rows {
        if duration <= 0.0 {
            return Err(Error::Parse { path: path.to_owned(), line, message: "duration must be positive".into() });
        }
    }
    SegmentProfile::from_pairs(&rows.into_iter().map(|(_, d, a)| (d, a)).collect::<Vec<_>>())
}

pub fn load_segments_csv(path: &Path) -> Result<SegmentProfile> {
    read_segments(File::open(path)?, path)
}

pub fn write_segments<W: Write>(mut w: W, profile: &SegmentProfile) -> Result<()> {
    writeln!(w, "duration_s,amps")?;
    for s in profile.segments() {
        writeln!(w, "{},{}", s.duration, s.amplitude)?;
    }
    Ok(())
}

pub fn write_current_log<W: Write>(mut w: W, sc: &SampledCurrent) -> Result<()> {
    writeln!(w, "t_s,i_a")?;
    for (k, i) in sc.samples.iter().enumerate() {
        writeln!(w, "{},{}", (k + 1) as f64 * sc.delta, i)?;
    }
    Ok(())
}
