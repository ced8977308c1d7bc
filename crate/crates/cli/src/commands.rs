use std::io::{self, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context as _, Result};
use clap::ArgMatches;
use coulomb_core::error_model::{inject, predict_combined, to_percent, ErrorSource, NoiseSpec, Scenario};
use coulomb_core::model::{BatteryTruth, BeliefParams, CcDecomposition};
use coulomb_core::montecarlo::{default_tolerance, fit_kappa, run_mc, theoretical_curve, INTEGRATION_RESIDUAL_TOLERANCE};
use coulomb_core::profiles::{
    generate_profile, load_csv, load_segments_csv, sample, stats, write_segments, Extent, ProfileGenSpec,
    SegmentProfile,
};
use coulomb_core::tracker::{track, MeasurementModel, ProcessNoise, ProcessNoiseRule, TrackOptions};
use serde_json::json;

use crate::config::{parse_horizon, Context};
use crate::{
    BatteryArgs, Cli, Command, FitKappaArgs, GenProfileArgs, McArgs, NoiseArgs, PredictArgs, ProfileArgs,
    SimulateArgs, StatsArgs, TrackArgs,
};

const DEFAULT_YEAR_DAYS: f64 = 365.0;

pub enum Status {
    Pass,
    OutOfTolerance,
}

pub fn run(cli: Cli, matches: &ArgMatches) -> Result<Status> {
    let name = match &cli.command {
        Command::Predict(_) => "predict",
        Command::Simulate(_) => "simulate",
        Command::Mc(_) => "mc",
        Command::FitKappa(_) => "fit-kappa",
        Command::Track(_) => "track",
        Command::GenProfile(_) => "gen-profile",
        Command::Stats(_) => "stats",
    };
    let mut ctx = Context::new(name, cli.config.as_deref(), cli.seed, cli.out.clone(), matches)?;
    match cli.command {
        Command::Predict(a) => {
            let a = ctx.resolve(&a)?;
            predict(&mut ctx, a)
        }
        Command::Simulate(a) => {
            let a = ctx.resolve(&a)?;
            simulate(&mut ctx, a)
        }
        Command::Mc(a) => {
            let a = ctx.resolve(&a)?;
            mc(&mut ctx, a)
        }
        Command::FitKappa(a) => {
            let a = ctx.resolve(&a)?;
            fit(&mut ctx, a)
        }
        Command::Track(a) => {
            let a = ctx.resolve(&a)?;
            tracker(&mut ctx, a)
        }
        Command::GenProfile(a) => {
            let a = ctx.resolve(&a)?;
            gen_profile(&mut ctx, a)
        }
        Command::Stats(a) => {
            let a = ctx.resolve(&a)?;
            load_stats(&mut ctx, a)
        }
    }
}

fn truth(b: &BatteryArgs) -> Result<BatteryTruth> {
    Ok(BatteryTruth::new(b.capacity, b.eta_c, b.eta_d, b.delta)?)
}

fn noise_spec(n: &NoiseArgs, seed: u64) -> Result<NoiseSpec> {
    let spec = NoiseSpec {
        sigma_i: n.sigma_i,
        kappa: n.kappa,
        sigma_l: n.sigma_l,
        sigma_batt: n.sigma_batt,
        sigma_eta_c: n.sigma_eta_c,
        sigma_eta_d: n.sigma_eta_d,
        sigma_delta: n.sigma_delta,
        rho_delta_fixed: n.rho_delta,
        seed,
        efficiency_squared: n.efficiency_squared,
    };
    spec.validate()?;
    Ok(spec)
}

fn source(text: &str) -> Result<ErrorSource> {
    Ok(text.parse::<ErrorSource>()?)
}

struct GenDefaults {
    horizon: &'static str,
    amplitude: (f64, f64),
    /// Duration range and step as multiples of the sample period.
    duration: (f64, f64),
    step: f64,
}

const MIXED_ALIGNED: GenDefaults = GenDefaults { horizon: "3.5h", amplitude: (-1.5, 1.5), duration: (10.0, 300.0), step: 1.0 };
const SUB_SAMPLE: GenDefaults = GenDefaults { horizon: "4h", amplitude: (-1.5, 1.5), duration: (0.015, 0.3), step: 0.0 };

/// Loads the profile file, or fills in generator defaults and generates one.
fn resolve_profile(args: &mut ProfileArgs, defaults: &GenDefaults, delta: f64, seed: u64) -> Result<SegmentProfile> {
    if let Some(path) = &args.profile {
        return Ok(load_segments_csv(path)?);
    }
    let horizon = args.horizon.get_or_insert_with(|| defaults.horizon.to_owned()).clone();
    let amp_min = *args.amp_min.get_or_insert(defaults.amplitude.0);
    let amp_max = *args.amp_max.get_or_insert(defaults.amplitude.1);
    let dur_min = *args.dur_min.get_or_insert(defaults.duration.0 * delta);
    let dur_max = *args.dur_max.get_or_insert(defaults.duration.1 * delta);
    let step = *args.dur_step.get_or_insert(defaults.step * delta);
    ensure!(step >= 0.0, "--dur-step must be non-negative");
    Ok(generate_profile(&ProfileGenSpec {
        extent: Extent::Horizon(parse_horizon(&horizon, DEFAULT_YEAR_DAYS)?),
        amplitude: (amp_min, amp_max),
        duration: (dur_min, dur_max),
        duration_step: (step > 0.0).then_some(step),
        seed,
    })?)
}

fn predict(ctx: &mut Context, a: PredictArgs) -> Result<Status> {
    ensure!(!a.deltas.is_empty() && !a.horizons.is_empty(), "the prediction grid is empty");
    ensure!((0.0..=1.0).contains(&a.charge_fraction), "--charge-fraction must lie in [0, 1]");
    ensure!(a.year_days > 0.0, "--year-days must be positive");
    let mut noise = noise_spec(&a.noise, ctx.seed)?;
    if let Some(rho) = a.rho_load {
        ensure!(rho >= 0.0, "--rho-load must be non-negative");
        noise.sigma_l = rho * a.battery.capacity;
    }
    let (s_cc_c, s_cc_d) = if a.s_cc >= 0.0 { (a.s_cc, 0.0) } else { (0.0, a.s_cc) };

    let mut rows = Vec::new();
    for &delta in &a.deltas {
        ensure!(delta.is_finite() && delta > 0.0, "sample period {delta} must be positive");
        let belief = BeliefParams::new(a.battery.capacity, a.battery.eta_c, a.battery.eta_d, delta)?;
        for label in &a.horizons {
            let horizon = parse_horizon(label, a.year_days)?;
            ensure!(horizon >= delta, "horizon {label} is shorter than the sample period {delta} s");
            let n = (horizon / delta).round() as u64;
            let n_c = (a.charge_fraction * n as f64).round() as u64;
            let d = CcDecomposition { s_cc: a.s_cc, s_cc_c, s_cc_d, n_c, n_d: n - n_c };
            rows.push((delta, label.clone(), horizon, n, predict_combined(&noise, &belief, &d)?));
        }
    }

    writeln!(
        io::stdout(),
        "{:>8} {:>8} {:>12} {:>11} {:>14} {:>11} {:>13} {:>9} {:>11}",
        "delta_s", "horizon", "samples", "current_%", "integration_%", "capacity_%", "efficiency_%", "timing_%",
        "combined_%"
    )?;
    for (delta, label, _, n, e) in &rows {
        writeln!(
        io::stdout(),
            "{:>8} {:>8} {:>12} {:>11.4} {:>14.4} {:>11.4} {:>13.4} {:>9.4} {:>11.4}",
            delta,
            label,
            n,
            to_percent(e.sigma_s_i),
            to_percent(e.sigma_s_int),
            to_percent(e.sigma_s_c),
            to_percent(e.sigma_s_eta),
            to_percent(e.sigma_s_delta),
            to_percent(e.combined)
        )?;
    }
    if ctx.out.is_some() {
        ctx.emit_csv("predict", |w| {
            let mut out = csv_writer(w);
            out.write_record([
                "delta_s", "horizon", "horizon_s", "samples", "current_sd", "integration_sd", "capacity_sd",
                "efficiency_sd", "timing_sd", "combined_sd", "timing_bias",
            ])?;
            for (delta, label, horizon, n, e) in &rows {
                out.write_record([
                    delta.to_string(),
                    label.clone(),
                    horizon.to_string(),
                    n.to_string(),
                    e.sigma_s_i.to_string(),
                    e.sigma_s_int.to_string(),
                    e.sigma_s_c.to_string(),
                    e.sigma_s_eta.to_string(),
                    e.sigma_s_delta.to_string(),
                    e.combined.to_string(),
                    e.timing_bias.to_string(),
                ])?;
            }
            out.flush()?;
            Ok(())
        })?;
    }
    ctx.finish(&a, json!({ "rows": rows.len() }))?;
    Ok(Status::Pass)
}

fn csv_writer(w: &mut dyn std::io::Write) -> csv::Writer<&mut dyn std::io::Write> {
    csv::Writer::from_writer(w)
}

fn simulate(ctx: &mut Context, mut a: SimulateArgs) -> Result<Status> {
    let src = source(&a.source)?;
    let truth = truth(&a.battery)?;
    let profile = resolve_profile(&mut a.profile, &MIXED_ALIGNED, a.battery.delta, ctx.seed)?;
    let scenario = Scenario::matched(profile, truth, noise_spec(&a.noise, ctx.seed)?, a.battery.s0);
    let run = inject(src, &scenario, a.run_index)?;
    let predicted = theoretical_curve(src, &scenario, &scenario.clean_decomposition()?)?;
    ctx.emit_csv("simulate", |w| {
        let mut out = csv_writer(w);
        out.write_record(["k", "t_s", "s_true", "s_estimate", "error", "predicted_sd"])?;
        for (j, ((est, tru), sd)) in run.estimate.values.iter().zip(&run.reference.values).zip(&predicted).enumerate() {
            out.write_record([
                (j + 1).to_string(),
                run.reference.time_of(j).to_string(),
                tru.to_string(),
                est.to_string(),
                (est - tru).to_string(),
                sd.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    let final_error = run.errors().last().unwrap_or(0.0);
    let final_sd = predicted.last().copied().unwrap_or(0.0);
    ctx.say(true, &format!(
        "{src}: {} samples, final error {:.4} %, predicted s.d. {:.4} %",
        run.estimate.len(),
        to_percent(final_error),
        to_percent(final_sd)
    ))?;
    ctx.finish(&a, json!({ "samples": run.estimate.len(), "final_error": final_error, "final_predicted_sd": final_sd }))?;
    Ok(Status::Pass)
}

fn mc(ctx: &mut Context, mut a: McArgs) -> Result<Status> {
    let src = source(&a.source)?;
    let truth = truth(&a.battery)?;
    let profile = resolve_profile(&mut a.profile, &MIXED_ALIGNED, a.battery.delta, ctx.seed)?;
    let scenario = Scenario::matched(profile, truth, noise_spec(&a.noise, ctx.seed)?, a.battery.s0);
    let tolerance = *a.tolerance.get_or_insert(default_tolerance(src));
    ensure!(tolerance >= 0.0, "--tolerance must be non-negative");
    let result = run_mc(src, &scenario, a.runs)?;
    ctx.emit_csv("mc", |w| Ok(result.write_csv(w)?))?;
    let pass = result.within(tolerance);
    let dev = result.max_rel_dev.map_or("n/a (zero theory)".to_owned(), |d| format!("{d:.4}"));
    ctx.say(true, &format!(
        "{src}: M={} runs, {} samples, max rel dev {dev} (tolerance {tolerance}) -> {}",
        a.runs,
        result.len(),
        if pass { "PASS" } else { "FAIL" }
    ))?;
    ctx.finish(&a, json!({ "summary": result.summary(), "tolerance": tolerance, "pass": pass }))?;
    Ok(if pass { Status::Pass } else { Status::OutOfTolerance })
}

fn fit(ctx: &mut Context, mut a: FitKappaArgs) -> Result<Status> {
    let truth = truth(&a.battery)?;
    let profile = resolve_profile(&mut a.profile, &SUB_SAMPLE, a.battery.delta, ctx.seed)?;
    let spec = NoiseSpec { seed: ctx.seed, ..Default::default() };
    let scenario = Scenario::matched(profile, truth, spec, a.battery.s0);
    let tolerance = *a.tolerance.get_or_insert(INTEGRATION_RESIDUAL_TOLERANCE);
    let f = fit_kappa(&scenario, a.runs)?;
    ctx.emit_csv("fit-kappa", |w| Ok(f.result.write_csv(w)?))?;
    let pass = f.result.within(tolerance);
    let dev = f.result.max_rel_dev.map_or("n/a".to_owned(), |d| format!("{d:.4}"));
    ctx.say(true, &format!(
        "kappa {:.4} (sigma_L {:.4} A, M={}), residual max rel dev {dev} (tolerance {tolerance}) -> {}",
        f.kappa,
        f.sigma_l,
        a.runs,
        if pass { "PASS" } else { "FAIL" }
    ))?;
    ctx.finish(&a, json!({ "kappa": f.kappa, "sigma_l": f.sigma_l, "summary": f.result.summary(), "tolerance": tolerance, "pass": pass }))?;
    Ok(if pass { Status::Pass } else { Status::OutOfTolerance })
}

fn process_noise(text: &str) -> Result<ProcessNoise> {
    Ok(match text {
        "derived" | "incremental" => ProcessNoise::Derived(ProcessNoiseRule::Incremental),
        "literal" => ProcessNoise::Derived(ProcessNoiseRule::LiteralUnitStep),
        other => {
            let q: f64 = other
                .parse()
                .with_context(|| format!("--process-noise must be `derived`, `literal` or a number, got `{other}`"))?;
            ensure!(q.is_finite() && q >= 0.0, "constant process noise must be non-negative");
            ProcessNoise::Constant(q)
        }
    })
}

fn tracker(ctx: &mut Context, mut a: TrackArgs) -> Result<Status> {
    ensure!(a.runs >= 1, "--runs must be at least 1");
    let noise = process_noise(&a.process_noise)?;
    let truth = truth(&a.battery)?;
    let profile = resolve_profile(&mut a.profile, &MIXED_ALIGNED, a.battery.delta, ctx.seed)?;
    let scenario = Scenario::matched(profile, truth, noise_spec(&a.noise, ctx.seed)?, a.battery.s0);
    let model = MeasurementModel::new(a.ocv.clone(), vec![a.r0], a.sigma_z)?;
    let first = track(&scenario, &model, &TrackOptions { noise, p0: a.p0, run_index: 0 })?;
    let mut rmse = vec![first.rmse];
    for m in 1..a.runs {
        rmse.push(track(&scenario, &model, &TrackOptions { noise, p0: a.p0, run_index: m })?.rmse);
    }
    ctx.emit_csv("track", |w| Ok(first.write_csv(w)?))?;
    let mut sorted = rmse.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    ctx.say(true, &format!(
        "{} run(s), RMSE first {:.4} %, median {:.4} %",
        a.runs,
        to_percent(first.rmse),
        to_percent(median)
    ))?;
    ctx.finish(&a, json!({ "rmse": rmse, "median_rmse": median }))?;
    Ok(Status::Pass)
}

fn gen_profile(ctx: &mut Context, mut a: GenProfileArgs) -> Result<Status> {
    let extent = match (a.count, &a.horizon) {
        (Some(n), _) => Extent::Count(n),
        (None, Some(h)) => Extent::Horizon(parse_horizon(h, a.year_days)?),
        (None, None) => {
            a.horizon = Some("1h".into());
            Extent::Horizon(3600.0)
        }
    };
    ensure!(a.dur_step >= 0.0, "--dur-step must be non-negative");
    let profile = generate_profile(&ProfileGenSpec {
        extent,
        amplitude: (a.amp_min, a.amp_max),
        duration: (a.dur_min, a.dur_max),
        duration_step: (a.dur_step > 0.0).then_some(a.dur_step),
        seed: ctx.seed,
    })?;
    ctx.emit_csv("profile", |w| Ok(write_segments(w, &profile)?))?;
    ctx.say(true, &format!(
        "{} segments, {} s",
        profile.segments().len(),
        profile.total_duration()
    ))?;
    ctx.finish(&a, json!({ "segments": profile.segments().len(), "total_duration_s": profile.total_duration() }))?;
    Ok(Status::Pass)
}

fn load_stats(ctx: &mut Context, a: StatsArgs) -> Result<Status> {
    let sampled = match (&a.log, &a.profile) {
        (Some(path), _) => load_csv(path)?,
        (None, Some(path)) => {
            ensure!(a.delta > 0.0, "--delta must be positive");
            sample(&load_segments_csv(Path::new(path))?, a.delta, 0.0)
        }
        (None, None) => bail!("give a current log (--log) or a segment profile (--profile)"),
    };
    let s = stats(&sampled, a.capacity, a.sigma_i)?;
    let report = json!({
        "samples": s.samples,
        "delta_s": sampled.delta,
        "sigma_l_a": s.sigma_l,
        "rho_load_per_h": s.rho_int_coeff,
        "rho_current_per_h": s.rho_i_coeff,
        "diff_histogram": s.diff_histogram,
    });
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&report)?)?;
    ctx.finish(&a, report)?;
    Ok(Status::Pass)
}
