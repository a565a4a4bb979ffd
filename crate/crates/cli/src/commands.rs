use std::fs;
use std::path::Path;

use apd_core::avalanche::{sample_gain_histogram, AvalancheConfig};
use apd_core::constants::PICOFARAD;
use apd_core::gain::{enf_empirical, enf_theory, mcintyre_pmf};
use apd_core::inference::{
    calibrate_gain, fit_k, fit_spectrum, CalibrationConfig, EnfPoint, FitResult, GainCurvePoint, SpectrumFit,
    SpectrumFitOptions,
};
use apd_core::ingest::{
    extract_pulse_heights, parse_trace, render_staircase, write_heights_csv, write_trace_csv, ExtractConfig,
    ResetPolicy,
};
use apd_core::spectrum::{
    bin_probabilities, chi_square, histogram, read_pulses_csv, synthesize_pulses, theoretical_spectrum,
    write_pulses_csv, ChiSquare, DEFAULT_N_MAX,
};
use apd_core::{
    Binning, DeviceModel, FreeParam, Histogram, McIntyreParams, Preset, PulseTiming, Readout, TruncationPolicy,
};
use serde_json::json;

use crate::args::*;
use crate::output::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Default average gain: the low-gain operating point.
const DEFAULT_M: f64 = 3.7;
const DEFAULT_PULSES: u64 = 100_000;
/// Bins with fewer expected counts are pooled for the χ² test.
const CHI_SQUARE_MIN_EXPECTED: f64 = 5.0;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Pmf(a) => pmf(a),
        Command::Enf(a) => enf(a),
        Command::Mc(a) => mc(a),
        Command::Synth(a) => synth(a),
        Command::SpectrumTheory(a) => spectrum_theory(a),
        Command::FitK(a) => fit_k_cmd(a),
        Command::FitSpectrum(a) => fit_spectrum_cmd(a),
        Command::GainCurve(a) => gain_curve(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn pmf(flags: PmfArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let params = McIntyreParams::new(require(a.k, "k")?, require(a.mean_gain, "M")?)?;
    let defaults = TruncationPolicy::default();
    let trunc = TruncationPolicy::new(
        a.tail_tolerance.unwrap_or(defaults.tail_tolerance),
        a.hard_cap.unwrap_or(defaults.hard_cap),
    )?;
    let dist = mcintyre_pmf(params, &trunc)?;
    a.tail_tolerance = Some(trunc.tail_tolerance);
    a.hard_cap = Some(trunc.hard_cap);
    let target = Target::new(&a.common, "pmf", Format::Json)?;
    a.common.resolve(&target, None);
    match target.format {
        Format::Json => write_json(&target.path, &dist)?,
        Format::Csv => write_table(
            &target.path,
            &["m", "p"],
            dist.probabilities()
                .iter()
                .enumerate()
                .skip(1)
                .map(|(m, p)| vec![m.to_string(), num(*p)]),
        )?,
    }
    let moments = dist.moments();
    let summary = json!({
        "max_carriers": dist.max_carriers(),
        "truncation_mass": dist.truncation_mass(),
        "mean": moments.mean,
        "enf": dist.enf()?,
    });
    write_manifest(&target, "pmf", None, &a, &[&target.path], summary)
}

fn enf(flags: EnfArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let k = require(a.k, "k")?;
    let gains = match (&a.gains, a.mean_gain) {
        (Some(g), None) if !g.is_empty() => g.clone(),
        (None, Some(m)) => vec![m],
        (Some(_), Some(_)) => return Err(CliError::validation("invalid-config", "give either M or gains")),
        _ => return Err(CliError::validation("missing-parameter", "'M' or 'gains' is required")),
    };
    let method = a.method.unwrap_or(EnfMethod::Theory);
    let mut points = Vec::with_capacity(gains.len());
    for &m in &gains {
        let params = McIntyreParams::new(k, m)?;
        let f = match method {
            EnfMethod::Theory => enf_theory(params),
            EnfMethod::Pmf => enf_empirical(&mcintyre_pmf(params, &TruncationPolicy::default())?)?,
        };
        points.push((m, f));
    }
    let target = Target::new(&a.common, "enf", Format::Json)?;
    a.common.resolve(&target, None);
    match target.format {
        Format::Json => write_json(
            &target.path,
            &json!({
                "k": k,
                "method": method,
                "points": points.iter().map(|(m, f)| json!({"M": m, "F": f})).collect::<Vec<_>>(),
            }),
        )?,
        Format::Csv => write_table(&target.path, &["M", "F"], points.iter().map(|(m, f)| vec![num(*m), num(*f)]))?,
    }
    write_manifest(&target, "enf", None, &a, &[&target.path], json!({ "points": points.len() }))
}

fn mc(flags: McArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let k = require(a.k, "k")?;
    let m = require(a.mean_gain, "M")?;
    let trials = require(a.trials, "trials")?;
    let seed = a.common.seed.unwrap_or(0);
    let mut cfg = AvalancheConfig::for_mean_gain(k, m, seed)?;
    if let Some(cap) = a.event_cap {
        cfg = cfg.with_event_cap(cap)?;
    }
    let run = sample_gain_histogram(&cfg, trials)?;
    run.check_censoring(a.max_censored.unwrap_or(1e-3))?;
    let dist = &run.distribution;
    let target = Target::new(&a.common, "mc", Format::Json)?;
    a.common.resolve(&target, Some(seed));
    match target.format {
        Format::Json => write_json(&target.path, dist)?,
        Format::Csv => write_table(
            &target.path,
            &["m", "p"],
            dist.probabilities()
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(m, p)| vec![m.to_string(), num(*p)]),
        )?,
    }
    let moments = dist.moments();
    let summary = json!({
        "trials": run.trials,
        "censored": run.censored,
        "beta_l": cfg.beta_l,
        "mean": moments.mean,
        "enf": dist.enf()?,
        "enf_theory": enf_theory(McIntyreParams::new(k, m)?),
    });
    write_manifest(&target, "mc", Some(seed), &a, &[&target.path], summary)
}

fn device(d: &DeviceArgs) -> Result<DeviceModel> {
    let preset = match d.preset.unwrap_or(PresetArg::Setup) {
        PresetArg::Setup => Preset::Setup,
        PresetArg::Figure => Preset::Figure,
    };
    let mut dev = DeviceModel::preset(preset, d.mean_gain.unwrap_or(DEFAULT_M))?;
    if let Some(k) = d.k {
        dev.gain = McIntyreParams::new(k, dev.gain.mean_gain())?;
    }
    if let Some(v) = d.n_bar {
        dev.n_bar = v;
    }
    if let Some(v) = d.dark_rate {
        dev.dark_rate = v;
    }
    if let Some(v) = d.c_f_pf {
        dev.c_f = v * PICOFARAD;
    }
    if let Some(v) = d.voltage_gain {
        dev.voltage_gain = v;
    }
    if let Some(v) = d.sigma_read {
        dev.sigma_read = v;
    }
    if let Some(v) = d.sigma_post {
        dev.sigma_post = v;
    }
    if let Some(v) = d.dark_multiplied {
        dev.dark_multiplied = v;
    }
    dev.validate()?;
    Ok(dev)
}

/// Uniform binning; the top edge defaults to just above the largest value.
fn binning(b: &BinArgs, values: &[f64]) -> Result<Binning> {
    let lo = b.bin_lo.unwrap_or(-30.0);
    let width = b.bin_width.unwrap_or(1.0);
    if !(width > 0.0) {
        return Err(CliError::validation("invalid-parameter", "bin_width must be positive"));
    }
    let hi = match b.bin_hi {
        Some(h) => h,
        None => values.iter().copied().filter(|v| v.is_finite()).fold(lo, f64::max) + width,
    };
    let bins = ((hi - lo) / width).ceil().max(1.0) as usize;
    Ok(Binning::uniform(lo, lo + bins as f64 * width, bins)?)
}

fn synth(flags: SynthArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let dev = device(&a.device)?;
    let n = a.pulses.unwrap_or(DEFAULT_PULSES);
    let seed = a.common.seed.unwrap_or(0);
    let pulses = synthesize_pulses(&dev, n, seed)?;
    let target = Target::new(&a.common, "synth", Format::Csv)?;
    a.common.resolve(&target, Some(seed));
    match target.format {
        Format::Csv => write_pulses_csv(&pulses, create(&target.path)?)?,
        Format::Json => write_json(&target.path, &pulses)?,
    }
    let observed: Vec<f64> = pulses.iter().map(|p| p.electrons_observed).collect();
    let mut outputs = vec![target.path.clone()];
    if let Some(path) = &a.histogram {
        let h = histogram(observed.iter().copied(), &binning(&a.bins, &observed)?);
        write_json(path, &h)?;
        outputs.push(path.clone());
    }
    if let Some(path) = &a.trace {
        let timing = PulseTiming {
            sampling_rate: a.sampling_rate.unwrap_or(PulseTiming::default().sampling_rate),
            ..PulseTiming::default()
        };
        let readout = Readout {
            c_f: dev.c_f,
            voltage_gain: dev.voltage_gain,
        };
        let reset = a.reset_level.map(|level_electrons| ResetPolicy { level_electrons });
        let trace = render_staircase(&observed, &timing, &readout, a.drift.unwrap_or(0.0), reset)?;
        write_trace_csv(&trace, create(path)?)?;
        outputs.push(path.clone());
    }
    let mean = observed.iter().sum::<f64>() / n.max(1) as f64;
    let summary = json!({
        "pulses": n,
        "device": dev,
        "mean_electrons": mean,
        "expected_mean_electrons": dev.mean_electrons(),
    });
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(&target, "synth", Some(seed), &a, &refs, summary)
}

fn spectrum_theory(flags: SpectrumTheoryArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let dev = device(&a.device)?;
    let lo = a.grid_lo.unwrap_or(-30.0);
    let hi = a.grid_hi.unwrap_or(30.0 + 15.0 * dev.gain.mean_gain());
    let points = a.grid_points.unwrap_or(((hi - lo) / 0.25).round() as usize + 1);
    if points < 2 || !(hi > lo) {
        return Err(CliError::validation("invalid-parameter", "grid needs hi > lo and at least 2 points"));
    }
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let density = theoretical_spectrum(&dev, &grid, a.n_max.unwrap_or(DEFAULT_N_MAX))?;
    let target = Target::new(&a.common, "spectrum-theory", Format::Csv)?;
    a.common.resolve(&target, None);
    match target.format {
        Format::Json => write_json(&target.path, &density)?,
        Format::Csv => write_table(
            &target.path,
            &["electrons", "density"],
            density.grid.iter().zip(&density.density).map(|(x, y)| vec![num(*x), num(*y)]),
        )?,
    }
    let summary = json!({
        "device": dev,
        "integral": density.integral(),
        "omitted_mass": density.omitted_mass,
    });
    write_manifest(&target, "spectrum-theory", None, &a, &[&target.path], summary)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation("invalid-input", format!("{}: {e}", path.display())))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CliError::validation("invalid-input", format!("{}: {e}", path.display())))
}

fn write_fit_table(path: &Path, fit: &FitResult) -> Result<()> {
    write_table(
        path,
        &["parameter", "value", "standard_error"],
        fit.parameters.iter().map(|(name, v)| {
            let se = fit.standard_errors.get(name).map_or_else(String::new, |s| num(*s));
            vec![name.clone(), num(*v), se]
        }),
    )
}

fn fit_k_cmd(flags: FitKArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let input = existing(a.input.as_ref(), "input")?;
    let points: Vec<EnfPoint> = if is_json(&input) { read_json(&input)? } else { read_csv(&input)? };
    let fit = fit_k(&points)?.require_converged()?;
    let target = Target::new(&a.common, "fit-k", Format::Json)?;
    a.common.resolve(&target, None);
    match target.format {
        Format::Json => write_json(&target.path, &fit)?,
        Format::Csv => write_fit_table(&target.path, &fit)?,
    }
    let summary = json!({ "points": points.len(), "k": fit.parameter("k"), "standard_error": fit.standard_error("k") });
    write_manifest(&target, "fit-k", None, &a, &[&target.path], summary)
}

struct FitReport {
    fit: SpectrumFit,
    chi: ChiSquare,
}

fn run_fit(hist: &Histogram, init: &DeviceModel, f: &FitArgs, seed: u64) -> Result<FitReport> {
    let free = f.free.clone().unwrap_or_else(|| vec![FreeParam::M, FreeParam::K]);
    let n_max = f.n_max.unwrap_or(DEFAULT_N_MAX);
    let opts = SpectrumFitOptions {
        n_max,
        restarts: f.restarts.unwrap_or(3),
        seed,
        ..SpectrumFitOptions::default()
    };
    let fit = fit_spectrum(hist, init, &free, &opts)?;
    let probs = bin_probabilities(&fit.device, &hist.binning(), n_max)?;
    let mut n_free = free.clone();
    n_free.sort();
    n_free.dedup();
    let chi = chi_square(hist, &probs, n_free.len(), CHI_SQUARE_MIN_EXPECTED)?;
    Ok(FitReport { fit, chi })
}

fn write_fit_outputs(target: &Target, report: &FitReport, extra: serde_json::Value) -> Result<std::path::PathBuf> {
    let result = &report.fit.result;
    match target.format {
        Format::Json => {
            let mut doc = json!({ "fit": result, "chi_square": report.chi });
            if let (Some(d), serde_json::Value::Object(e)) = (doc.as_object_mut(), extra) {
                d.extend(e);
            }
            write_json(&target.path, &doc)?;
        }
        Format::Csv => write_fit_table(&target.path, result)?,
    }
    let residuals = target.sibling("residuals.csv");
    write_table(
        &residuals,
        &["lower", "upper", "observed", "expected", "pearson"],
        report.fit.residuals.iter().map(|r| {
            vec![num(r.lower), num(r.upper), r.observed.to_string(), num(r.expected), num(r.pearson)]
        }),
    )?;
    Ok(residuals)
}

fn fit_spectrum_cmd(flags: FitSpectrumArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let input = existing(a.input.as_ref(), "input")?;
    let hist: Histogram = if is_json(&input) {
        read_json(&input)?
    } else {
        let pulses = read_pulses_csv(fs::File::open(&input).map_err(|e| io_error(&input, e))?)?;
        let values: Vec<f64> = pulses.iter().map(|p| p.electrons_observed).collect();
        histogram(values.iter().copied(), &binning(&a.bins, &values)?)
    };
    let init = device(&a.device)?;
    let seed = a.common.seed.unwrap_or(0);
    let report = run_fit(&hist, &init, &a.fit, seed)?;
    let target = Target::new(&a.common, "fit-spectrum", Format::Json)?;
    a.common.resolve(&target, Some(seed));
    let residuals = write_fit_outputs(&target, &report, json!({ "entries": hist.total() }))?;
    let summary = json!({
        "entries": hist.total(),
        "converged": report.fit.result.converged,
        "bound_hits": report.fit.result.bound_hits,
        "chi_square_p": report.chi.p_value,
    });
    write_manifest(&target, "fit-spectrum", Some(seed), &a, &[&target.path, &residuals], summary)
}

fn gain_curve(flags: GainCurveArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let input = existing(a.input.as_ref(), "input")?;
    let curve: Vec<GainCurvePoint> = if is_json(&input) { read_json(&input)? } else { read_csv(&input)? };
    let defaults = CalibrationConfig::default();
    let config = CalibrationConfig {
        window: a.window.unwrap_or(defaults.window),
        max_relative_slope: a.max_relative_slope.unwrap_or(defaults.max_relative_slope),
    };
    let unity = a.unity_bias.unwrap_or(18.5);
    let cal = calibrate_gain(&curve, unity, &config)?;
    let target = Target::new(&a.common, "gain-curve", Format::Csv)?;
    a.common.resolve(&target, None);
    match target.format {
        Format::Json => write_json(
            &target.path,
            &cal.iter().map(|(v, m)| json!({"bias_voltage": v, "M": m})).collect::<Vec<_>>(),
        )?,
        Format::Csv => write_table(&target.path, &["bias_voltage", "M"], cal.iter().map(|(v, m)| vec![num(*v), num(*m)]))?,
    }
    let summary = json!({ "points": cal.len(), "unity_bias": unity });
    write_manifest(&target, "gain-curve", None, &a, &[&target.path], summary)
}

fn analyze(flags: AnalyzeArgs) -> Result<()> {
    let mut a = merge(&flags, flags.common.config.as_deref())?;
    let input = existing(a.input.as_ref(), "input")?;
    let init = device(&a.device)?;
    let d = PulseTiming::default();
    let timing = PulseTiming {
        repetition_rate: a.repetition_rate.unwrap_or(d.repetition_rate),
        pulse_width: a.pulse_width.unwrap_or(d.pulse_width),
        sampling_rate: a.sampling_rate.unwrap_or(d.sampling_rate),
        pulse_delay: a.pulse_delay.unwrap_or(d.pulse_delay),
    };
    let de = ExtractConfig::default();
    let extract = ExtractConfig {
        drift_window: a.drift_window.unwrap_or(de.drift_window),
        reset_threshold_electrons: a.reset_threshold.unwrap_or(de.reset_threshold_electrons),
        single_sample_drift: a.single_sample_drift.map_or(de.single_sample_drift, Into::into),
    };
    let readout = Readout {
        c_f: init.c_f,
        voltage_gain: init.voltage_gain,
    };

    let parsed = parse_trace(fs::File::open(&input).map_err(|e| io_error(&input, e))?)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let extraction = extract_pulse_heights(&parsed.records, &timing, &readout, &extract)?;
    let values: Vec<f64> = extraction.heights.iter().map(|h| h.electrons).collect();
    let hist = histogram(values.iter().copied(), &binning(&a.bins, &values)?);
    let seed = a.common.seed.unwrap_or(0);
    let report = run_fit(&hist, &init, &a.fit, seed)?;

    let target = Target::new(&a.common, "analyze", Format::Json)?;
    a.common.resolve(&target, Some(seed));
    let extra = json!({
        "pulses": extraction.heights.len(),
        "resets": extraction.resets.len(),
        "warnings": parsed.warnings,
    });
    let residuals = write_fit_outputs(&target, &report, extra)?;
    let mut outputs = vec![target.path.clone(), residuals];
    if let Some(path) = &a.heights {
        write_heights_csv(&extraction.heights, create(path)?)?;
        outputs.push(path.clone());
    }
    let summary = json!({
        "samples": parsed.records.len(),
        "pulses": extraction.heights.len(),
        "resets": extraction.resets.len(),
        "timing": timing,
        "extract": extract,
        "converged": report.fit.result.converged,
        "chi_square_p": report.chi.p_value,
    });
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(&target, "analyze", Some(seed), &a, &refs, summary)
}
