//! Voltage-trace ingestion: CSV parsing, drift removal and per-pulse step
//! extraction from an integrating (staircase) readout.
//!
//! Timing model: period `p` starts at `p / repetition_rate` on the trace clock; its pulse
//! occupies `[pulse_delay, pulse_delay + pulse_width]` into the period.
//! Samples between two pulses form a plateau segment. The height of pulse
//! `p` is the difference of the plateau levels on either side, after
//! removing a linear drift, converted to electrons.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::v_out;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp: f64,
    pub voltage: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedTrace {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

/// Largest tolerated fraction of malformed lines.
pub const MAX_BAD_FRACTION: f64 = 1e-3;

/// Parse a two-column `timestamp,voltage` CSV. A non-numeric first line is
/// taken as a header. Malformed lines are skipped and reported; more than
/// [`MAX_BAD_FRACTION`] of them is fatal.
pub fn parse_trace<R: Read>(reader: R) -> Result<ParsedTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = ParsedTrace::default();
    let mut bad: Vec<(usize, String)> = Vec::new();
    let mut lines = 0usize;
    let mut previous: Option<f64> = None;

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed = (rec.len() == 2)
            .then(|| Some((rec[0].parse::<f64>().ok()?, rec[1].parse::<f64>().ok()?)))
            .flatten()
            .filter(|(t, v)| t.is_finite() && v.is_finite());
        let Some((timestamp, voltage)) = parsed else {
            if i == 0 && lines == 0 {
                // header
                continue;
            }
            lines += 1;
            bad.push((line, format!("line {line}: expected two numeric columns")));
            continue;
        };
        lines += 1;
        if let Some(prev) = previous {
            if timestamp <= prev {
                return Err(Error::NonMonotonicTime {
                    line,
                    timestamp,
                    previous: prev,
                });
            }
        }
        previous = Some(timestamp);
        out.records.push(TraceRecord { timestamp, voltage });
    }

    if lines == 0 {
        out.warnings.push("empty trace".into());
    }
    if !bad.is_empty() && bad.len() as f64 > MAX_BAD_FRACTION * lines as f64 {
        return Err(Error::Parse {
            line: bad[0].0,
            message: format!("{} of {} lines malformed", bad.len(), lines),
        });
    }
    out.warnings.extend(bad.into_iter().map(|(_, m)| m));
    Ok(out)
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseTiming {
    /// Hz
    pub repetition_rate: f64,
    /// s
    pub pulse_width: f64,
    /// Hz
    pub sampling_rate: f64,
    /// Start of each pulse after its period boundary, s.
    pub pulse_delay: f64,
}

impl Default for PulseTiming {
    fn default() -> Self {
        Self {
            repetition_rate: 200.0,
            pulse_width: 0.5e-3,
            sampling_rate: 200.0,
            pulse_delay: 0.25e-3,
        }
    }
}

impl PulseTiming {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.repetition_rate, self.pulse_width, self.sampling_rate]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive || !(self.pulse_delay >= 0.0) {
            return Err(Error::InvalidParameter(format!("timing values must be positive: {self:?}")));
        }
        if self.pulse_delay + self.pulse_width >= self.period() {
            return Err(Error::InvalidParameter(format!(
                "pulse (delay {} s + width {} s) does not fit in the {} s period",
                self.pulse_delay,
                self.pulse_width,
                self.period()
            )));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.repetition_rate
    }

    pub fn samples_per_period(&self) -> f64 {
        self.sampling_rate / self.repetition_rate
    }
}

/// CTIA conversion: feedback capacitance (F) and post-amplifier gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Readout {
    pub c_f: f64,
    pub voltage_gain: f64,
}

impl Default for Readout {
    fn default() -> Self {
        Self {
            c_f: 0.07e-12,
            voltage_gain: 100.0,
        }
    }
}

impl Readout {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_f > 0.0 && self.c_f.is_finite() && self.voltage_gain > 0.0 && self.voltage_gain.is_finite()) {
            return Err(Error::InvalidParameter(format!("readout needs positive C_f and gain: {self:?}")));
        }
        Ok(())
    }

    pub fn volts_per_electron(&self) -> f64 {
        v_out(1.0, self.c_f, self.voltage_gain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Samples around each pulse used for the drift estimate.
    pub drift_window: usize,
    /// Negative steps larger than this many single-electron voltages are
    /// treated as integrator resets.
    pub reset_threshold_electrons: f64,
    /// Drift estimate when every plateau is a single sample.
    pub single_sample_drift: SingleSampleDrift,
}

/// With one sample per plateau every sample pair straddles a pulse, so the
/// drift cannot be separated from the steps without an assumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingleSampleDrift {
    /// No drift correction.
    #[default]
    None,
    /// Median of neighboring plateau-to-plateau slopes. Valid when most
    /// pulses carry no charge.
    Median,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            drift_window: 50,
            reset_threshold_electrons: 20.0,
            single_sample_drift: SingleSampleDrift::None,
        }
    }
}

/// Everything `extract_pulse_heights` needs, loadable from one JSON file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub timing: PulseTiming,
    pub readout: Readout,
    pub extract: ExtractConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseHeight {
    pub pulse_index: u64,
    pub electrons: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extraction {
    pub heights: Vec<PulseHeight>,
    /// Pulses dropped because an integrator reset coincided with them.
    pub resets: Vec<u64>,
}

/// Centered sums of one plateau segment.
#[derive(Debug, Clone, Copy, Default)]
struct Segment {
    n: usize,
    mean_t: f64,
    mean_v: f64,
    stt: f64,
    stv: f64,
}

impl Segment {
    fn from_samples(samples: &[TraceRecord]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self::default();
        }
        let mean_t = samples.iter().map(|r| r.timestamp).sum::<f64>() / n as f64;
        let mean_v = samples.iter().map(|r| r.voltage).sum::<f64>() / n as f64;
        let (mut stt, mut stv) = (0.0, 0.0);
        for r in samples {
            let dt = r.timestamp - mean_t;
            stt += dt * dt;
            stv += dt * (r.voltage - mean_v);
        }
        Self { n, mean_t, mean_v, stt, stv }
    }
}

/// Split a trace into plateau segments; segment `p` holds the samples between
/// the end of pulse `p - 1` and the start of pulse `p`.
/// Periods are counted from the first period boundary at or before the first
/// sample; that boundary's absolute index is returned alongside.
fn segments(trace: &[TraceRecord], timing: &PulseTiming) -> (u64, Vec<Segment>) {
    let period = timing.period();
    let eps = 1e-9 * period;
    let p0 = ((trace[0].timestamp + eps) / period).floor();
    let t0 = p0 * period;
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    let mut current: Option<usize> = None;
    for (j, r) in trace.iter().enumerate() {
        let rel = r.timestamp - t0;
        let p = ((rel + eps) / period).floor().max(0.0) as usize;
        let tau = rel - p as f64 * period;
        let seg = if tau < timing.pulse_delay - eps {
            Some(p)
        } else if tau > timing.pulse_delay + timing.pulse_width + eps {
            Some(p + 1)
        } else {
            None
        };
        if seg != current {
            if let Some(c) = current {
                bounds.resize(c + 1, (start, start));
                bounds[c] = (start, j);
            }
            start = j;
            current = seg;
        }
        if seg.is_none() {
            start = j + 1;
        }
    }
    if let Some(c) = current {
        bounds.resize(c + 1, (start, start));
        bounds[c] = (start, trace.len());
    }
    let segs = bounds.iter().map(|&(a, b)| Segment::from_samples(&trace[a..b.max(a)])).collect();
    (p0.max(0.0) as u64, segs)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-pulse heights in electrons.
///
/// Drift is a linear slope estimated over a window of `drift_window`
/// samples around each pulse. With several samples per plateau it is the
/// pooled within-plateau slope, which is exact for a linear ramp. With one
/// sample per plateau see [`SingleSampleDrift`].
pub fn extract_pulse_heights(
    trace: &[TraceRecord],
    timing: &PulseTiming,
    readout: &Readout,
    config: &ExtractConfig,
) -> Result<Extraction> {
    timing.validate()?;
    readout.validate()?;
    if trace.len() < 3 {
        return Err(Error::WindowTooShort(format!("trace has {} samples, at least 3 needed", trace.len())));
    }
    if config.drift_window < 2 {
        return Err(Error::WindowTooShort(format!(
            "drift window of {} samples cannot estimate a slope",
            config.drift_window
        )));
    }
    if trace.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::InvalidParameter("trace timestamps must increase".into()));
    }
    let (first_period, segs) = segments(trace, timing);
    let volts_per_electron = readout.volts_per_electron();
    let reset_step = -config.reset_threshold_electrons * volts_per_electron;

    // raw plateau-to-plateau steps, pulse p between segments p and p + 1
    let steps: Vec<Option<(f64, f64)>> = segs
        .windows(2)
        .map(|w| (w[0].n > 0 && w[1].n > 0).then(|| (w[1].mean_v - w[0].mean_v, w[1].mean_t - w[0].mean_t)))
        .collect();
    let per_segment = timing.samples_per_period().round().max(1.0) as usize;
    let half = config.drift_window.div_ceil(2 * per_segment).max(1);
    let pooled = segs.iter().any(|s| s.n >= 2);

    let mut out = Extraction::default();
    let mut scratch = Vec::new();
    for (p, step) in steps.iter().enumerate() {
        let Some((dv, dt)) = *step else { continue };
        let lo = p.saturating_sub(half - 1);
        let hi = (p + half).min(segs.len() - 1);
        let slope = if pooled {
            let (stv, stt) = segs[lo..=hi]
                .iter()
                .filter(|s| s.n >= 2)
                .fold((0.0, 0.0), |(a, b), s| (a + s.stv, b + s.stt));
            if stt > 0.0 { stv / stt } else { 0.0 }
        } else if config.single_sample_drift == SingleSampleDrift::None {
            0.0
        } else {
            scratch.clear();
            scratch.extend(
                steps[lo..hi.min(steps.len())]
                    .iter()
                    .flatten()
                    .filter(|(v, _)| *v >= reset_step)
                    .map(|(v, t)| v / t),
            );
            if scratch.is_empty() { 0.0 } else { median(&mut scratch) }
        };
        let height = dv - slope * dt;
        if height < reset_step {
            out.resets.push(first_period + p as u64);
            continue;
        }
        out.heights.push(PulseHeight {
            pulse_index: first_period + p as u64,
            electrons: height / volts_per_electron,
        });
    }
    Ok(out)
}

pub fn write_heights_csv<W: Write>(heights: &[PulseHeight], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for h in heights {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}

/// Integrator discharge: before a pulse, if the held charge exceeds
/// `level_electrons` it is dumped to zero at the start of the pulse window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetPolicy {
    pub level_electrons: f64,
}

/// Ideal CTIA output for a sequence of pulse charges (electrons), sampled
/// at `timing.sampling_rate`. Charge ramps linearly during each pulse; a
/// linear drift of `drift_electrons_per_s` is added on top. The trace spans
/// one period per pulse plus a closing sample.
pub fn render_staircase(
    heights: &[f64],
    timing: &PulseTiming,
    readout: &Readout,
    drift_electrons_per_s: f64,
    reset: Option<ResetPolicy>,
) -> Result<Vec<TraceRecord>> {
    timing.validate()?;
    readout.validate()?;
    let vpe = readout.volts_per_electron();
    let period = timing.period();
    let n_samples = ((heights.len() as f64 * period * timing.sampling_rate).round() as usize) + 1;

    // held charge entering each pulse, after any reset
    let mut before = Vec::with_capacity(heights.len());
    let mut q = 0.0;
    for &h in heights {
        if reset.is_some_and(|r| q > r.level_electrons) {
            q = 0.0;
        }
        before.push(q);
        q += h;
    }

    let mut out = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let t = j as f64 / timing.sampling_rate;
        let p = ((t / period) + 1e-9).floor() as usize;
        let tau = t - p as f64 * period;
        let charge = if p >= heights.len() {
            heights.last().map_or(0.0, |h| before[heights.len() - 1] + h)
        } else if tau < timing.pulse_delay {
            if p == 0 { 0.0 } else { before[p - 1] + heights[p - 1] }
        } else {
            let frac = ((tau - timing.pulse_delay) / timing.pulse_width).min(1.0);
            before[p] + frac * heights[p]
        };
        out.push(TraceRecord {
            timestamp: t,
            voltage: vpe * (charge + drift_electrons_per_s * t),
        });
    }
    Ok(out)
}
