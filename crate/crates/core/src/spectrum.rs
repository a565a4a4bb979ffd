//! Forward model of the measurement chain.
//!
//! Per pulse, signal primaries are Poisson with mean `n_bar` and dark
//! primaries Poisson with mean `dark_rate`. Each multiplied primary draws an
//! independent McIntyre gain; the integrated charge is read out with
//! Gaussian noise of `sqrt(sigma_read² + sigma_post²)` electrons. All
//! statistics are done in electron units; volts only appear at I/O.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::constants::{ELEMENTARY_CHARGE, PICOFARAD};
use crate::error::{Error, Result};
use crate::gain::{
    convolve_truncated, mcintyre_pmf, mcintyre_prefix, poisson_weight, McIntyreParams,
    TruncationPolicy,
};
use crate::rng::{self, Domain};

/// Gaussian kernels are cut at this many standard deviations.
const KERNEL_HALF_WIDTH: f64 = 12.0;

/// Default number of Poisson components kept in the mixture.
pub const DEFAULT_N_MAX: usize = 3;

/// Measurement chain: injection, dark counts, multiplication, readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub n_bar: f64,
    pub dark_rate: f64,
    #[serde(flatten)]
    pub gain: McIntyreParams,
    /// Feedback capacitance in farads.
    pub c_f: f64,
    pub voltage_gain: f64,
    /// Input-referred amplifier noise, electrons r.m.s.
    pub sigma_read: f64,
    /// Post-amplifier noise, electrons r.m.s.
    pub sigma_post: f64,
    pub dark_multiplied: bool,
}

/// Mean signal primaries per pulse: 0.1 for `Setup`, 0.07 for `Figure`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Setup,
    Figure,
}

impl Preset {
    pub fn n_bar(self) -> f64 {
        match self {
            Preset::Setup => 0.1,
            Preset::Figure => 0.07,
        }
    }
}

impl DeviceModel {
    pub const K: f64 = 0.9218;

    /// Operating point of the hole-injected Si APD at 77 K with the given
    /// average gain.
    pub fn preset(preset: Preset, mean_gain: f64) -> Result<Self> {
        let device = DeviceModel {
            n_bar: preset.n_bar(),
            dark_rate: 0.04,
            gain: McIntyreParams::new(Self::K, mean_gain)?,
            c_f: 0.07 * PICOFARAD,
            voltage_gain: 100.0,
            sigma_read: 4.2,
            sigma_post: 0.4,
            dark_multiplied: true,
        };
        device.validate()?;
        Ok(device)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, strict: bool| {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} must be finite and {} 0, got {v}",
                    if strict { ">" } else { ">=" }
                )))
            }
        };
        check("n_bar", self.n_bar, false)?;
        check("dark_rate", self.dark_rate, false)?;
        check("c_f", self.c_f, true)?;
        check("voltage_gain", self.voltage_gain, true)?;
        check("sigma_read", self.sigma_read, false)?;
        check("sigma_post", self.sigma_post, false)?;
        McIntyreParams::new(self.gain.k(), self.gain.mean_gain())?;
        Ok(())
    }

    /// Total Gaussian readout noise; the two stages add in quadrature.
    pub fn noise_sigma(&self) -> f64 {
        self.sigma_read.hypot(self.sigma_post)
    }

    /// Expected observed electrons per pulse.
    pub fn mean_electrons(&self) -> f64 {
        let m = self.gain.mean_gain();
        if self.dark_multiplied {
            (self.n_bar + self.dark_rate) * m
        } else {
            self.n_bar * m + self.dark_rate
        }
    }
}

/// Output voltage for `carriers` electrons of charge on the feedback
/// capacitor, after the post amplifier.
pub fn v_out(carriers: f64, c_f: f64, voltage_gain: f64) -> f64 {
    voltage_gain * ELEMENTARY_CHARGE * carriers / c_f
}

/// One synthetic pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub pulse_index: u64,
    pub primaries: u64,
    pub carriers_out: u64,
    pub electrons_observed: f64,
    pub v_out: f64,
}

/// Inverse-cdf sampler over a gain distribution.
struct GainSampler {
    cdf: Vec<f64>,
}

impl GainSampler {
    fn new(params: McIntyreParams) -> Result<Self> {
        let dist = mcintyre_pmf(params, &TruncationPolicy::default())?;
        Ok(Self { cdf: dist.cdf() })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1) as u64
    }
}

fn poisson_draw<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite Poisson mean");
    d.sample(rng) as u64
}

/// Generates `n_pulses` pulses. Pulse `i` uses its own random stream, so the
/// sequence is reproducible from `seed` regardless of threading.
pub fn synthesize_pulses(device: &DeviceModel, n_pulses: u64, seed: u64) -> Result<Vec<PulseRecord>> {
    device.validate()?;
    let sampler = GainSampler::new(device.gain)?;
    let sigma = device.noise_sigma();
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));

    let pulses = (0..n_pulses)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Pulses, i);
            let signal = poisson_draw(device.n_bar, &mut rng);
            let dark = poisson_draw(device.dark_rate, &mut rng);
            let mut carriers: u64 = (0..signal).map(|_| sampler.sample(&mut rng)).sum();
            if device.dark_multiplied {
                carriers += (0..dark).map(|_| sampler.sample(&mut rng)).sum::<u64>();
            } else {
                carriers += dark;
            }
            let electrons = carriers as f64 + noise.map_or(0.0, |n| n.sample(&mut rng));
            PulseRecord {
                pulse_index: i,
                primaries: signal + dark,
                carriers_out: carriers,
                electrons_observed: electrons,
                v_out: v_out(electrons, device.c_f, device.voltage_gain),
            }
        })
        .collect();
    Ok(pulses)
}

/// Carrier-count pmf of one pulse before readout noise, on `m = 0..=m_hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarrierMixture {
    pub pmf: Vec<f64>,
    /// Represented-component mass that lies above `m_hi`.
    pub above: f64,
    /// Mass of Poisson components beyond `n_max`.
    pub omitted: f64,
    /// Weight per total primary count.
    pub component_weights: BTreeMap<usize, f64>,
}

/// Mixes `n`-fold gain convolutions with Poisson weights for
/// `n = 0..=n_max`. Only carrier counts up to `m_hi` are computed; every
/// contribution to those counts comes from counts at most `m_hi`, so the
/// window is exact.
pub fn carrier_mixture(device: &DeviceModel, n_max: usize, m_hi: usize) -> Result<CarrierMixture> {
    device.validate()?;
    if n_max < 1 {
        return Err(Error::InvalidParameter("n_max must be >= 1".into()));
    }
    let len = m_hi + 1;
    let gain = mcintyre_prefix(device.gain, m_hi);

    let mut powers = Vec::with_capacity(n_max + 1);
    let mut unit = vec![0.0; len];
    unit[0] = 1.0;
    powers.push(unit);
    for n in 1..=n_max {
        let next = convolve_truncated(&powers[n - 1], &gain, len);
        powers.push(next);
    }

    let mut pmf = vec![0.0; len];
    let mut component_weights = BTreeMap::new();
    let represented;
    if device.dark_multiplied {
        let lambda = device.n_bar + device.dark_rate;
        let mut total = 0.0;
        for (n, power) in powers.iter().enumerate() {
            let w = poisson_weight(lambda, n);
            total += w;
            component_weights.insert(n, w);
            for (acc, p) in pmf.iter_mut().zip(power) {
                *acc += w * p;
            }
        }
        represented = total;
    } else {
        let mut signal = vec![0.0; len];
        let mut signal_total = 0.0;
        let mut signal_weights = Vec::with_capacity(n_max + 1);
        for (n, power) in powers.iter().enumerate() {
            let w = poisson_weight(device.n_bar, n);
            signal_total += w;
            signal_weights.push(w);
            for (acc, p) in signal.iter_mut().zip(power) {
                *acc += w * p;
            }
        }
        let dark: Vec<f64> = (0..=n_max).map(|j| poisson_weight(device.dark_rate, j)).collect();
        let dark_total: f64 = dark.iter().sum();
        pmf = convolve_truncated(&signal, &dark, len);
        for (i, ws) in signal_weights.iter().enumerate() {
            for (j, wd) in dark.iter().enumerate() {
                *component_weights.entry(i + j).or_insert(0.0) += ws * wd;
            }
        }
        represented = signal_total * dark_total;
    }
    let in_window: f64 = pmf.iter().sum();
    Ok(CarrierMixture {
        pmf,
        above: (represented - in_window).max(0.0),
        omitted: (1.0 - represented).max(0.0),
        component_weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Electrons,
    Volts,
}

/// Observed-charge density on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDensity {
    pub units: Units,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub component_weights: BTreeMap<usize, f64>,
    pub omitted_mass: f64,
}

impl SpectrumDensity {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid_weights(&self.grid)
            .iter()
            .zip(&self.density)
            .map(|(w, d)| w * d)
            .sum()
    }
}

fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = grid[i + 1] - grid[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

fn check_increasing(values: &[f64], what: &str) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidParameter(format!("{what} needs at least two points")));
    }
    if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!("{what} must be finite and strictly increasing")));
    }
    Ok(())
}

fn gaussian_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Density of observed electrons: the Poisson mixture of gain convolutions
/// smeared by the readout noise, evaluated on `grid`.
///
/// With zero noise the mixture is discrete; each atom's mass is placed on
/// the nearest grid point so that the trapezoidal integral still equals the
/// represented mass.
pub fn theoretical_spectrum(device: &DeviceModel, grid: &[f64], n_max: usize) -> Result<SpectrumDensity> {
    check_increasing(grid, "grid")?;
    let sigma = device.noise_sigma();
    if sigma > 0.0 {
        let spacing = grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        if spacing > sigma / 4.0 {
            return Err(Error::GridTooCoarse {
                spacing,
                limit: sigma / 4.0,
            });
        }
    }
    let top = grid[grid.len() - 1];
    let m_hi = (top + KERNEL_HALF_WIDTH * sigma).floor().max(0.0) as usize;
    let mix = carrier_mixture(device, n_max, m_hi)?;
    let mut density = vec![0.0; grid.len()];

    if sigma > 0.0 {
        let reach = KERNEL_HALF_WIDTH * sigma;
        for (m, &q) in mix.pmf.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            let mf = m as f64;
            let lo = grid.partition_point(|&x| x < mf - reach);
            let hi = grid.partition_point(|&x| x <= mf + reach);
            for (d, &x) in density[lo..hi].iter_mut().zip(&grid[lo..hi]) {
                *d += q * gaussian_pdf((x - mf) / sigma) / sigma;
            }
        }
    } else {
        let weights = trapezoid_weights(grid);
        for (m, &q) in mix.pmf.iter().enumerate() {
            let mf = m as f64;
            if q == 0.0 || mf < grid[0] || mf > top {
                continue;
            }
            let j = grid.partition_point(|&x| x < mf);
            let nearest = if j == 0 {
                0
            } else if j == grid.len() || (mf - grid[j - 1]) <= (grid[j] - mf) {
                j - 1
            } else {
                j
            };
            density[nearest] += q / weights[nearest];
        }
    }
    Ok(SpectrumDensity {
        units: Units::Electrons,
        grid: grid.to_vec(),
        density,
        component_weights: mix.component_weights,
        omitted_mass: mix.omitted,
    })
}

/// Bin layout: strictly increasing edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    edges: Vec<f64>,
}

impl Binning {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        check_increasing(&edges, "bin edges")?;
        Ok(Self { edges })
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "uniform binning needs bins >= 1 and hi > lo, got {bins} bins on [{lo}, {hi}]"
            )));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        Self::from_edges(edges)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin containing `x` for the half-open convention `[e_i, e_{i+1})`.
    fn locate(&self, x: f64) -> Slot {
        if x.is_nan() || x >= self.edges[self.edges.len() - 1] {
            Slot::Overflow
        } else if x < self.edges[0] {
            Slot::Underflow
        } else {
            Slot::Bin(self.edges.partition_point(|&e| e <= x) - 1)
        }
    }
}

enum Slot {
    Underflow,
    Bin(usize),
    Overflow,
}

/// Binned counts with under/overflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistogramJson")]
pub struct Histogram {
    pub units: Units,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

#[derive(Deserialize)]
struct HistogramJson {
    units: Units,
    bin_edges: Vec<f64>,
    counts: Vec<u64>,
    underflow: u64,
    overflow: u64,
}

impl TryFrom<HistogramJson> for Histogram {
    type Error = Error;

    fn try_from(raw: HistogramJson) -> Result<Self> {
        check_increasing(&raw.bin_edges, "bin edges")?;
        if raw.counts.len() + 1 != raw.bin_edges.len() {
            return Err(Error::InvalidParameter(format!(
                "{} counts for {} edges",
                raw.counts.len(),
                raw.bin_edges.len()
            )));
        }
        Ok(Histogram {
            units: raw.units,
            bin_edges: raw.bin_edges,
            counts: raw.counts,
            underflow: raw.underflow,
            overflow: raw.overflow,
        })
    }
}

impl Histogram {
    /// Total number of samples including under/overflow.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn binning(&self) -> Binning {
        Binning {
            edges: self.bin_edges.clone(),
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Histogram with every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Histogram {
        Histogram {
            units: self.units,
            bin_edges: self.bin_edges.clone(),
            counts: self.counts.iter().map(|c| c * factor).collect(),
            underflow: self.underflow * factor,
            overflow: self.overflow * factor,
        }
    }

    /// Non-pedestal bin with the most counts, searching above `threshold`.
    pub fn modal_bin_above(&self, threshold: f64) -> Option<usize> {
        let centers = self.centers();
        (0..self.counts.len())
            .filter(|&i| centers[i] > threshold)
            .max_by(|&a, &b| self.counts[a].cmp(&self.counts[b]).then(b.cmp(&a)))
    }
}

/// Bins `values`; nothing is dropped (NaN goes to overflow).
pub fn histogram(values: impl IntoIterator<Item = f64>, binning: &Binning) -> Histogram {
    let mut h = Histogram {
        units: Units::Electrons,
        bin_edges: binning.edges.clone(),
        counts: vec![0; binning.bins()],
        underflow: 0,
        overflow: 0,
    };
    for v in values {
        match binning.locate(v) {
            Slot::Underflow => h.underflow += 1,
            Slot::Bin(i) => h.counts[i] += 1,
            Slot::Overflow => h.overflow += 1,
        }
    }
    h
}

/// Model probability of each bin, plus under/overflow and the Poisson mass
/// not represented.
#[derive(Debug, Clone, PartialEq)]
pub struct BinProbabilities {
    pub underflow: f64,
    pub bins: Vec<f64>,
    pub overflow: f64,
    pub omitted: f64,
}

impl BinProbabilities {
    pub fn total(&self) -> f64 {
        self.underflow + self.bins.iter().sum::<f64>() + self.overflow
    }
}

/// Integrates the observed-charge model over each bin exactly through the
/// Gaussian cdf.
pub fn bin_probabilities(device: &DeviceModel, binning: &Binning, n_max: usize) -> Result<BinProbabilities> {
    let edges = binning.edges();
    let sigma = device.noise_sigma();
    let top = edges[edges.len() - 1];
    let m_hi = (top + KERNEL_HALF_WIDTH * sigma).floor().max(0.0) as usize;
    let mix = carrier_mixture(device, n_max, m_hi)?;

    let mut out = BinProbabilities {
        underflow: 0.0,
        bins: vec![0.0; binning.bins()],
        overflow: mix.above,
        omitted: mix.omitted,
    };
    if sigma == 0.0 {
        for (m, &q) in mix.pmf.iter().enumerate() {
            match binning.locate(m as f64) {
                Slot::Underflow => out.underflow += q,
                Slot::Bin(i) => out.bins[i] += q,
                Slot::Overflow => out.overflow += q,
            }
        }
        return Ok(out);
    }

    let reach = KERNEL_HALF_WIDTH * sigma;
    let mut cdf = vec![0.0; edges.len()];
    for (m, &q) in mix.pmf.iter().enumerate() {
        if q == 0.0 {
            continue;
        }
        let mf = m as f64;
        let lo = edges.partition_point(|&e| e < mf - reach);
        let hi = edges.partition_point(|&e| e <= mf + reach);
        // cdf is 0 below `lo` and 1 from `hi` on
        for j in lo..hi {
            cdf[j] = normal_cdf((edges[j] - mf) / sigma);
        }
        let at = |j: usize, cdf: &[f64]| {
            if j < lo {
                0.0
            } else if j >= hi {
                1.0
            } else {
                cdf[j]
            }
        };
        out.underflow += q * at(0, &cdf);
        out.overflow += q * (1.0 - at(edges.len() - 1, &cdf));
        let first_bin = lo.saturating_sub(1);
        let last_bin = hi.min(binning.bins());
        for i in first_bin..last_bin {
            out.bins[i] += q * (at(i + 1, &cdf) - at(i, &cdf));
        }
    }
    Ok(out)
}

/// Pearson χ² of a histogram against bin probabilities. Adjacent cells
/// (under/overflow included) are pooled left to right until each has an
/// expected count of at least `min_expected`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn chi_square(hist: &Histogram, probs: &BinProbabilities, fitted_parameters: usize, min_expected: f64) -> Result<ChiSquare> {
    if probs.bins.len() != hist.counts.len() {
        return Err(Error::InvalidParameter("histogram and model have different binning".into()));
    }
    let n = hist.total() as f64;
    let observed = std::iter::once(hist.underflow)
        .chain(hist.counts.iter().copied())
        .chain(std::iter::once(hist.overflow));
    let expected = std::iter::once(probs.underflow)
        .chain(probs.bins.iter().copied())
        .chain(std::iter::once(probs.overflow + probs.omitted));

    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pending = (0.0, 0.0);
    for (o, e) in observed.zip(expected) {
        pending.0 += o as f64;
        pending.1 += e * n;
        if pending.1 >= min_expected {
            cells.push(pending);
            pending = (0.0, 0.0);
        }
    }
    if pending.1 > 0.0 || pending.0 > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += pending.0;
                last.1 += pending.1;
            }
            None => cells.push(pending),
        }
    }
    if cells.len() < fitted_parameters + 2 {
        return Err(Error::DegenerateData(format!(
            "only {} pooled cells for a chi-square test",
            cells.len()
        )));
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cells.len() - 1 - fitted_parameters;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(ChiSquare {
        statistic,
        dof,
        p_value: dist.sf(statistic),
    })
}

/// Writes pulses as `pulse_index,primaries,carriers_out,electrons_observed,v_out`.
pub fn write_pulses_csv<W: Write>(pulses: &[PulseRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in pulses {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pulses_csv<R: Read>(reader: R) -> Result<Vec<PulseRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
