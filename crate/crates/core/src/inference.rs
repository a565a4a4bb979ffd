//! Parameter estimation: `k` from excess-noise-factor points, gain
//! calibration against bias, and full pulse-height spectrum fits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::McIntyreParams;
use crate::optimize::{minimize_with_restarts, numerical_hessian, Bounds, NelderMeadOptions};
use crate::spectrum::{bin_probabilities, BinProbabilities, DeviceModel, Histogram, DEFAULT_N_MAX};

/// Measured (M, F) pair with an inverse-variance weight on F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnfPoint {
    #[serde(rename = "M")]
    pub mean_gain: f64,
    #[serde(rename = "F")]
    pub enf: f64,
    pub weight: f64,
}

/// Mean output carriers per pulse recorded at one bias voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCurvePoint {
    pub bias_voltage: f64,
    pub mean_output_carriers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: BTreeMap<String, f64>,
    pub standard_errors: BTreeMap<String, f64>,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Free parameters that ended on (or within 1e-6 of the width of) a bound.
    #[serde(default)]
    pub bound_hits: Vec<String>,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<f64> {
        self.parameters.get(name).copied()
    }

    pub fn standard_error(&self, name: &str) -> Option<f64> {
        self.standard_errors.get(name).copied()
    }

    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NoConvergence {
                iterations: self.iterations,
            })
        }
    }
}

/// Search interval for `k` in [`fit_k`].
pub const K_BOUNDS: (f64, f64) = (1e-3, 1.0 - 1e-6);

/// Weighted least squares of `F(M) = M/k - (2 - 1/M)(1/k - 1)` over `k`.
///
/// The model is linear in `u = 1/k`: `F = a u + b` with `a = (M-1)²/M` and
/// `b = 2 - 1/M`, so the bounded optimum is the clamped normal-equation
/// solution. The standard error comes from the curvature of the objective
/// in `k`, `se = sqrt(2 / χ''(k))`.
pub fn fit_k(points: &[EnfPoint]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "need at least two (M, F) points, got {}",
            points.len()
        )));
    }
    for p in points {
        if !(p.mean_gain >= 1.0 && p.enf >= 1.0 && p.weight > 0.0 && p.weight.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ENF point needs M >= 1, F >= 1 and a positive weight: {p:?}"
            )));
        }
    }
    let first = points[0].mean_gain;
    if points.iter().all(|p| p.mean_gain == first) {
        return Err(Error::DegenerateData("all points share the same average gain".into()));
    }

    let slope = |m: f64| (m - 1.0) * (m - 1.0) / m;
    let offset = |m: f64| 2.0 - 1.0 / m;
    let (mut num, mut den) = (0.0, 0.0);
    for p in points {
        let a = slope(p.mean_gain);
        num += p.weight * a * (p.enf - offset(p.mean_gain));
        den += p.weight * a * a;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateData("no point carries information on k".into()));
    }
    let u = (num / den).clamp(1.0 / K_BOUNDS.1, 1.0 / K_BOUNDS.0);
    let k = 1.0 / u;

    let objective = |k: f64| -> f64 {
        points
            .iter()
            .map(|p| {
                let r = p.enf - (slope(p.mean_gain) / k + offset(p.mean_gain));
                p.weight * r * r
            })
            .sum()
    };
    let curvature: f64 = points
        .iter()
        .map(|p| {
            let a = slope(p.mean_gain);
            let r = p.enf - (a / k + offset(p.mean_gain));
            let d1 = -a / (k * k);
            let d2 = 2.0 * a / (k * k * k);
            2.0 * p.weight * (d1 * d1 - r * d2)
        })
        .sum();
    let se = if curvature > 0.0 { (2.0 / curvature).sqrt() } else { f64::INFINITY };

    let mut bound_hits = Vec::new();
    if k <= K_BOUNDS.0 || k >= K_BOUNDS.1 {
        bound_hits.push("k".to_string());
    }
    Ok(FitResult {
        parameters: BTreeMap::from([("k".to_string(), k)]),
        standard_errors: BTreeMap::from([("k".to_string(), se)]),
        objective_value: objective(k),
        converged: true,
        iterations: 1,
        bound_hits,
    })
}

/// Plateau used to define unity gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Half-width of the bias window around the unity-gain voltage, volts.
    pub window: f64,
    /// Largest accepted relative slope of the plateau, per volt.
    pub max_relative_slope: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            window: 0.5,
            max_relative_slope: 0.02,
        }
    }
}

/// Average gain versus bias: output carriers divided by their mean on the
/// plateau around `unity_bias`. Returns `(bias, M)` in input order.
pub fn calibrate_gain(
    curve: &[GainCurvePoint],
    unity_bias: f64,
    config: &CalibrationConfig,
) -> Result<Vec<(f64, f64)>> {
    if curve.is_empty() {
        return Err(Error::DegenerateData("empty gain curve".into()));
    }
    if let Some(p) = curve
        .iter()
        .find(|p| !(p.mean_output_carriers >= 0.0) || !p.bias_voltage.is_finite())
    {
        return Err(Error::InvalidParameter(format!("bad gain-curve point {p:?}")));
    }
    let (lo, hi) = curve.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.bias_voltage), hi.max(p.bias_voltage))
    });
    if !(unity_bias >= lo && unity_bias <= hi) {
        return Err(Error::InvalidParameter(format!(
            "unity bias {unity_bias} V outside the curve range [{lo}, {hi}] V"
        )));
    }
    let plateau: Vec<&GainCurvePoint> = curve
        .iter()
        .filter(|p| (p.bias_voltage - unity_bias).abs() <= config.window + 1e-12)
        .collect();
    let no_plateau = |slope| Error::NoPlateau {
        unity_bias,
        slope_per_volt: slope,
        threshold: config.max_relative_slope,
    };
    if plateau.len() < 2 {
        return Err(no_plateau(f64::NAN));
    }
    let n = plateau.len() as f64;
    let mean_v = plateau.iter().map(|p| p.bias_voltage).sum::<f64>() / n;
    let mean_c = plateau.iter().map(|p| p.mean_output_carriers).sum::<f64>() / n;
    if mean_c <= 0.0 {
        return Err(no_plateau(f64::NAN));
    }
    let sxx: f64 = plateau.iter().map(|p| (p.bias_voltage - mean_v).powi(2)).sum();
    let sxy: f64 = plateau
        .iter()
        .map(|p| (p.bias_voltage - mean_v) * (p.mean_output_carriers - mean_c))
        .sum();
    if sxx <= 0.0 {
        return Err(no_plateau(f64::NAN));
    }
    let relative_slope = (sxy / sxx) / mean_c;
    if relative_slope.abs() > config.max_relative_slope {
        return Err(no_plateau(relative_slope));
    }
    Ok(curve
        .iter()
        .map(|p| (p.bias_voltage, p.mean_output_carriers / mean_c))
        .collect())
}

/// Parameters [`fit_spectrum`] may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FreeParam {
    #[serde(rename = "n_bar")]
    NBar,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "M")]
    M,
    #[serde(rename = "sigma_read")]
    SigmaRead,
}

impl FreeParam {
    pub const ALL: [FreeParam; 4] = [FreeParam::NBar, FreeParam::K, FreeParam::M, FreeParam::SigmaRead];

    pub fn name(self) -> &'static str {
        match self {
            FreeParam::NBar => "n_bar",
            FreeParam::K => "k",
            FreeParam::M => "M",
            FreeParam::SigmaRead => "sigma_read",
        }
    }

    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            FreeParam::NBar => (1e-4, 5.0),
            FreeParam::K => (0.05, 1.0 - 1e-6),
            FreeParam::M => (1.0, 100.0),
            FreeParam::SigmaRead => (0.01, 50.0),
        }
    }

    fn get(self, d: &DeviceModel) -> f64 {
        match self {
            FreeParam::NBar => d.n_bar,
            FreeParam::K => d.gain.k(),
            FreeParam::M => d.gain.mean_gain(),
            FreeParam::SigmaRead => d.sigma_read,
        }
    }

    fn set(self, d: &mut DeviceModel, v: f64) -> Result<()> {
        match self {
            FreeParam::NBar => d.n_bar = v,
            FreeParam::K => d.gain = McIntyreParams::new(v, d.gain.mean_gain())?,
            FreeParam::M => d.gain = McIntyreParams::new(d.gain.k(), v)?,
            FreeParam::SigmaRead => d.sigma_read = v,
        }
        Ok(())
    }
}

impl fmt::Display for FreeParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreeParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreeParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown fit parameter '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFitOptions {
    pub n_max: usize,
    /// Overrides of [`FreeParam::default_bounds`].
    pub bounds: BTreeMap<FreeParam, (f64, f64)>,
    pub restarts: usize,
    pub seed: u64,
    pub optimizer: NelderMeadOptions,
}

impl Default for SpectrumFitOptions {
    fn default() -> Self {
        Self {
            n_max: DEFAULT_N_MAX,
            bounds: BTreeMap::new(),
            restarts: 3,
            seed: 0,
            optimizer: NelderMeadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinResidual {
    pub lower: f64,
    pub upper: f64,
    pub observed: u64,
    pub expected: f64,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFit {
    pub result: FitResult,
    pub device: DeviceModel,
    pub residuals: Vec<BinResidual>,
}

/// Poisson deviance / 2 between observed cells and `n · p`: zero for a
/// perfect match. Omitted mixture mass is assigned to the overflow cell.
fn binned_nll(hist: &Histogram, probs: &BinProbabilities) -> f64 {
    let n = hist.total() as f64;
    let term = |obs: u64, p: f64| {
        let mu = (n * p).max(1e-300);
        let o = obs as f64;
        if obs == 0 {
            mu
        } else {
            mu - o + o * (o / mu).ln()
        }
    };
    let mut total = term(hist.underflow, probs.underflow) + term(hist.overflow, probs.overflow + probs.omitted);
    for (&o, &p) in hist.counts.iter().zip(&probs.bins) {
        total += term(o, p);
    }
    total
}

/// Maximum-likelihood fit of the observed-charge model to a histogram.
///
/// Parameters outside `free` stay at their `init` values. Minimization uses
/// Nelder–Mead from `init` plus random restarts; standard errors come from
/// the inverse Hessian of the negative log-likelihood.
pub fn fit_spectrum(
    hist: &Histogram,
    init: &DeviceModel,
    free: &[FreeParam],
    options: &SpectrumFitOptions,
) -> Result<SpectrumFit> {
    init.validate()?;
    if hist.total() < 1000 {
        return Err(Error::DegenerateData(format!(
            "histogram has {} entries, at least 1000 needed",
            hist.total()
        )));
    }
    let mut free: Vec<FreeParam> = free.to_vec();
    free.sort();
    free.dedup();
    let binning = hist.binning();

    let (lower, upper): (Vec<f64>, Vec<f64>) = free
        .iter()
        .map(|p| options.bounds.get(p).copied().unwrap_or_else(|| p.default_bounds()))
        .unzip();
    let bounds = Bounds::new(lower, upper)?;

    let device_at = |x: &[f64]| -> Result<DeviceModel> {
        let mut d = *init;
        for (p, &v) in free.iter().zip(x) {
            p.set(&mut d, v)?;
        }
        Ok(d)
    };
    let objective = |x: &[f64]| -> f64 {
        match device_at(x).and_then(|d| bin_probabilities(&d, &binning, options.n_max)) {
            Ok(probs) => binned_nll(hist, &probs),
            Err(_) => f64::INFINITY,
        }
    };

    let x0: Vec<f64> = free.iter().map(|p| p.get(init)).collect();
    let (x, fx, iterations, converged) = if free.is_empty() {
        (x0, objective(&[]), 0, true)
    } else {
        let best = minimize_with_restarts(&objective, &x0, &bounds, options.restarts, options.seed, &options.optimizer);
        (best.x, best.fx, best.iterations, best.converged)
    };
    let device = device_at(&x)?;

    let mut standard_errors = BTreeMap::new();
    if !free.is_empty() {
        let hess = numerical_hessian(&objective, &x, &bounds, 1e-4);
        let n = free.len();
        let h = DMatrix::from_fn(n, n, |i, j| hess[i][j]);
        let cov = h.try_inverse();
        for (i, p) in free.iter().enumerate() {
            let se = cov
                .as_ref()
                .map(|c| c[(i, i)])
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map_or(f64::INFINITY, f64::sqrt);
            standard_errors.insert(p.name().to_string(), se);
        }
    }

    let mut bound_hits = Vec::new();
    for (i, p) in free.iter().enumerate() {
        let tol = 1e-6 * (bounds.upper[i] - bounds.lower[i]);
        if x[i] - bounds.lower[i] <= tol || bounds.upper[i] - x[i] <= tol {
            bound_hits.push(p.name().to_string());
        }
    }

    let parameters = BTreeMap::from([
        ("n_bar".to_string(), device.n_bar),
        ("k".to_string(), device.gain.k()),
        ("M".to_string(), device.gain.mean_gain()),
        ("sigma_read".to_string(), device.sigma_read),
    ]);

    let probs = bin_probabilities(&device, &binning, options.n_max)?;
    let total = hist.total() as f64;
    let residuals = hist
        .bin_edges
        .windows(2)
        .zip(hist.counts.iter().zip(&probs.bins))
        .map(|(edge, (&observed, &p))| {
            let expected = total * p;
            BinResidual {
                lower: edge[0],
                upper: edge[1],
                observed,
                expected,
                pearson: if expected > 0.0 {
                    (observed as f64 - expected) / expected.sqrt()
                } else {
                    0.0
                },
            }
        })
        .collect();

    Ok(SpectrumFit {
        result: FitResult {
            parameters,
            standard_errors,
            objective_value: fx,
            converged,
            iterations,
            bound_hits,
        },
        device,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::enf_theory;
    use crate::spectrum::{histogram, synthesize_pulses, Binning, Preset};

    fn exact_points(k: f64) -> Vec<EnfPoint> {
        [2.0, 3.7, 5.0, 8.0, 13.2]
            .iter()
            .map(|&m| EnfPoint {
                mean_gain: m,
                enf: enf_theory(McIntyreParams::new(k, m).unwrap()),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn fit_k_recovers_exact_data() {
        let fit = fit_k(&exact_points(0.9218)).unwrap();
        assert!((fit.parameter("k").unwrap() - 0.9218).abs() < 1e-6);
        assert!(fit.objective_value < 1e-20);
        assert!(fit.converged);
        // true k is the global minimum of the objective
        let objective_at = |k: f64| {
            exact_points(0.9218)
                .iter()
                .map(|p| (p.enf - enf_theory(McIntyreParams::new(k, p.mean_gain).unwrap())).powi(2))
                .sum::<f64>()
        };
        for k in [0.5, 0.9, 0.92, 0.9219, 0.95] {
            assert!(objective_at(k) > fit.objective_value);
        }
    }

    #[test]
    fn fit_k_degenerate_inputs() {
        let one = &exact_points(0.9)[..1];
        assert!(matches!(fit_k(one), Err(Error::DegenerateData(_))));
        let same = vec![
            EnfPoint { mean_gain: 3.0, enf: 3.2, weight: 1.0 },
            EnfPoint { mean_gain: 3.0, enf: 3.3, weight: 1.0 },
        ];
        assert!(matches!(fit_k(&same), Err(Error::DegenerateData(_))));
        let bad = vec![
            EnfPoint { mean_gain: 3.0, enf: 3.2, weight: 0.0 },
            EnfPoint { mean_gain: 4.0, enf: 4.3, weight: 1.0 },
        ];
        assert!(matches!(fit_k(&bad), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn fit_k_clamps_to_search_interval() {
        // F below the k -> 1 limit pushes k to the upper bound
        let pts = vec![
            EnfPoint { mean_gain: 2.0, enf: 1.5, weight: 1.0 },
            EnfPoint { mean_gain: 5.0, enf: 4.0, weight: 1.0 },
        ];
        let fit = fit_k(&pts).unwrap();
        assert_eq!(fit.parameter("k").unwrap(), 1.0 / (1.0 / K_BOUNDS.1));
        assert_eq!(fit.bound_hits, vec!["k".to_string()]);
    }

    #[test]
    fn fit_k_standard_error_matches_finite_difference_curvature() {
        let mut pts = exact_points(0.8);
        for (i, p) in pts.iter_mut().enumerate() {
            p.enf *= 1.0 + 0.02 * if i % 2 == 0 { 1.0 } else { -1.0 };
            p.weight = 1.0 / (0.03 * p.enf).powi(2);
        }
        let fit = fit_k(&pts).unwrap();
        let k = fit.parameter("k").unwrap();
        let chi = |k: f64| {
            pts.iter()
                .map(|p| p.weight * (p.enf - enf_theory(McIntyreParams::new(k, p.mean_gain).unwrap())).powi(2))
                .sum::<f64>()
        };
        let h = 1e-5;
        let curvature = (chi(k + h) - 2.0 * chi(k) + chi(k - h)) / (h * h);
        let se = (2.0 / curvature).sqrt();
        assert!(((fit.standard_error("k").unwrap() - se) / se).abs() < 1e-4);
    }

    fn curve(values: &[(f64, f64)]) -> Vec<GainCurvePoint> {
        values
            .iter()
            .map(|&(v, c)| GainCurvePoint { bias_voltage: v, mean_output_carriers: c })
            .collect()
    }

    #[test]
    fn calibration_constant_and_scaled_curves() {
        let flat = curve(&[(17.0, 48.0), (18.0, 48.0), (18.5, 48.0), (19.0, 48.0), (25.0, 48.0)]);
        let cal = calibrate_gain(&flat, 18.5, &CalibrationConfig::default()).unwrap();
        assert!(cal.iter().all(|&(_, m)| m == 1.0));

        let rising = curve(&[(18.0, 48.0), (18.5, 48.2), (19.0, 48.1), (22.0, 100.0), (26.0, 400.0)]);
        let a = calibrate_gain(&rising, 18.5, &CalibrationConfig::default()).unwrap();
        let scaled: Vec<GainCurvePoint> = rising
            .iter()
            .map(|p| GainCurvePoint { mean_output_carriers: 10.0 * p.mean_output_carriers, ..*p })
            .collect();
        let b = calibrate_gain(&scaled, 18.5, &CalibrationConfig::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.1 - y.1).abs() < 1e-14);
        }
    }

    #[test]
    fn calibration_errors() {
        let steep = curve(&[(18.0, 40.0), (18.5, 48.0), (19.0, 56.0)]);
        assert!(matches!(
            calibrate_gain(&steep, 18.5, &CalibrationConfig::default()),
            Err(Error::NoPlateau { .. })
        ));
        let flat = curve(&[(18.0, 48.0), (19.0, 48.0)]);
        assert!(matches!(
            calibrate_gain(&flat, 25.0, &CalibrationConfig::default()),
            Err(Error::InvalidParameter(_))
        ));
        assert!(calibrate_gain(&[], 18.5, &CalibrationConfig::default()).is_err());
    }

    #[test]
    fn free_param_names_round_trip() {
        for p in FreeParam::ALL {
            assert_eq!(p.name().parse::<FreeParam>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert!("alpha".parse::<FreeParam>().is_err());
    }

    fn synthetic_histogram(device: &DeviceModel, pulses: u64, seed: u64) -> Histogram {
        let p = synthesize_pulses(device, pulses, seed).unwrap();
        let b = Binning::uniform(-30.0, 150.0, 180).unwrap();
        histogram(p.iter().map(|r| r.electrons_observed), &b)
    }

    #[test]
    fn fixed_parameters_only_evaluate() {
        let d = DeviceModel::preset(Preset::Setup, 3.7).unwrap();
        let h = synthetic_histogram(&d, 5000, 1);
        let fit = fit_spectrum(&h, &d, &[], &SpectrumFitOptions::default()).unwrap();
        assert!(fit.result.converged);
        assert_eq!(fit.result.iterations, 0);
        assert!(fit.result.objective_value.is_finite());
        assert!(fit.result.standard_errors.is_empty());
        assert_eq!(fit.residuals.len(), 180);
    }

    #[test]
    fn small_histogram_is_rejected() {
        let d = DeviceModel::preset(Preset::Setup, 3.7).unwrap();
        let h = synthetic_histogram(&d, 500, 1);
        assert!(matches!(
            fit_spectrum(&h, &d, &[FreeParam::M], &SpectrumFitOptions::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn gain_fit_recovers_truth() {
        let d = DeviceModel::preset(Preset::Setup, 3.7).unwrap();
        let h = synthetic_histogram(&d, 50_000, 4);
        let mut start = d;
        start.gain = McIntyreParams::new(0.9218, 2.5).unwrap();
        let fit = fit_spectrum(&h, &start, &[FreeParam::M], &SpectrumFitOptions::default()).unwrap();
        let m = fit.result.parameter("M").unwrap();
        let se = fit.result.standard_error("M").unwrap();
        assert!(fit.result.converged);
        assert!((m - 3.7).abs() < 4.0 * se, "M = {m} ± {se}");
        assert!(fit.result.bound_hits.is_empty());
    }
}
