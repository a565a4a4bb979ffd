//! McIntyre single-carrier gain statistics under hole injection.
//!
//! The ionization ratio is `k = β/α` (hole over electron coefficient) with
//! `0 < k < 1`, so the injected holes are the weaker-ionizing carrier. The
//! single-carrier pmf is
//!
//! ```text
//! P(m) = (1 - 1/k)^(m-1) Γ(km/(k-1))
//!        / [ (m-1)! (1 + (m-1)/k) Γ((k+m-1)/(k-1)) ]
//!        × ((M+k-1)/(kM))^((k+m-1)/(k-1)) × ((M-1)/M)^(m-1)
//! ```
//!
//! Both gamma arguments are negative for `k < 1`. Their ratio has an integer
//! offset of `m - 1` and is evaluated as `(-1)^(m-1) Γ(a+m)/Γ(a+1)` with
//! `a = km/(1-k) > 0`, so no gamma routine ever sees a negative argument.
//! The two negative bases contribute `(-1)^(m-1)` each and cancel.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// Below this carrier count the gamma ratio is accumulated factor by factor.
const PRODUCT_ROUTE_MAX: usize = 64;

/// Ionization ratio `k = β/α` and average gain `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct McIntyreParams {
    k: f64,
    #[serde(rename = "M")]
    mean_gain: f64,
}

#[derive(Deserialize)]
struct RawParams {
    k: f64,
    #[serde(rename = "M")]
    mean_gain: f64,
}

impl TryFrom<RawParams> for McIntyreParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        McIntyreParams::new(raw.k, raw.mean_gain)
    }
}

impl McIntyreParams {
    /// `k` must lie strictly inside (0, 1); `k = 1` is rejected, use
    /// `1 - ε` with `ε ≥ 1e-6` instead. `mean_gain` must be at least 1.
    pub fn new(k: f64, mean_gain: f64) -> Result<Self> {
        validate_k(k)?;
        if !(mean_gain >= 1.0) || !mean_gain.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "average gain M must be finite and >= 1, got {mean_gain}"
            )));
        }
        Ok(Self { k, mean_gain })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn mean_gain(&self) -> f64 {
        self.mean_gain
    }
}

pub(crate) fn validate_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "ionization ratio k must satisfy 0 < k < 1, got {k}"
        )));
    }
    Ok(())
}

/// How far the analytic pmf is extended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// Largest probability mass allowed beyond the represented support.
    pub tail_tolerance: f64,
    /// Largest carrier count that may be represented.
    pub hard_cap: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            tail_tolerance: 1e-12,
            hard_cap: 1_000_000,
        }
    }
}

impl TruncationPolicy {
    pub fn new(tail_tolerance: f64, hard_cap: usize) -> Result<Self> {
        if !(tail_tolerance > 0.0 && tail_tolerance < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tail tolerance must lie in (0, 1), got {tail_tolerance}"
            )));
        }
        if hard_cap < 1 {
            return Err(Error::InvalidParameter("hard cap must be >= 1".into()));
        }
        Ok(Self {
            tail_tolerance,
            hard_cap,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Analytic,
    MonteCarlo,
    Empirical,
}

/// Probability mass over carrier counts `m = 0, 1, 2, …`.
///
/// The pmf is stored densely from `m = 0`. Mass that is not represented
/// (analytic tail cut, censored Monte Carlo trials) is kept in
/// `truncation_mass`, so that `Σ pmf + truncation_mass = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainDistribution {
    pmf: Vec<f64>,
    origin: Origin,
    params: Option<McIntyreParams>,
    truncation_mass: f64,
}

/// Mean and variance over the represented support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

impl GainDistribution {
    /// Deterministic gain of exactly `m` carriers.
    pub fn point_mass(m: usize) -> Self {
        let mut pmf = vec![0.0; m + 1];
        pmf[m] = 1.0;
        Self {
            pmf,
            origin: Origin::Empirical,
            params: None,
            truncation_mass: 0.0,
        }
    }

    /// Builds a distribution from explicit probabilities indexed by `m`.
    pub fn from_pmf(pmf: Vec<f64>, origin: Origin, truncation_mass: f64) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::InvalidParameter("pmf must not be empty".into()));
        }
        if let Some((m, p)) = pmf
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0 && **p <= 1.0))
        {
            return Err(Error::InvalidParameter(format!(
                "probability at m = {m} is {p}, outside [0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&truncation_mass) {
            return Err(Error::InvalidParameter(format!(
                "truncation mass {truncation_mass} outside [0, 1]"
            )));
        }
        let total = compensated_sum(pmf.iter().copied()) + truncation_mass;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "pmf plus truncation mass sums to {total}, expected 1"
            )));
        }
        Ok(Self {
            pmf,
            origin,
            params: None,
            truncation_mass,
        })
    }

    /// Empirical pmf from counts indexed by `m`. `missing` counts samples
    /// that were drawn but are not represented (for example censored trials);
    /// they become truncation mass.
    pub fn from_counts(counts: &[u64], missing: u64, origin: Origin) -> Result<Self> {
        let represented: u64 = counts.iter().sum();
        let total = represented + missing;
        if total == 0 {
            return Err(Error::DegenerateDistribution("no samples".into()));
        }
        let n = total as f64;
        let mut pmf: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        if pmf.is_empty() {
            pmf.push(0.0);
        }
        Ok(Self {
            pmf,
            origin,
            params: None,
            truncation_mass: missing as f64 / n,
        })
    }

    pub(crate) fn with_params(mut self, params: McIntyreParams) -> Self {
        self.params = Some(params);
        self
    }

    /// Probability of exactly `m` carriers (zero outside the support).
    pub fn pmf(&self, m: usize) -> f64 {
        self.pmf.get(m).copied().unwrap_or(0.0)
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.pmf
    }

    /// Largest represented carrier count.
    pub fn max_carriers(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn params(&self) -> Option<McIntyreParams> {
        self.params
    }

    pub fn truncation_mass(&self) -> f64 {
        self.truncation_mass
    }

    /// Carrier count with the largest probability (lowest `m` on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (m, &p) in self.pmf.iter().enumerate() {
            if p > self.pmf[best] {
                best = m;
            }
        }
        best
    }

    /// Mean and variance over the represented support.
    ///
    /// Nothing is renormalized: mass in `truncation_mass` is simply absent,
    /// which biases both moments low by roughly the tail's contribution.
    pub fn moments(&self) -> Moments {
        let mean = compensated_sum(self.pmf.iter().enumerate().map(|(m, p)| m as f64 * p));
        let variance = compensated_sum(self.pmf.iter().enumerate().map(|(m, p)| {
            let d = m as f64 - mean;
            d * d * p
        }));
        Moments { mean, variance }
    }

    /// Excess noise factor `E[G²] / E[G]²` over the represented support.
    pub fn enf(&self) -> Result<f64> {
        let first = compensated_sum(self.pmf.iter().enumerate().map(|(m, p)| m as f64 * p));
        if first <= 0.0 {
            return Err(Error::DegenerateDistribution(
                "mean gain is zero, excess noise factor undefined".into(),
            ));
        }
        let second = compensated_sum(
            self.pmf
                .iter()
                .enumerate()
                .map(|(m, p)| (m as f64) * (m as f64) * p),
        );
        Ok(second / (first * first))
    }

    /// `n`-fold self-convolution: the carrier count produced by `n`
    /// independent primaries. `n = 0` is a point mass at zero.
    pub fn convolve_n(&self, n: usize) -> Result<Self> {
        self.convolve_n_capped(n, TruncationPolicy::default().hard_cap)
    }

    pub fn convolve_n_capped(&self, n: usize, hard_cap: usize) -> Result<Self> {
        let mut out = GainDistribution {
            pmf: vec![1.0],
            origin: self.origin,
            params: None,
            truncation_mass: 0.0,
        };
        if n == 0 {
            return Ok(out);
        }
        let required = n
            .checked_mul(self.max_carriers())
            .and_then(|v| v.checked_add(1))
            .unwrap_or(usize::MAX);
        if required > hard_cap.saturating_add(1) {
            return Err(Error::SupportOverflow { required, hard_cap });
        }
        // binary powering
        let mut base = self.pmf.clone();
        let mut acc = vec![1.0];
        let mut remaining = n;
        loop {
            if remaining & 1 == 1 {
                acc = convolve(&acc, &base);
            }
            remaining >>= 1;
            if remaining == 0 {
                break;
            }
            base = convolve(&base, &base);
        }
        out.pmf = acc;
        let kept = -((n as f64) * (-self.truncation_mass).ln_1p()).exp_m1();
        out.truncation_mass = kept.clamp(0.0, 1.0);
        if n == 1 {
            out.params = self.params;
        }
        Ok(out)
    }

    /// Total-variation distance, treating each side's truncation mass as an
    /// extra atom.
    pub fn total_variation(&self, other: &GainDistribution) -> f64 {
        let len = self.pmf.len().max(other.pmf.len());
        let body = compensated_sum((0..len).map(|m| (self.pmf(m) - other.pmf(m)).abs()));
        0.5 * (body + (self.truncation_mass - other.truncation_mass).abs())
    }

    /// Cumulative probabilities `P(G ≤ m)` over the represented support.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = NeumaierSum::default();
        self.pmf
            .iter()
            .map(|&p| {
                acc.add(p);
                acc.value()
            })
            .collect()
    }
}

/// Direct-summation discrete convolution.
pub(crate) fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// Direct convolution restricted to output indices `0..len`.
pub(crate) fn convolve_truncated(a: &[f64], b: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (i, &x) in a.iter().enumerate().take(len) {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// McIntyre pmf extended until the tail mass drops below
/// `trunc.tail_tolerance`.
///
/// Support grows in doubling blocks from an initial guess of
/// `M + 20 M sqrt(F - 1) + 10`, i.e. twenty standard deviations of the gain.
pub fn mcintyre_pmf(params: McIntyreParams, trunc: &TruncationPolicy) -> Result<GainDistribution> {
    let mean_gain = params.mean_gain();
    if mean_gain == 1.0 {
        let mut dist = GainDistribution::point_mass(1);
        dist.origin = Origin::Analytic;
        return Ok(dist.with_params(params));
    }
    let f = enf_theory(params);
    let initial = (mean_gain + 20.0 * mean_gain * (f - 1.0).max(0.0).sqrt() + 10.0).ceil() as usize;
    let mut block_end = initial.clamp(1, trunc.hard_cap);

    let mut pmf = Vec::with_capacity(block_end + 1);
    pmf.push(0.0);
    let mut sum = NeumaierSum::default();
    let mut m = 1;
    loop {
        while m <= block_end {
            let term = mcintyre_term(params, m);
            if term.negative {
                return Err(Error::NegativeProbability {
                    m,
                    value: -term.value(),
                });
            }
            let p = term.value();
            pmf.push(p);
            sum.add(p);
            if 1.0 - sum.value() <= trunc.tail_tolerance {
                let truncation_mass = (1.0 - sum.value()).max(0.0);
                return Ok(GainDistribution {
                    pmf,
                    origin: Origin::Analytic,
                    params: Some(params),
                    truncation_mass,
                });
            }
            m += 1;
        }
        if block_end >= trunc.hard_cap {
            return Err(Error::TruncationFailure {
                tail_mass: 1.0 - sum.value(),
                tolerance: trunc.tail_tolerance,
                hard_cap: trunc.hard_cap,
            });
        }
        block_end = block_end.saturating_mul(2).min(trunc.hard_cap);
        pmf.reserve(block_end + 1 - pmf.len());
    }
}

/// McIntyre pmf for `m = 0..=m_max` without any tail criterion. Used where
/// only a window of carrier counts matters (spectrum models).
pub fn mcintyre_prefix(params: McIntyreParams, m_max: usize) -> Vec<f64> {
    let mut pmf = vec![0.0; m_max + 1];
    if params.mean_gain() == 1.0 {
        if m_max >= 1 {
            pmf[1] = 1.0;
        }
        return pmf;
    }
    for (m, slot) in pmf.iter_mut().enumerate().skip(1) {
        *slot = mcintyre_term(params, m).value().max(0.0);
    }
    pmf
}

/// Magnitude and sign of a real number kept as `ln|x|` plus a sign bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedLog {
    pub ln_abs: f64,
    pub negative: bool,
}

impl SignedLog {
    pub const ONE: SignedLog = SignedLog {
        ln_abs: 0.0,
        negative: false,
    };

    pub fn from_value(x: f64) -> Self {
        SignedLog {
            ln_abs: x.abs().ln(),
            negative: x < 0.0,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: SignedLog) -> Self {
        SignedLog {
            ln_abs: self.ln_abs + other.ln_abs,
            negative: self.negative ^ other.negative,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, other: SignedLog) -> Self {
        SignedLog {
            ln_abs: self.ln_abs - other.ln_abs,
            negative: self.negative ^ other.negative,
        }
    }

    pub fn value(self) -> f64 {
        let v = self.ln_abs.exp();
        if self.negative {
            -v
        } else {
            v
        }
    }
}

/// `Γ(km/(k-1)) / Γ((k+m-1)/(k-1))` as the finite product
/// `∏_{j=1}^{m-1} (km/(k-1) - j)`.
pub fn gamma_ratio_product(k: f64, m: usize) -> SignedLog {
    let x = k * m as f64 / (k - 1.0);
    let mut acc = SignedLog::ONE;
    for j in 1..m {
        acc = acc.mul(SignedLog::from_value(x - j as f64));
    }
    acc
}

/// Same ratio through log-gamma at positive arguments:
/// `(-1)^(m-1) Γ(a+m)/Γ(a+1)` with `a = km/(1-k)`.
pub fn gamma_ratio_lgamma(k: f64, m: usize) -> SignedLog {
    if m <= 1 {
        return SignedLog::ONE;
    }
    let a = k * m as f64 / (1.0 - k);
    SignedLog {
        ln_abs: ln_pochhammer(a + 1.0, m - 1),
        negative: (m - 1) % 2 == 1,
    }
}

/// `ln(Γ(x + n) / Γ(x))` for `x > 0`.
///
/// Arguments below 10 are shifted up by explicit factors; above that the
/// Stirling series is differenced in `ln_1p` form so the large `x ln x`
/// parts cancel analytically instead of in floating point.
pub fn ln_pochhammer(x: f64, n: usize) -> f64 {
    debug_assert!(x > 0.0);
    const SHIFT_TO: f64 = 10.0;
    let mut x = x;
    let mut n = n;
    let mut acc = 0.0;
    while x < SHIFT_TO && n > 0 {
        acc += x.ln();
        x += 1.0;
        n -= 1;
    }
    if n == 0 {
        return acc;
    }
    let h = n as f64;
    let y = x + h;
    acc + (x - 0.5) * (h / x).ln_1p() + h * y.ln() - h + stirling_tail(y) - stirling_tail(x)
}

/// `ln Γ(z) - [(z - 1/2) ln z - z + ln(2π)/2]` for `z ≥ 10`.
fn stirling_tail(z: f64) -> f64 {
    let r = 1.0 / z;
    let r2 = r * r;
    r * (1.0 / 12.0
        + r2 * (-1.0 / 360.0
            + r2 * (1.0 / 1260.0
                + r2 * (-1.0 / 1680.0
                    + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360_360.0 + r2 * (1.0 / 156.0)))))))
}

/// One pmf term in signed-log form, for `m ≥ 1` and `M > 1`.
pub fn mcintyre_term(params: McIntyreParams, m: usize) -> SignedLog {
    debug_assert!(m >= 1);
    let k = params.k();
    let mean_gain = params.mean_gain();
    let steps = (m - 1) as f64;

    let ratio = if m <= PRODUCT_ROUTE_MAX {
        gamma_ratio_product(k, m)
    } else {
        gamma_ratio_lgamma(k, m)
    };

    // (1 - 1/k)^(m-1): negative base
    let lead = SignedLog {
        ln_abs: steps * (1.0 / k - 1.0).ln(),
        negative: (m - 1) % 2 == 1,
    };

    let singular = 1.0 + steps / k;
    debug_assert!(singular > 0.0);

    let exponent = (k + steps) / (k - 1.0);
    let ln_base = ((mean_gain - 1.0) * (1.0 - k) / (k * mean_gain)).ln_1p();
    let ln_survive = if m == 1 {
        0.0
    } else {
        steps * ((mean_gain - 1.0) / mean_gain).ln()
    };

    let tail = SignedLog {
        ln_abs: exponent * ln_base + ln_survive - ln_factorial((m - 1) as u64) - singular.ln(),
        negative: false,
    };
    lead.mul(ratio).mul(tail)
}

/// Excess noise factor for hole injection: `M/k - (2 - 1/M)(1/k - 1)`.
pub fn enf_theory(params: McIntyreParams) -> f64 {
    let k = params.k();
    let m = params.mean_gain();
    m / k - (2.0 - 1.0 / m) * (1.0 / k - 1.0)
}

pub fn enf_empirical(dist: &GainDistribution) -> Result<f64> {
    dist.enf()
}

pub fn moments(dist: &GainDistribution) -> Moments {
    dist.moments()
}

pub fn convolve_n(dist: &GainDistribution, n: usize) -> Result<GainDistribution> {
    dist.convolve_n(n)
}

/// Poisson probability of exactly `n` primaries at mean `n_bar`.
pub fn poisson_weight(n_bar: f64, n: usize) -> f64 {
    assert!(n_bar >= 0.0, "mean number of primaries must be >= 0");
    if n_bar == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    (n as f64 * n_bar.ln() - n_bar - ln_factorial(n as u64)).exp()
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = NeumaierSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[derive(Serialize, Deserialize)]
struct DistributionJson {
    kind: Origin,
    k: Option<f64>,
    #[serde(rename = "M")]
    mean_gain: Option<f64>,
    pmf: Vec<(usize, f64)>,
    truncation_mass: f64,
}

impl Serialize for GainDistribution {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        DistributionJson {
            kind: self.origin,
            k: self.params.map(|p| p.k()),
            mean_gain: self.params.map(|p| p.mean_gain()),
            pmf: self
                .pmf
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(m, p)| (m, *p))
                .collect(),
            truncation_mass: self.truncation_mass,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GainDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = DistributionJson::deserialize(deserializer)?;
        let len = raw.pmf.iter().map(|(m, _)| m + 1).max().unwrap_or(1);
        let mut pmf = vec![0.0; len];
        for (m, p) in raw.pmf {
            pmf[m] += p;
        }
        let mut dist =
            GainDistribution::from_pmf(pmf, raw.kind, raw.truncation_mass).map_err(D::Error::custom)?;
        if let (Some(k), Some(m)) = (raw.k, raw.mean_gain) {
            dist.params = Some(McIntyreParams::new(k, m).map_err(D::Error::custom)?);
        }
        Ok(dist)
    }
}
