//! Monte Carlo avalanche multiplication.
//!
//! A one-dimensional multiplication region of unit length with constant
//! ionization coefficients. A hole enters at `x = 0` and drifts toward
//! `x = 1`; electrons drift toward `x = 0`. Free paths are exponential with
//! rate `β·L` for holes and `α·L = β·L / k` for electrons. Every ionization
//! leaves the ionizing carrier in place and adds one electron and one hole,
//! so the collected carrier count is `m = 1 + events`.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::{validate_k, GainDistribution, Origin};
use crate::rng::{self, Domain};

const CHUNK: u64 = 4096;

/// Ionization coefficients (normalized to the region length) and run limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvalancheConfig {
    pub k: f64,
    pub beta_l: f64,
    pub event_cap: u64,
    pub seed: u64,
}

impl AvalancheConfig {
    pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;

    pub fn new(k: f64, beta_l: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            k,
            beta_l,
            event_cap: Self::DEFAULT_EVENT_CAP,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration whose deterministic mean gain is `mean_gain`.
    pub fn for_mean_gain(k: f64, mean_gain: f64, seed: u64) -> Result<Self> {
        Self::new(k, solve_beta_l(k, mean_gain)?, seed)
    }

    pub fn with_event_cap(mut self, event_cap: u64) -> Result<Self> {
        self.event_cap = event_cap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        validate_k(self.k)?;
        if !(self.beta_l >= 0.0 && self.beta_l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta*L must be finite and >= 0, got {}",
                self.beta_l
            )));
        }
        if self.event_cap < 1 {
            return Err(Error::InvalidParameter("event cap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn mean_gain(&self) -> Result<f64> {
        mean_gain_from_coefficients(self.k, self.beta_l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrialOutcome {
    pub m: u64,
    pub censored: bool,
}

/// `β·L` at which the hole-injected mean gain diverges.
pub fn breakdown_beta_l(k: f64) -> f64 {
    k * (1.0 / k).ln() / (1.0 - k)
}

/// Mean gain of the constant-coefficient avalanche under pure hole
/// injection: `M = (1 - k) / (1 - k exp((α - β) L))`.
pub fn mean_gain_from_coefficients(k: f64, beta_l: f64) -> Result<f64> {
    validate_k(k)?;
    if !(beta_l >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta*L must be >= 0, got {beta_l}"
        )));
    }
    let u = (1.0 / k - 1.0) * beta_l;
    let denom = (1.0 - k) - k * u.exp_m1();
    if !(denom > 0.0) || !u.is_finite() {
        return Err(Error::Divergence {
            k,
            beta_l,
            breakdown: breakdown_beta_l(k),
        });
    }
    Ok((1.0 - k) / denom)
}

/// Inverts [`mean_gain_from_coefficients`] by bisection on `[0, breakdown)`.
pub fn solve_beta_l(k: f64, mean_gain: f64) -> Result<f64> {
    validate_k(k)?;
    if !(mean_gain >= 1.0) || !mean_gain.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "target gain must be finite and >= 1, got {mean_gain}"
        )));
    }
    if mean_gain == 1.0 {
        return Ok(0.0);
    }
    let tolerance = 1e-10 * mean_gain;
    let mut lo = 0.0;
    let mut hi = breakdown_beta_l(k);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match mean_gain_from_coefficients(k, mid) {
            Ok(g) if (g - mean_gain).abs() <= tolerance => return Ok(mid),
            Ok(g) if g < mean_gain => lo = mid,
            _ => hi = mid,
        }
    }
    Err(Error::NoSolution(format!(
        "gain {mean_gain} not reachable below breakdown for k = {k}"
    )))
}

#[derive(Clone, Copy)]
enum Carrier {
    Hole,
    Electron,
}

/// Runs trial `trial_index`. The outcome depends only on `(cfg, trial_index)`.
pub fn simulate_single_injection(cfg: &AvalancheConfig, trial_index: u64) -> TrialOutcome {
    let mut rng = rng::stream(cfg.seed, Domain::Avalanche, trial_index);
    let hole_rate = cfg.beta_l;
    let electron_rate = cfg.beta_l / cfg.k;

    let mut stack: Vec<(f64, Carrier)> = vec![(0.0, Carrier::Hole)];
    let mut events: u64 = 0;
    while let Some((mut x, carrier)) = stack.pop() {
        loop {
            let path: f64 = rng.sample(Exp1);
            match carrier {
                Carrier::Hole => {
                    x += path / hole_rate;
                    if x >= 1.0 {
                        break;
                    }
                }
                Carrier::Electron => {
                    x -= path / electron_rate;
                    if x <= 0.0 {
                        break;
                    }
                }
            }
            events += 1;
            if events >= cfg.event_cap {
                return TrialOutcome {
                    m: 1 + events,
                    censored: true,
                };
            }
            stack.push((x, Carrier::Hole));
            stack.push((x, Carrier::Electron));
        }
    }
    TrialOutcome {
        m: 1 + events,
        censored: false,
    }
}

/// Result of a batch of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct McRun {
    pub distribution: GainDistribution,
    pub trials: u64,
    pub censored: u64,
    pub seed: u64,
}

impl McRun {
    /// Fails when more than `max_fraction` of trials were censored.
    pub fn check_censoring(&self, max_fraction: f64) -> Result<()> {
        if self.censored as f64 > max_fraction * self.trials as f64 {
            return Err(Error::ExcessiveCensoring {
                censored: self.censored,
                trials: self.trials,
            });
        }
        Ok(())
    }
}

#[derive(Default)]
struct Tally {
    counts: Vec<u64>,
    censored: u64,
}

impl Tally {
    fn record(&mut self, outcome: TrialOutcome) {
        if outcome.censored {
            self.censored += 1;
            return;
        }
        let m = outcome.m as usize;
        if self.counts.len() <= m {
            self.counts.resize(m + 1, 0);
        }
        self.counts[m] += 1;
    }

    fn merge(mut self, other: Tally) -> Tally {
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.censored += other.censored;
        self
    }
}

/// Empirical gain distribution over `trials` independent injections, using
/// the global rayon pool. Censored trials are reported separately and
/// appear as truncation mass.
pub fn sample_gain_histogram(cfg: &AvalancheConfig, trials: u64) -> Result<McRun> {
    cfg.validate()?;
    if trials < 1 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let chunks = trials.div_ceil(CHUNK);
    let tally = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut t = Tally::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                t.record(simulate_single_injection(cfg, i));
            }
            t
        })
        .reduce(Tally::default, Tally::merge);
    let distribution = GainDistribution::from_counts(&tally.counts, tally.censored, Origin::MonteCarlo)?;
    Ok(McRun {
        distribution,
        trials,
        censored: tally.censored,
        seed: cfg.seed,
    })
}

/// Same as [`sample_gain_histogram`] on a dedicated pool of `workers`
/// threads. The result does not depend on `workers`.
pub fn sample_gain_histogram_with_workers(
    cfg: &AvalancheConfig,
    trials: u64,
    workers: usize,
) -> Result<McRun> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    pool.install(|| sample_gain_histogram(cfg, trials))
}
