//! Command-line surface. Every field is optional so that a `--config` file
//! can supply it; flags win over the file, and defaults fill the rest.

use std::path::PathBuf;

use apd_core::ingest::SingleSampleDrift;
use apd_core::FreeParam;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Output directory used when `--out` is not given.
pub const OUT_DIR_ENV: &str = "APDGAIN_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "apdgain", version, about = "Gain statistics of single-carrier avalanche photodiodes")]
pub struct Cli {
    /// Number of worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// McIntyre gain pmf table.
    Pmf(PmfArgs),
    /// Excess noise factor versus average gain.
    Enf(EnfArgs),
    /// Monte Carlo gain histogram from the branching process.
    Mc(McArgs),
    /// Synthetic pulses, optionally with a histogram and a rendered trace.
    Synth(SynthArgs),
    /// Model density of observed charge per pulse.
    SpectrumTheory(SpectrumTheoryArgs),
    /// Fit k to (M, F) points.
    FitK(FitKArgs),
    /// Fit the spectrum model to a histogram or pulse list.
    FitSpectrum(FitSpectrumArgs),
    /// Average gain versus bias, normalized on the unity-gain plateau.
    GainCurve(GainCurveArgs),
    /// Trace -> pulse heights -> histogram -> spectrum fit.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    /// n̄ = 0.1
    Setup,
    /// n̄ = 0.07
    Figure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnfMethod {
    /// Closed form.
    Theory,
    /// Moments of the truncated analytic pmf.
    Pmf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftArg {
    None,
    Median,
}

impl From<DriftArg> for SingleSampleDrift {
    fn from(d: DriftArg) -> Self {
        match d {
            DriftArg::None => SingleSampleDrift::None,
            DriftArg::Median => SingleSampleDrift::Median,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct Common {
    /// JSON file with any of this command's keys; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub format: Option<Format>,

    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PmfArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    #[arg(long)]
    pub k: Option<f64>,

    #[arg(long = "M")]
    #[serde(rename = "M")]
    pub mean_gain: Option<f64>,

    #[arg(long)]
    pub tail_tolerance: Option<f64>,

    #[arg(long)]
    pub hard_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EnfArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    #[arg(long)]
    pub k: Option<f64>,

    /// Single average gain.
    #[arg(long = "M", conflicts_with = "gains")]
    #[serde(rename = "M")]
    pub mean_gain: Option<f64>,

    /// Comma-separated list of average gains.
    #[arg(long, value_delimiter = ',')]
    pub gains: Option<Vec<f64>>,

    #[arg(long, value_enum)]
    pub method: Option<EnfMethod>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct McArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    #[arg(long)]
    pub k: Option<f64>,

    #[arg(long = "M")]
    #[serde(rename = "M")]
    pub mean_gain: Option<f64>,

    #[arg(long)]
    pub trials: Option<u64>,

    /// Ionization events after which a trial is censored.
    #[arg(long)]
    pub event_cap: Option<u64>,

    /// Largest tolerated fraction of censored trials.
    #[arg(long)]
    pub max_censored: Option<f64>,
}

/// Device and readout parameters; unset values come from the preset.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceArgs {
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,

    #[arg(long)]
    pub k: Option<f64>,

    #[arg(long = "M")]
    #[serde(rename = "M")]
    pub mean_gain: Option<f64>,

    #[arg(long)]
    pub n_bar: Option<f64>,

    /// Dark primaries per pulse.
    #[arg(long)]
    pub dark_rate: Option<f64>,

    /// Feedback capacitance, pF.
    #[arg(long)]
    pub c_f_pf: Option<f64>,

    #[arg(long)]
    pub voltage_gain: Option<f64>,

    #[arg(long)]
    pub sigma_read: Option<f64>,

    #[arg(long)]
    pub sigma_post: Option<f64>,

    /// Whether dark primaries pass through the multiplication region.
    #[arg(long)]
    pub dark_multiplied: Option<bool>,
}

/// Histogram binning in electrons; the top edge defaults to the largest value.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct BinArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub bin_lo: Option<f64>,

    #[arg(long, allow_hyphen_values = true)]
    pub bin_hi: Option<f64>,

    #[arg(long)]
    pub bin_width: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    #[command(flatten)]
    #[serde(flatten)]
    pub device: DeviceArgs,

    #[arg(long)]
    pub pulses: Option<u64>,

    /// Also write a histogram (JSON) of observed electrons here.
    #[arg(long)]
    pub histogram: Option<PathBuf>,

    #[command(flatten)]
    #[serde(flatten)]
    pub bins: BinArgs,

    /// Also write the rendered CTIA trace (CSV) here.
    #[arg(long)]
    pub trace: Option<PathBuf>,

    /// Trace sampling rate, Hz.
    #[arg(long)]
    pub sampling_rate: Option<f64>,

    /// Linear baseline drift added to the trace, electrons/s.
    #[arg(long, allow_hyphen_values = true)]
    pub drift: Option<f64>,

    /// Integrator discharge level, electrons.
    #[arg(long)]
    pub reset_level: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumTheoryArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    #[command(flatten)]
    #[serde(flatten)]
    pub device: DeviceArgs,

    #[arg(long, allow_hyphen_values = true)]
    pub grid_lo: Option<f64>,

    #[arg(long, allow_hyphen_values = true)]
    pub grid_hi: Option<f64>,

    #[arg(long)]
    pub grid_points: Option<usize>,

    /// Largest number of primaries per pulse kept in the mixture.
    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FitKArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    /// CSV with columns M,F,weight or a JSON array of such objects.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

/// Spectrum-fit controls shared by `fit-spectrum` and `analyze`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FitArgs {
    /// Comma-separated subset of n_bar,k,M,sigma_read.
    #[arg(long, value_delimiter = ',')]
    pub free: Option<Vec<FreeParam>>,

    #[arg(long)]
    pub restarts: Option<usize>,

    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSpectrumArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    /// Histogram JSON, or pulses CSV as written by `synth`.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Starting point and fixed values.
    #[command(flatten)]
    #[serde(flatten)]
    pub device: DeviceArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub bins: BinArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GainCurveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    /// CSV with columns bias_voltage,mean_output_carriers.
    #[arg(long)]
    pub input: Option<PathBuf>,

    #[arg(long)]
    pub unity_bias: Option<f64>,

    /// Half-width of the plateau window, V.
    #[arg(long)]
    pub window: Option<f64>,

    /// Largest relative plateau slope, per volt.
    #[arg(long)]
    pub max_relative_slope: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,

    /// Trace CSV (timestamp,voltage).
    #[arg(long)]
    pub input: Option<PathBuf>,

    #[command(flatten)]
    #[serde(flatten)]
    pub device: DeviceArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,

    #[command(flatten)]
    #[serde(flatten)]
    pub bins: BinArgs,

    #[arg(long)]
    pub repetition_rate: Option<f64>,

    #[arg(long)]
    pub sampling_rate: Option<f64>,

    /// Pulse width, s.
    #[arg(long)]
    pub pulse_width: Option<f64>,

    /// Pulse start after the period boundary, s.
    #[arg(long)]
    pub pulse_delay: Option<f64>,

    /// Samples used for each drift estimate.
    #[arg(long)]
    pub drift_window: Option<usize>,

    #[arg(long)]
    pub reset_threshold: Option<f64>,

    #[arg(long, value_enum)]
    pub single_sample_drift: Option<DriftArg>,

    /// Also write the extracted heights (CSV) here.
    #[arg(long)]
    pub heights: Option<PathBuf>,
}
