use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "pehmqc",
    version,
    about = "Perfect-echo HMQC simulator and processing pipeline"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a 2D data set and write raw planes.
    Simulate(SimulateArgs),
    /// Window, zero fill, transform and phase raw data.
    Process(ProcessArgs),
    /// Peak report for one cross section of a spectrum.
    Analyze(AnalyzeArgs),
    /// Run HMQC and pe-HMQC with identical parameters and compare them.
    Compare(CompareArgs),
    /// Product-operator states at sequence marks.
    PoTrace(PoTraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// sw1 200 Hz, n1 512, sw2 800 Hz, n2 256, offsets scaled into the window.
    Desk,
    /// sw1 6500 Hz, n1 2400, sw2 2790 Hz, n2 840, offsets unchanged.
    Paper,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SystemArgs {
    /// Spin system: a JSON file path or builtin:NAME (ch2, ch-remote, ch2-remote, ax).
    #[arg(long)]
    pub system: String,
    /// Two-bond C-H coupling for builtin:ch-remote, Hz.
    #[arg(long = "two-j")]
    pub two_j: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SequenceArgs {
    /// Number of perfect-echo blocks spanning t1.
    #[arg(long = "n-pe", default_value_t = 1)]
    pub n_pe: usize,
    /// INEPT transfer delay in seconds (default 1/290).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Use plain INEPT delays without the 180° refocusing pair.
    #[arg(long = "no-refocus")]
    pub no_refocus: bool,
    /// Drop the multiple-quantum filter after the first carbon pulse.
    #[arg(long = "no-filters")]
    pub no_filters: bool,
    /// States-TPPI instead of States quadrature.
    #[arg(long)]
    pub tppi: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AcqArgs {
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// F1 spectral width, Hz.
    #[arg(long)]
    pub sw1: Option<f64>,
    /// F2 spectral width, Hz.
    #[arg(long)]
    pub sw2: Option<f64>,
    /// Number of t1 increments.
    #[arg(long)]
    pub n1: Option<usize>,
    /// Number of complex points per FID.
    #[arg(long)]
    pub n2: Option<usize>,
    /// First t1 value, seconds.
    #[arg(long = "t1-init")]
    pub t1_init: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProcArgs {
    /// Total F1 points after zero filling.
    #[arg(long)]
    pub zf1: Option<usize>,
    /// Total F2 points after zero filling.
    #[arg(long)]
    pub zf2: Option<usize>,
    /// Window for both dimensions: none or sine2[:shift].
    #[arg(long, default_value = "sine2")]
    pub window: String,
    /// auto, or zero-order phases p0_f2,p0_f1 in degrees.
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    pub phase: String,
    /// Skip the linear F1 correction for the first t1 value.
    #[arg(long = "no-first-order")]
    pub no_first_order: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// hmqc, pe-hmqc or file:PATH.
    #[arg(long)]
    pub sequence: String,
    #[command(flatten)]
    pub seq: SequenceArgs,
    #[command(flatten)]
    pub acq: AcqArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProcessArgs {
    /// Directory written by simulate.
    #[arg(long)]
    pub raw: PathBuf,
    #[command(flatten)]
    pub proc: ProcArgs,
    /// Output directory (default: the raw directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Spectrum CSV written by process.
    #[arg(long)]
    pub spectrum: PathBuf,
    /// f1@HZ (trace along F1 at that F2), f2@HZ (along F2 at that F1) or auto.
    #[arg(long, default_value = "auto")]
    pub section: String,
    /// Peak threshold relative to the section maximum.
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Standard deviation of added Gaussian noise for the S/N estimate.
    #[arg(long = "noise-sigma")]
    pub noise_sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Second spectrum; heights are reported relative to it.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[command(flatten)]
    pub seq: SequenceArgs,
    #[command(flatten)]
    pub acq: AcqArgs,
    #[command(flatten)]
    pub proc: ProcArgs,
    /// Cross-peak threshold relative to the spectrum maximum.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// F1 peak threshold relative to each section maximum.
    #[arg(long = "section-threshold", default_value_t = 0.1)]
    pub section_threshold: f64,
    /// Also write both phased spectra as CSV.
    #[arg(long = "write-spectra")]
    pub write_spectra: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PoTraceArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// hmqc, pe-hmqc or file:PATH.
    #[arg(long, default_value = "pe-hmqc")]
    pub sequence: String,
    #[command(flatten)]
    pub seq: SequenceArgs,
    /// t1 in seconds.
    #[arg(long)]
    pub t1: f64,
    /// Comma-separated mark labels.
    #[arg(long, default_value = "a,b,c,d", value_delimiter = ',')]
    pub marks: Vec<String>,
    /// Verify the closed-form states and exit with status 3 on mismatch.
    #[arg(long)]
    pub check: bool,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
