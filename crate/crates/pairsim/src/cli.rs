//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pairsim_core::coincidence::{find_coincidences, visibility};
use pairsim_core::optics::{
    delta_for_pair, fit_jsi, schmidt_decompose, Channel, FitOptions, FitParams, FixedFlags, GridSpec, JsiModel,
    PumpSpec, SchmidtMode,
};
use pairsim_core::rates::{
    self, accidental_rate, detector_efficiency, extrapolate_metrics, fock_coincidence_oracle, heralded_g2,
    heralded_g2_slope, multiphoton_coincidence, multiphoton_visibility, port_visibilities, secret_key_rate,
    source_port_mu_ratio, visibility_corrected, MeasuredRates, PortRatios, QualitySlopes, RateMetrics, SaturationSpec,
    ScalingMode, SecretLaw,
};
use pairsim_core::sim::{generate_stream, CHANNEL_A, CHANNEL_B};
use pairsim_core::timewalk::{apply_correction, build_hist2d, calibrate, CalibrationOptions, YBins};
use pairsim_core::tomography::{
    coherent_information, entangled_rates, fidelity_pure, log_negativity, mle_reconstruct, phi_plus, validate_density,
    MleOptions,
};
use pairsim_core::{math, period_ps, Bin, TimeTag, DEFAULT_REP_RATE_HZ};

use crate::config::{parse_u64, RunConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{self, num, Provenance};
use crate::pipeline;

fn sci_u64(s: &str) -> Result<u64, String> {
    parse_u64("value", s).map_err(|e| e.to_string())
}

fn sci_usize(s: &str) -> Result<usize, String> {
    sci_u64(s).map(|v| v as usize)
}

fn sci_u8(s: &str) -> Result<u8, String> {
    sci_u64(s).and_then(|v| u8::try_from(v).map_err(|_| format!("{v} does not fit in 0..=255")))
}

fn sci_i32(s: &str) -> Result<i32, String> {
    crate::config::parse_i64("value", s)
        .map_err(|e| e.to_string())
        .and_then(|v| i32::try_from(v).map_err(|_| format!("{v} out of range")))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Parser)]
#[command(
    name = "pairsim",
    version,
    about = "Time-bin entangled pair source: model, simulate, analyze"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a JSI grid for one channel pair as CSV.
    Jsi(JsiArgs),
    /// Inverse Schmidt number and geometric factor of a filtered channel pair.
    Schmidt(SchmidtArgs),
    /// Fit temperature, pump and efficiencies to a measured rate matrix.
    Fit(FitArgs),
    /// Generate a two-channel time-tag stream.
    Simulate(SimulateArgs),
    /// Time-walk calibration and correction.
    #[command(subcommand)]
    Twc(TwcCommand),
    /// Pair Alice and Bob tags and report the 3x3 bin matrix.
    Coinc(CoincArgs),
    /// Tomography reconstruction and entanglement measures.
    #[command(subcommand)]
    Tomo(TomoCommand),
    /// Closed-form rate and visibility formulas.
    #[command(subcommand)]
    Calc(CalcCommand),
    /// Extrapolate rates versus mu through the saturation law.
    Extrapolate(ExtrapolateArgs),
    /// Full pipeline over the mu sweep of a config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Alice (idler) ITU channel.
    #[arg(long, default_value_t = 38, value_parser = sci_i32)]
    pub alice_channel: i32,
    /// Bob (signal) ITU channel.
    #[arg(long, default_value_t = 56, value_parser = sci_i32)]
    pub bob_channel: i32,
    /// Phase-matching temperature, C.
    #[arg(long, default_value_t = 229.0)]
    pub temperature_c: f64,
    /// Pump center wavelength, nm.
    #[arg(long, default_value_t = 769.78)]
    pub pump_nm: f64,
    /// Pump FWHM, GHz.
    #[arg(long, default_value_t = 243.0)]
    pub pump_fwhm_ghz: f64,
    /// Super-Gaussian filter order.
    #[arg(long, default_value_t = 3, value_parser = sci_u64)]
    pub order: u64,
}

impl SourceArgs {
    fn model(&self) -> JsiModel {
        let mut m = JsiModel::reference();
        m.crystal.temperature_c = self.temperature_c;
        m.pump = PumpSpec::from_fwhm(self.pump_nm, self.pump_fwhm_ghz * 1e9);
        m
    }

    fn filters(&self, fwhm_ghz: f64) -> (pairsim_core::optics::FilterSpec, pairsim_core::optics::FilterSpec) {
        let f = |ch| pairsim_core::optics::FilterSpec::itu(ch, fwhm_ghz * 1e9, self.order as u32, 1.0);
        (f(self.bob_channel), f(self.alice_channel))
    }
}

#[derive(Debug, Args)]
pub struct JsiArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Filter FWHM, GHz; sets the grid extent (3 FWHM each side).
    #[arg(long, default_value_t = 82.0)]
    pub fwhm_ghz: f64,
    /// Points per axis.
    #[arg(long, default_value_t = 512, value_parser = sci_usize)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Intensity,
    Amplitude,
}

#[derive(Debug, Args)]
pub struct SchmidtArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Literal filter FWHM, GHz.
    #[arg(long, conflicts_with = "class_ghz")]
    pub fwhm_ghz: Option<f64>,
    /// DWDM channel class: 100 (82 GHz FWHM) or 50 (41 GHz FWHM).
    #[arg(long, value_parser = sci_u64)]
    pub class_ghz: Option<u64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Intensity)]
    pub mode: ModeArg,
    /// Skip the geometric-factor integrals.
    #[arg(long)]
    pub no_delta: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Coincidence matrix CSV: header row Bob channels, first column Alice channels, Hz.
    #[arg(long)]
    pub rates: PathBuf,
    /// Singles CSV `channel,hz` with channels written A38, B56, ...
    #[arg(long)]
    pub singles: PathBuf,
    /// Initial temperature, C.
    #[arg(long, default_value_t = 229.0)]
    pub temperature_c: f64,
    #[arg(long)]
    pub fix_temperature: bool,
    #[arg(long)]
    pub fix_pump: bool,
    /// Filter FWHM, GHz.
    #[arg(long, default_value_t = 82.0)]
    pub fwhm_ghz: f64,
    #[arg(long, default_value_t = 3, value_parser = sci_usize)]
    pub starts: usize,
    #[arg(long, default_value_t = 0, value_parser = sci_u64)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Config file; its first mu and its detector settings are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long, value_parser = sci_u64)]
    pub seed: Option<u64>,
    /// Total two-photon phase, rad.
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    /// Output stream; `.csv` selects CSV, anything else the binary format.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TwcCommand {
    /// Build the gap/phase histogram of one channel and write its walk table.
    Calibrate(TwcCalibrateArgs),
    /// Correct one channel of a stream with a walk table.
    Apply(TwcApplyArgs),
}

#[derive(Debug, Args)]
pub struct TwcCalibrateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CHANNEL_A, value_parser = sci_u8)]
    pub channel: u8,
    #[arg(long, default_value_t = DEFAULT_REP_RATE_HZ)]
    pub rep_rate_hz: f64,
    /// Clock-phase column width, ps.
    #[arg(long, default_value_t = 1.0)]
    pub x_bin_ps: f64,
    /// Minimum counts for a row's own estimate.
    #[arg(long, default_value_t = 1000, value_parser = sci_u64)]
    pub min_row_counts: u64,
}

#[derive(Debug, Args)]
pub struct TwcApplyArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CHANNEL_A, value_parser = sci_u8)]
    pub channel: u8,
}

#[derive(Debug, Args)]
pub struct CoincArgs {
    /// Stream holding both channels, or Alice's stream when `--in-b` is given.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub in_b: Option<PathBuf>,
    #[arg(long, default_value_t = CHANNEL_A, value_parser = sci_u8)]
    pub channel_a: u8,
    #[arg(long, default_value_t = CHANNEL_B, value_parser = sci_u8)]
    pub channel_b: u8,
    #[arg(long, default_value_t = 100.0)]
    pub window_ps: f64,
    /// Full guard width at each bin boundary; 0 disables guards.
    #[arg(long, default_value_t = 10.0)]
    pub guard_ps: f64,
    #[arg(long, default_value_t = DEFAULT_REP_RATE_HZ)]
    pub rep_rate_hz: f64,
    /// Acquisition time for rates; defaults to the last tag time.
    #[arg(long)]
    pub duration_s: Option<f64>,
    /// Write the 3x3 matrix as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TomoCommand {
    /// Maximum-likelihood density matrix from `a,b = count` lines.
    Reconstruct(TomoReconstructArgs),
    /// Log-negativity, coherent information and derived rates of a density matrix.
    Measures(TomoMeasuresArgs),
}

#[derive(Debug, Args)]
pub struct TomoReconstructArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000, value_parser = sci_usize)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct TomoMeasuresArgs {
    #[arg(long)]
    pub rho: PathBuf,
    /// Coincidence rate for C_N, C_I and SKR, Hz.
    #[arg(long)]
    pub c_ab: Option<f64>,
    /// Visibility (fraction) for the key rate.
    #[arg(long, default_value_t = 1.0)]
    pub visibility: f64,
}

#[derive(Debug, Subcommand)]
pub enum CalcCommand {
    /// Secret key rate q C [1 - f H2(E) - H2(E)].
    Skr {
        #[arg(long)]
        c_ab: f64,
        #[arg(long)]
        visibility: f64,
        #[arg(long, default_value_t = rates::DEFAULT_SIFT_Q)]
        q: f64,
        #[arg(long, default_value_t = rates::DEFAULT_F_EC)]
        f_ec: f64,
    },
    /// Fringe visibility (percent) and its counting error.
    Visibility {
        #[arg(long)]
        max: f64,
        #[arg(long)]
        min: f64,
        #[arg(long, default_value_t = 1.0)]
        t_max: f64,
        #[arg(long, default_value_t = 1.0)]
        t_min: f64,
    },
    /// Visibility after subtracting accidentals (percent).
    VisibilityCorrected {
        #[arg(long)]
        max: f64,
        #[arg(long)]
        min: f64,
        #[arg(long)]
        acc: f64,
    },
    /// Mean pair number per cycle from singles and coincidences.
    Mu {
        #[arg(long)]
        s_a: f64,
        #[arg(long)]
        s_b: f64,
        #[arg(long)]
        c_ab: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = DEFAULT_REP_RATE_HZ)]
        rep_rate_hz: f64,
    },
    /// Geometric factor C / (eta S_other).
    Delta {
        #[arg(long)]
        c: f64,
        #[arg(long)]
        eta: f64,
        #[arg(long)]
        s_other: f64,
    },
    /// Accidental coincidence rate and its components.
    Accidentals {
        #[arg(long)]
        s_a: f64,
        #[arg(long)]
        s_b: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        eta_a: f64,
        #[arg(long)]
        eta_b: f64,
        #[arg(long, default_value_t = DEFAULT_REP_RATE_HZ)]
        rep_rate_hz: f64,
    },
    /// Multiphoton visibility and phase-dependent coincidence probability.
    Multiphoton {
        #[arg(long)]
        mu_e: f64,
        #[arg(long)]
        mu_l: f64,
        #[arg(long, default_value_t = 0.0)]
        phase: f64,
        #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
        tau_a: f64,
        #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
        tau_b: f64,
        /// Also evaluate the photon-number-truncated oracle with this cutoff.
        #[arg(long, value_parser = sci_usize)]
        fock: Option<usize>,
    },
    /// Visibilities of the four output-port combinations.
    Ports {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        kappa_a: f64,
        #[arg(long)]
        kappa_b: f64,
        #[arg(long, default_value_t = 1.0)]
        eps_a: f64,
        #[arg(long, default_value_t = 1.0)]
        eps_b: f64,
    },
    /// mu_E/mu_L leaving a source interferometer port.
    SourcePort {
        #[arg(long, value_parser = sci_u8)]
        port: u8,
        #[arg(long, default_value_t = std::f64::consts::FRAC_1_SQRT_2)]
        t: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
    },
    /// Coincidence rate scaled to the full two-photon wavefunction.
    Scaling {
        #[arg(long)]
        c: f64,
        #[arg(long)]
        r_a: f64,
        #[arg(long)]
        r_b: f64,
        /// Use the two-branch estimate instead of the four-port sum.
        #[arg(long)]
        two_branch: bool,
    },
    /// Heralded g2(0); with --mu also the slope g2/mu.
    G2 {
        #[arg(long)]
        s_i: f64,
        #[arg(long)]
        eta_i: f64,
        #[arg(long, default_value_t = DEFAULT_REP_RATE_HZ)]
        rep_rate_hz: f64,
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Count-rate-dependent detector efficiency.
    Efficiency {
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 15.5e6)]
        rate_3db: f64,
        #[arg(long, default_value_t = 1.0)]
        eta0: f64,
    },
}

#[derive(Debug, Args)]
pub struct ExtrapolateArgs {
    /// Baseline mu.
    #[arg(long)]
    pub mu0: f64,
    /// Baseline coincidence rate per channel pair, Hz.
    #[arg(long)]
    pub c_ab: f64,
    /// Baseline singles per arm, Hz.
    #[arg(long)]
    pub s_a: f64,
    #[arg(long)]
    pub s_b: f64,
    /// Baseline log-negativity and coherent information per coincidence.
    #[arg(long)]
    pub e_n: f64,
    #[arg(long)]
    pub e_i: f64,
    /// Baseline visibility (fraction).
    #[arg(long)]
    pub visibility: f64,
    #[arg(long)]
    pub slope_e_n: f64,
    #[arg(long)]
    pub slope_e_i: f64,
    #[arg(long)]
    pub slope_visibility: f64,
    /// 3 dB count rate; 0 disables saturation.
    #[arg(long, default_value_t = 15.5e6)]
    pub rate_3db: f64,
    #[arg(long, default_value_t = 8, value_parser = sci_usize)]
    pub channels: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub mu_min: f64,
    #[arg(long, default_value_t = 0.03)]
    pub mu_max: f64,
    #[arg(long, default_value_t = 600, value_parser = sci_usize)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads for the mu sweep.
    #[arg(long, env = "PAIRSIM_JOBS", default_value_t = default_jobs(), value_parser = sci_usize)]
    pub jobs: usize,
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn kv(out: &mut dyn Write, key: &str, value: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{key} = {value}").map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))
}

/// Hash of the invocation, recorded in CSV headers of one-off commands.
fn args_provenance(parts: &[String], seed: Option<u64>) -> Provenance {
    Provenance::new(&parts.join(" "), seed)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Jsi(a) => cmd_jsi(a, out),
        Command::Schmidt(a) => cmd_schmidt(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Twc(TwcCommand::Calibrate(a)) => cmd_twc_calibrate(a, out),
        Command::Twc(TwcCommand::Apply(a)) => cmd_twc_apply(a, out),
        Command::Coinc(a) => cmd_coinc(a, out),
        Command::Tomo(TomoCommand::Reconstruct(a)) => cmd_tomo_reconstruct(a, out),
        Command::Tomo(TomoCommand::Measures(a)) => cmd_tomo_measures(a, out),
        Command::Calc(c) => cmd_calc(c, out),
        Command::Extrapolate(a) => cmd_extrapolate(a, out),
        Command::Run(a) => cmd_run(a, out),
    }
}

fn cmd_jsi(a: JsiArgs, out: &mut dyn Write) -> CliResult<()> {
    let spec = GridSpec {
        pair_points: a.points,
        ..GridSpec::default()
    };
    let (u, v) = a.source.filters(a.fwhm_ghz);
    let g = spec.pair_grid(&a.source.model(), &u, &v)?;
    formats::write_text(&a.out, &formats::jsi_csv(&g))?;
    kv(out, "signal_points", g.signal_nm.len())?;
    kv(out, "idler_points", g.idler_nm.len())?;
    kv(out, "peak", num(g.intensity.iter().copied().fold(0.0, f64::max)))
}

fn cmd_schmidt(a: SchmidtArgs, out: &mut dyn Write) -> CliResult<()> {
    let fwhm = match (a.fwhm_ghz, a.class_ghz) {
        (Some(f), None) => f,
        (None, Some(100)) | (None, None) => 82.0,
        (None, Some(50)) => 41.0,
        (None, Some(c)) => return Err(CliError::Usage(format!("--class-ghz must be 100 or 50, got {c}"))),
        (Some(_), Some(_)) => return Err(CliError::Usage("--fwhm-ghz conflicts with --class-ghz".into())),
    };
    if !(fwhm > 0.0) {
        return Err(CliError::Usage("--fwhm-ghz must be > 0".into()));
    }
    let model = a.source.model();
    let (u, v) = a.source.filters(fwhm);
    let spec = GridSpec::default();
    let g = spec.pair_grid(&model, &u, &v)?;
    let mode = match a.mode {
        ModeArg::Intensity => SchmidtMode::Intensity,
        ModeArg::Amplitude => SchmidtMode::Amplitude,
    };
    let s = schmidt_decompose(&u, &v, &g, mode)?;
    kv(out, "fwhm_ghz", num(fwhm))?;
    kv(out, "inverse_schmidt", format!("{:.6}", s.inverse_k))?;
    kv(out, "schmidt_number", format!("{:.6}", s.schmidt_number))?;
    let lead: Vec<String> = s.coefficients.iter().take(5).map(|c| format!("{c:.6}")).collect();
    kv(out, "leading_coefficients", lead.join(","))?;
    if !a.no_delta {
        let d = delta_for_pair(&model, &u, &v, &spec)?;
        kv(out, "delta_given_idler", format!("{:.6}", d.given_idler))?;
        kv(out, "delta_given_signal", format!("{:.6}", d.given_signal))?;
        kv(out, "delta", format!("{:.6}", d.mean))?;
    }
    Ok(())
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = formats::parse_rate_data(&formats::read_text(&a.rates)?, &formats::read_text(&a.singles)?)
        .map_err(|m| CliError::format(&a.rates, m))?;
    let mut channels: Vec<Channel> = data.singles.keys().copied().collect();
    for &(al, bo) in data.coincidences.keys() {
        channels.push(Channel::alice(al));
        channels.push(Channel::bob(bo));
    }
    channels.sort();
    channels.dedup();
    let reference = PumpSpec::reference();
    let initial = FitParams {
        temperature_c: a.temperature_c,
        pump_center_nm: reference.center_nm,
        pump_sigma_hz: reference.sigma_hz,
        etas: channels.iter().map(|&c| (c, 0.5)).collect(),
        brightness: 1.0,
        fixed: FixedFlags {
            temperature: a.fix_temperature,
            pump_center: a.fix_pump,
            pump_sigma: a.fix_pump,
            ..FixedFlags::default()
        },
    };
    let opts = FitOptions {
        default_fwhm_hz: a.fwhm_ghz * 1e9,
        starts: a.starts,
        seed: a.seed,
        ..FitOptions::default()
    };
    let r = fit_jsi(&data, &initial, &JsiModel::reference().crystal, &opts)?;
    kv(out, "converged", r.converged)?;
    kv(out, "objective", num(r.objective))?;
    kv(out, "temperature_c", num(r.params.temperature_c))?;
    kv(out, "pump_center_nm", num(r.params.pump_center_nm))?;
    kv(out, "pump_sigma_hz", num(r.params.pump_sigma_hz))?;
    kv(out, "brightness", num(r.params.brightness))?;
    for (c, e) in &r.params.etas {
        let arm = if c.arm == pairsim_core::optics::Arm::Idler {
            "A"
        } else {
            "B"
        };
        kv(out, &format!("eta_{arm}{}", c.itu), num(*e))?;
    }
    for res in &r.residuals {
        kv(out, &format!("residual_{}", res.label), num(res.relative))?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::parse(&formats::read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(d) = a.duration_s {
        cfg.duration_s = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mu = a.mu.unwrap_or(cfg.mu[0]);
    let delta = pipeline::resolve_delta(&cfg)?;
    let det = cfg.detector();
    let sc = cfg.scenario(mu, delta, cfg.seed).with_theta(a.theta);
    let o = generate_stream(&sc, &det, &det)?;
    let merged = formats::merge_streams(&o.a, &o.b);
    formats::save_stream(&a.out, &merged)?;
    kv(out, "tags_a", o.a.len())?;
    kv(out, "tags_b", o.b.len())?;
    kv(out, "cycles", o.truth.cycles)?;
    kv(out, "pairs_both_detected", o.truth.both_detected)?;
    kv(out, "effective_eta_a", num(o.truth.effective_eta_a))?;
    kv(out, "effective_eta_b", num(o.truth.effective_eta_b))?;
    kv(
        out,
        "sha256",
        formats::sha256_hex(&std::fs::read(&a.out).map_err(|e| CliError::io(&a.out, e))?),
    )
}

fn cmd_twc_calibrate(a: TwcCalibrateArgs, out: &mut dyn Write) -> CliResult<()> {
    let tags = formats::channel(&formats::load_stream(&a.input)?, a.channel);
    let p = period_ps(a.rep_rate_hz);
    let y = YBins::default();
    let h = build_hist2d(&tags, p, a.x_bin_ps, &y)?;
    let opts = CalibrationOptions {
        min_row_counts: a.min_row_counts,
        ..CalibrationOptions::default()
    };
    let t = calibrate(&h, &opts)?;
    let prov = args_provenance(
        &[
            "twc calibrate".into(),
            a.input.display().to_string(),
            a.channel.to_string(),
            num(a.rep_rate_hz),
            num(a.x_bin_ps),
            a.min_row_counts.to_string(),
        ],
        None,
    );
    formats::write_text(&a.out, &formats::walk_table_csv(&prov, &t, p, a.x_bin_ps, &y))?;
    kv(out, "tags", tags.len())?;
    kv(out, "rows", t.correction_ps.len())?;
    kv(out, "inherited_rows", t.inherited.iter().filter(|&&b| b).count())?;
    kv(out, "flagged_rows", t.flagged.iter().filter(|&&b| b).count())?;
    kv(
        out,
        "max_correction_ps",
        num(t.correction_ps.iter().copied().fold(0.0, f64::max)),
    )
}

fn cmd_twc_apply(a: TwcApplyArgs, out: &mut dyn Write) -> CliResult<()> {
    let all = formats::load_stream(&a.input)?;
    let table = formats::parse_walk_table(&formats::read_text(&a.table)?).map_err(|m| CliError::format(&a.table, m))?;
    let fixed = apply_correction(&formats::channel(&all, a.channel), &table)?;
    let rest: Vec<TimeTag> = all.iter().copied().filter(|t| t.channel != a.channel).collect();
    let mut merged = fixed.clone();
    merged.extend(rest);
    merged.sort_by_key(|t| (t.time_ps, t.channel));
    formats::save_stream(&a.out, &merged)?;
    kv(out, "corrected", fixed.len())?;
    kv(out, "total", merged.len())
}

fn cmd_coinc(a: CoincArgs, out: &mut dyn Write) -> CliResult<()> {
    let first = formats::load_stream(&a.input)?;
    let (sa, sb) = match &a.in_b {
        Some(p) => (
            formats::channel(&first, a.channel_a),
            formats::channel(&formats::load_stream(p)?, a.channel_b),
        ),
        None => (
            formats::channel(&first, a.channel_a),
            formats::channel(&first, a.channel_b),
        ),
    };
    let mut bins = pairsim_core::coincidence::BinConfig::default().with_guard(a.guard_ps);
    bins.period_ps = period_ps(a.rep_rate_hz);
    bins.windows[2].1 = bins.period_ps;
    let c = find_coincidences(&sa, &sb, a.window_ps, &bins)?;
    let last = sa.iter().chain(&sb).map(|t| t.time_ps).max().unwrap_or(0);
    let dur = a.duration_s.unwrap_or(last as f64 * 1e-12);
    kv(out, "singles_a", sa.len())?;
    kv(out, "singles_b", sb.len())?;
    for x in Bin::ALL {
        for y in Bin::ALL {
            kv(out, &format!("cell_{}{}", x.label(), y.label()), c.cell(x, y))?;
        }
    }
    kv(out, "total", c.total())?;
    kv(out, "unpaired_a", c.unpaired_a)?;
    kv(out, "unpaired_b", c.unpaired_b)?;
    kv(out, "excluded_a", c.excluded_a)?;
    kv(out, "excluded_b", c.excluded_b)?;
    if dur > 0.0 {
        kv(out, "duration_s", num(dur))?;
        kv(out, "coincidence_rate_hz", num(c.total() as f64 / dur))?;
        kv(out, "singles_a_hz", num(sa.len() as f64 / dur))?;
        kv(out, "singles_b_hz", num(sb.len() as f64 / dur))?;
    }
    if let Some(p) = &a.out {
        let prov = args_provenance(
            &[
                "coinc".into(),
                a.input.display().to_string(),
                num(a.window_ps),
                num(a.guard_ps),
                num(a.rep_rate_hz),
            ],
            None,
        );
        let rows: Vec<Vec<String>> = Bin::ALL
            .iter()
            .map(|&x| {
                let mut r = vec![x.label().to_string()];
                r.extend(Bin::ALL.iter().map(|&y| c.cell(x, y).to_string()));
                r
            })
            .collect();
        formats::write_text(
            p,
            &formats::csv_text(&prov, &[], &["alice_bin", "bob_E", "bob_M", "bob_L"], &rows),
        )?;
    }
    Ok(())
}

fn cmd_tomo_reconstruct(a: TomoReconstructArgs, out: &mut dyn Write) -> CliResult<()> {
    let text = formats::read_text(&a.counts)?;
    let counts = formats::parse_tomo_counts(&text).map_err(|m| CliError::format(&a.counts, m))?;
    let r = mle_reconstruct(
        &counts,
        &MleOptions {
            max_iter: a.max_iter,
            tolerance: a.tolerance,
        },
    )?;
    let prov = Provenance::new(&text, None);
    formats::write_text(&a.out, &formats::density_csv(&prov, &r.rho))?;
    kv(out, "iterations", r.iterations)?;
    kv(out, "converged", r.converged)?;
    kv(
        out,
        "log_likelihood",
        num(*r.log_likelihood.last().unwrap_or(&f64::NAN)),
    )?;
    kv(out, "log_negativity", num(log_negativity(&r.rho)))?;
    kv(out, "coherent_information", num(coherent_information(&r.rho)))
}

fn cmd_tomo_measures(a: TomoMeasuresArgs, out: &mut dyn Write) -> CliResult<()> {
    let rho = formats::parse_density(&formats::read_text(&a.rho)?).map_err(|m| CliError::format(&a.rho, m))?;
    validate_density(&rho)?;
    kv(out, "log_negativity", num(log_negativity(&rho)))?;
    kv(out, "coherent_information", num(coherent_information(&rho)))?;
    kv(out, "fidelity_phi_plus", num(fidelity_pure(&rho, &phi_plus())))?;
    if let Some(c) = a.c_ab {
        let r = entangled_rates(&rho, c, a.visibility)?;
        kv(out, "c_n_hz", num(r.c_n))?;
        kv(out, "c_i_hz", num(r.c_i))?;
        kv(out, "skr_hz", num(r.skr))?;
    }
    Ok(())
}

fn cmd_calc(c: CalcCommand, out: &mut dyn Write) -> CliResult<()> {
    match c {
        CalcCommand::Skr {
            c_ab,
            visibility,
            q,
            f_ec,
        } => kv(out, "skr", num(secret_key_rate(c_ab, visibility, q, f_ec)?)),
        CalcCommand::Visibility { max, min, t_max, t_min } => {
            let (v, s) = visibility(max, min, t_max, t_min)?;
            kv(out, "visibility_pct", num(v))?;
            kv(out, "sigma_pct", num(s))
        }
        CalcCommand::VisibilityCorrected { max, min, acc } => {
            kv(out, "visibility_pct", num(visibility_corrected(max, min, acc)?))
        }
        CalcCommand::Mu {
            s_a,
            s_b,
            c_ab,
            delta,
            rep_rate_hz,
        } => {
            let r = MeasuredRates {
                s_a,
                s_b,
                c_ab,
                rep_rate_hz,
            };
            kv(out, "mu", num(rates::mu_from_rates(&r, delta)?))
        }
        CalcCommand::Delta { c, eta, s_other } => kv(out, "delta", num(rates::delta_empirical(c, eta, s_other)?)),
        CalcCommand::Accidentals {
            s_a,
            s_b,
            delta,
            eta_a,
            eta_b,
            rep_rate_hz,
        } => {
            let r = accidental_rate(s_a, s_b, rep_rate_hz, delta, eta_a, eta_b)?;
            kv(out, "total_hz", num(r.total))?;
            kv(out, "ee_hz", num(r.ee))?;
            kv(out, "em_hz", num(r.em))?;
            kv(out, "me_hz", num(r.me))
        }
        CalcCommand::Multiphoton {
            mu_e,
            mu_l,
            phase,
            tau_a,
            tau_b,
            fock,
        } => {
            kv(out, "visibility", num(multiphoton_visibility(mu_e, mu_l)?))?;
            kv(
                out,
                "coincidence",
                num(multiphoton_coincidence(mu_e, mu_l, tau_a, tau_b, phase)?),
            )?;
            if let Some(n) = fock {
                let f = fock_coincidence_oracle(mu_e, mu_l, tau_a, tau_b, phase, n)?;
                kv(out, "fock_coincidence", num(f.probability))?;
                kv(out, "fock_truncation_loss", num(f.truncation_loss))?;
            }
            Ok(())
        }
        CalcCommand::Ports {
            x,
            kappa_a,
            kappa_b,
            eps_a,
            eps_b,
        } => {
            let v = port_visibilities(x, kappa_a, kappa_b, eps_a, eps_b)?;
            for (label, val) in ["a1b1", "a1b2", "a2b1", "a2b2"].iter().zip(v) {
                kv(out, &format!("visibility_{label}"), num(val))?;
            }
            Ok(())
        }
        CalcCommand::SourcePort { port, t, alpha, beta } => {
            kv(out, "mu_ratio", num(source_port_mu_ratio(port, t, alpha, beta)?))
        }
        CalcCommand::Scaling {
            c,
            r_a,
            r_b,
            two_branch,
        } => {
            let mode = if two_branch {
                ScalingMode::TwoBranchesFromMin
            } else {
                ScalingMode::AllPorts
            };
            kv(
                out,
                "scaled",
                num(rates::full_wavefunction_scaling(c, PortRatios { r_a, r_b }, mode)?),
            )
        }
        CalcCommand::G2 {
            s_i,
            eta_i,
            rep_rate_hz,
            mu,
        } => {
            kv(out, "g2", num(heralded_g2(s_i, eta_i, rep_rate_hz)?))?;
            if let Some(m) = mu {
                kv(out, "g2_per_mu", num(heralded_g2_slope(s_i, eta_i, rep_rate_hz, m)?))?;
            }
            Ok(())
        }
        CalcCommand::Efficiency { rate, rate_3db, eta0 } => kv(
            out,
            "efficiency",
            num(detector_efficiency(rate, &SaturationSpec { eta0, rate_3db })?),
        ),
    }
}

fn cmd_extrapolate(a: ExtrapolateArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(a.mu_min > 0.0 && a.mu_max > a.mu_min) || a.points < 2 {
        return Err(CliError::Usage("need 0 < --mu-min < --mu-max and --points >= 2".into()));
    }
    let mut grid = math::linspace(a.mu_min, a.mu_max, a.points);
    if !grid.contains(&a.mu0) {
        grid.push(a.mu0);
        grid.sort_by(f64::total_cmp);
    }
    let baseline = RateMetrics {
        mu: a.mu0,
        c_ab: a.c_ab,
        c_n: a.c_ab * a.e_n.max(0.0),
        c_i: a.c_ab * a.e_i.max(0.0),
        skr: secret_key_rate(
            a.c_ab,
            a.visibility.clamp(0.0, 1.0),
            rates::DEFAULT_SIFT_Q,
            rates::DEFAULT_F_EC,
        )?,
    };
    let slopes = QualitySlopes {
        e_n: a.slope_e_n,
        e_i: a.slope_e_i,
        secret: SecretLaw::FromVisibility {
            v0: a.visibility - a.slope_visibility * a.mu0,
            slope: a.slope_visibility,
            q: rates::DEFAULT_SIFT_Q,
            f_ec: rates::DEFAULT_F_EC,
        },
    };
    let sat = (a.rate_3db > 0.0).then_some(SaturationSpec {
        eta0: 1.0,
        rate_3db: a.rate_3db,
    });
    let t = extrapolate_metrics(&baseline, (a.s_a, a.s_b), &slopes, sat.as_ref(), a.channels, &grid)?;
    kv(out, "argmax_c_ab", num(t.argmax.c_ab))?;
    kv(out, "argmax_c_n", num(t.argmax.c_n))?;
    kv(out, "argmax_c_i", num(t.argmax.c_i))?;
    kv(out, "argmax_skr", num(t.argmax.skr))?;
    if let Some(p) = &a.out {
        let prov = args_provenance(
            &[
                "extrapolate".into(),
                num(a.mu0),
                num(a.c_ab),
                num(a.s_a),
                num(a.s_b),
                num(a.e_n),
                num(a.e_i),
                num(a.visibility),
                num(a.slope_e_n),
                num(a.slope_e_i),
                num(a.slope_visibility),
                num(a.rate_3db),
                a.channels.to_string(),
            ],
            None,
        );
        formats::write_text(p, &pipeline::extrapolation_table_csv(&prov, &[], &t))?;
    }
    Ok(())
}

fn cmd_run(a: RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::parse(&formats::read_text(&a.config)?)?;
    let report = pipeline::run_pipeline(&cfg, a.jobs)?;
    kv(out, "out_dir", cfg.out_dir.display())?;
    kv(out, "delta", num(report.delta))?;
    for p in &report.points {
        writeln!(
            out,
            "mu = {} v_raw_pct = {:.3} +- {:.3} v_c_pct = {:.3} c_ab_hz = {:.1} e_n = {:.4} e_i = {:.4} skr_hz = {:.1}",
            num(p.mu),
            p.v_raw,
            p.v_raw_err,
            p.v_c,
            p.c_ab,
            p.e_n,
            p.e_i,
            p.skr
        )
        .map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))?;
    }
    if let Some(x) = &report.extrapolation {
        let m = &x.table.argmax;
        kv(out, "argmax_c_i", num(m.c_i))?;
        kv(out, "argmax_skr", num(m.skr))?;
        kv(out, "argmax_c_n", num(m.c_n))?;
        kv(out, "argmax_c_ab", num(m.c_ab))?;
    }
    Ok(())
}
