//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pairsim_core::optics::{CrystalSpec, FilterSpec, JsiModel, PumpSpec};
use pairsim_core::rates::{InterferometerSpec, SaturationSpec};
use pairsim_core::sim::{DetectorModel, SourceScenario, WalkCurve, DELAY_PS};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Every accepted key, its default (`None` = required) and meaning.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("seed", None, "64-bit master seed"),
    ("out_dir", None, "output directory"),
    ("duration_s", None, "stream length per phase setting, s"),
    ("mu", None, "comma-separated mean pair numbers per cycle"),
    ("rep_rate_hz", Some("4.09e9"), "clock repetition rate"),
    ("delta", Some("0.393"), "geometric factor, or `model` to compute it"),
    ("eta_a", Some("0.2"), "Alice detection efficiency"),
    ("eta_b", Some("0.2"), "Bob detection efficiency"),
    (
        "imbalance_source",
        Some("1.13"),
        "source interferometer short/long power ratio",
    ),
    (
        "imbalance_alice",
        Some("1.24"),
        "Alice interferometer short/long power ratio",
    ),
    (
        "imbalance_bob",
        Some("1.15"),
        "Bob interferometer short/long power ratio",
    ),
    (
        "phase_visibility",
        Some("1"),
        "two-photon coherence of the middle-middle term",
    ),
    ("jitter_ps", Some("13"), "detector timing jitter FWHM, ps"),
    (
        "walk_amplitude_ps",
        Some("0"),
        "injected walk d(t') = A exp(-t'/tau), ps",
    ),
    ("walk_tau_ps", Some("5e4"), "injected walk decay constant, ps"),
    (
        "rate_3db_hz",
        Some("15.5e6"),
        "detector 3 dB count rate; 0 disables saturation",
    ),
    ("dead_time_ps", Some("0"), "detector dead time, ps"),
    ("window_ps", Some("100"), "coincidence window, ps"),
    ("guard_ps", Some("10"), "guard width at each bin boundary, ps"),
    ("walk_correction", Some("auto"), "auto | on | off"),
    (
        "dead_time_filter_ps",
        Some("0"),
        "software dead-time filter before pairing; 0 = off",
    ),
    (
        "hist_bin_ps",
        Some("1"),
        "clock-phase column width of the walk histogram, ps",
    ),
    ("crystal_length_m", Some("0.01"), "crystal length"),
    ("poling_period_m", Some("18.3e-6"), "poling period"),
    ("temperature_c", Some("229"), "phase-matching temperature"),
    ("pump_center_nm", Some("769.78"), "pump center wavelength"),
    ("pump_fwhm_ghz", Some("243"), "pump intensity FWHM"),
    ("filter_fwhm_ghz", Some("82"), "DWDM passband FWHM"),
    ("filter_order", Some("3"), "super-Gaussian order"),
    ("alice_channel", Some("38"), "Alice ITU channel used for delta = model"),
    ("bob_channel", Some("56"), "Bob ITU channel used for delta = model"),
    (
        "channel_count",
        Some("8"),
        "channel pairs multiplied into extrapolated totals",
    ),
    (
        "extrapolate_mu_max",
        Some("0.03"),
        "upper end of the extrapolation grid",
    ),
    ("extrapolate_points", Some("600"), "extrapolation grid size"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkMode {
    /// Calibrate; fall back to no correction when the data are too sparse.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaSetting {
    Value(f64),
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub duration_s: f64,
    pub mu: Vec<f64>,
    pub rep_rate_hz: f64,
    pub delta: DeltaSetting,
    pub eta_a: f64,
    pub eta_b: f64,
    pub imbalance_source: f64,
    pub imbalance_alice: f64,
    pub imbalance_bob: f64,
    pub phase_visibility: f64,
    pub jitter_ps: f64,
    pub walk_amplitude_ps: f64,
    pub walk_tau_ps: f64,
    pub rate_3db_hz: f64,
    pub dead_time_ps: f64,
    pub window_ps: f64,
    pub guard_ps: f64,
    pub walk_correction: WalkMode,
    pub dead_time_filter_ps: u64,
    pub hist_bin_ps: f64,
    pub crystal_length_m: f64,
    pub poling_period_m: f64,
    pub temperature_c: f64,
    pub pump_center_nm: f64,
    pub pump_fwhm_ghz: f64,
    pub filter_fwhm_ghz: f64,
    pub filter_order: u32,
    pub alice_channel: i32,
    pub bob_channel: i32,
    pub channel_count: usize,
    pub extrapolate_mu_max: f64,
    pub extrapolate_points: usize,
    /// Canonical `key = value` listing of every resolved key.
    pub canonical: String,
}

/// Parses a float; Rust's parser already accepts `1e-3` style input.
pub fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    let x: f64 = v
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: `{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(CliError::Usage(format!("{key}: `{v}` is not finite")));
    }
    Ok(x)
}

/// Parses a nonnegative integer, accepting scientific notation such as
/// `1e6` when the value is integral.
pub fn parse_u64(key: &str, v: &str) -> CliResult<u64> {
    let v = v.trim();
    if let Ok(n) = v.parse::<u64>() {
        return Ok(n);
    }
    let x = parse_f64(key, v)?;
    if x < 0.0 || x.fract() != 0.0 || x >= u64::MAX as f64 {
        return Err(CliError::Usage(format!("{key}: `{v}` is not a nonnegative integer")));
    }
    Ok(x as u64)
}

pub fn parse_i64(key: &str, v: &str) -> CliResult<i64> {
    let v = v.trim();
    if let Ok(n) = v.parse::<i64>() {
        return Ok(n);
    }
    let x = parse_f64(key, v)?;
    if x.fract() != 0.0 || x.abs() >= i64::MAX as f64 {
        return Err(CliError::Usage(format!("{key}: `{v}` is not an integer")));
    }
    Ok(x as i64)
}

/// Key/value pairs with comments stripped. Rejects malformed lines,
/// duplicates and unknown keys.
pub fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let n = k + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {n}: expected `key = value`")))?;
        let key = key.trim();
        if !KEYS.iter().any(|(name, _, _)| *name == key) {
            return Err(CliError::Usage(format!("line {n}: unknown key `{key}`")));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("line {n}: duplicate key `{key}`")));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let given = parse_pairs(text)?;
        let mut resolved = BTreeMap::new();
        for (key, default, _) in KEYS {
            let v = match (given.get(*key), default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.to_string(),
                (None, None) => return Err(CliError::Usage(format!("missing required key `{key}`"))),
            };
            resolved.insert(*key, v);
        }
        let s = |k: &str| resolved[k].as_str();
        let f = |k: &str| parse_f64(k, s(k));
        let u = |k: &str| parse_u64(k, s(k));
        let mu = s("mu")
            .split(',')
            .map(|v| parse_f64("mu", v))
            .collect::<CliResult<Vec<f64>>>()?;
        if mu.is_empty() || mu.iter().any(|&m| !(m > 0.0 && m <= 0.5)) {
            return Err(CliError::Usage("mu: values must lie in (0, 0.5]".into()));
        }
        let delta = match s("delta") {
            "model" => DeltaSetting::Model,
            v => DeltaSetting::Value(parse_f64("delta", v)?),
        };
        let walk_correction = match s("walk_correction") {
            "auto" => WalkMode::Auto,
            "on" => WalkMode::On,
            "off" => WalkMode::Off,
            v => {
                return Err(CliError::Usage(format!(
                    "walk_correction: `{v}` is not auto, on or off"
                )))
            }
        };
        let out_dir = PathBuf::from(s("out_dir"));
        if s("out_dir").is_empty() {
            return Err(CliError::Usage("out_dir: empty path".into()));
        }
        let canonical: String = resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let cfg = Self {
            seed: u("seed")?,
            out_dir,
            duration_s: f("duration_s")?,
            mu,
            rep_rate_hz: f("rep_rate_hz")?,
            delta,
            eta_a: f("eta_a")?,
            eta_b: f("eta_b")?,
            imbalance_source: f("imbalance_source")?,
            imbalance_alice: f("imbalance_alice")?,
            imbalance_bob: f("imbalance_bob")?,
            phase_visibility: f("phase_visibility")?,
            jitter_ps: f("jitter_ps")?,
            walk_amplitude_ps: f("walk_amplitude_ps")?,
            walk_tau_ps: f("walk_tau_ps")?,
            rate_3db_hz: f("rate_3db_hz")?,
            dead_time_ps: f("dead_time_ps")?,
            window_ps: f("window_ps")?,
            guard_ps: f("guard_ps")?,
            walk_correction,
            dead_time_filter_ps: u("dead_time_filter_ps")?,
            hist_bin_ps: f("hist_bin_ps")?,
            crystal_length_m: f("crystal_length_m")?,
            poling_period_m: f("poling_period_m")?,
            temperature_c: f("temperature_c")?,
            pump_center_nm: f("pump_center_nm")?,
            pump_fwhm_ghz: f("pump_fwhm_ghz")?,
            filter_fwhm_ghz: f("filter_fwhm_ghz")?,
            filter_order: u32::try_from(u("filter_order")?)
                .map_err(|_| CliError::Usage("filter_order: too large".into()))?,
            alice_channel: parse_i64("alice_channel", s("alice_channel"))? as i32,
            bob_channel: parse_i64("bob_channel", s("bob_channel"))? as i32,
            channel_count: u("channel_count")? as usize,
            extrapolate_mu_max: f("extrapolate_mu_max")?,
            extrapolate_points: u("extrapolate_points")? as usize,
            canonical,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be > 0");
        }
        if self.window_ps < 0.0 || self.guard_ps < 0.0 {
            return bad("window_ps and guard_ps must be >= 0");
        }
        if !(self.hist_bin_ps > 0.0) {
            return bad("hist_bin_ps must be > 0");
        }
        if self.rate_3db_hz < 0.0 {
            return bad("rate_3db_hz must be >= 0");
        }
        if self.extrapolate_points < 2 {
            return bad("extrapolate_points must be >= 2");
        }
        for (k, v) in [
            ("imbalance_source", self.imbalance_source),
            ("imbalance_alice", self.imbalance_alice),
            ("imbalance_bob", self.imbalance_bob),
        ] {
            if !(v >= 1.0) {
                return Err(CliError::Usage(format!("{k} must be >= 1")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical listing, hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn jsi_model(&self) -> JsiModel {
        JsiModel {
            crystal: CrystalSpec {
                length_m: self.crystal_length_m,
                poling_period_m: self.poling_period_m,
                temperature_c: self.temperature_c,
                ..CrystalSpec::reference()
            },
            pump: PumpSpec::from_fwhm(self.pump_center_nm, self.pump_fwhm_ghz * 1e9),
            brightness: 1.0,
        }
    }

    /// `(signal, idler)` passbands of the configured channel pair.
    pub fn filters(&self) -> (FilterSpec, FilterSpec) {
        let f = |ch| FilterSpec::itu(ch, self.filter_fwhm_ghz * 1e9, self.filter_order, 1.0);
        (f(self.bob_channel), f(self.alice_channel))
    }

    pub fn scenario(&self, mu: f64, delta: f64, seed: u64) -> SourceScenario {
        let ifo = |ratio: f64| InterferometerSpec {
            beta: 1.0 / ratio,
            ..InterferometerSpec::balanced(DELAY_PS)
        };
        SourceScenario {
            rep_rate_hz: self.rep_rate_hz,
            mu,
            delta,
            eta_a: self.eta_a,
            eta_b: self.eta_b,
            source: ifo(self.imbalance_source),
            alice: ifo(self.imbalance_alice),
            bob: ifo(self.imbalance_bob),
            phase_visibility: self.phase_visibility,
            duration_s: self.duration_s,
            seed,
        }
    }

    pub fn saturation(&self) -> Option<SaturationSpec> {
        (self.rate_3db_hz > 0.0).then_some(SaturationSpec {
            eta0: 1.0,
            rate_3db: self.rate_3db_hz,
        })
    }

    pub fn detector(&self) -> DetectorModel {
        DetectorModel {
            jitter_fwhm_ps: self.jitter_ps,
            walk: if self.walk_amplitude_ps == 0.0 {
                WalkCurve::None
            } else {
                WalkCurve::Exponential {
                    amplitude_ps: self.walk_amplitude_ps,
                    tau_ps: self.walk_tau_ps,
                }
            },
            saturation: self.saturation(),
            dead_time_ps: self.dead_time_ps,
        }
    }
}

impl Default for RunConfig {
    /// Every default, with seed 0, `out_dir = out`, 0.1 s and mu = 5e-3.
    fn default() -> Self {
        RunConfig::parse("seed = 0\nout_dir = out\nduration_s = 0.1\nmu = 5e-3\n").expect("defaults parse")
    }
}

/// Seed for a named stage, derived from the master seed.
pub fn substream(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
