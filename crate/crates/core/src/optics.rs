//! Joint spectral intensity of the SPDC source, DWDM filter passbands, the
//! rate integrals built on them, Schmidt decomposition and rate-matrix
//! fitting.
//!
//! Wavelengths are vacuum wavelengths in nm; frequencies are ordinary
//! frequencies in Hz. Alice receives the idler (ITU channels around 1550 nm),
//! Bob the signal (around 1530 nm).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{bail, Error, Result};
use crate::math::{self, PI};
use crate::optimize::{nelder_mead, NelderMeadOptions};

pub const C_LIGHT: f64 = 299_792_458.0;

/// Center frequency of an ITU grid channel on the 100 GHz grid.
pub fn itu_frequency_hz(channel: i32) -> f64 {
    190e12 + channel as f64 * 100e9
}

pub fn nm_to_hz(nm: f64) -> f64 {
    C_LIGHT / (nm * 1e-9)
}

pub fn hz_to_nm(hz: f64) -> f64 {
    C_LIGHT / hz * 1e9
}

/// Temperature-dependent extraordinary Sellmeier coefficients
/// (`lambda` in um, `T` in degrees C).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sellmeier {
    pub a: [f64; 6],
    pub b: [f64; 4],
}

impl Sellmeier {
    /// 5 mol% MgO-doped congruent lithium niobate, extraordinary ray.
    pub const MGO_CLN_5: Sellmeier = Sellmeier {
        a: [5.756, 0.0983, 0.2020, 189.32, 12.52, 1.32e-2],
        b: [2.860e-6, 4.700e-8, 6.113e-8, 1.516e-4],
    };

    /// Ten numbers in the order a1..a6, b1..b4.
    pub fn from_slice(c: &[f64]) -> Result<Self> {
        if c.len() != 10 {
            bail!(Config, "expected 10 Sellmeier coefficients, got {}", c.len());
        }
        let mut a = [0.0; 6];
        let mut b = [0.0; 4];
        a.copy_from_slice(&c[..6]);
        b.copy_from_slice(&c[6..]);
        Ok(Self { a, b })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.a.iter().chain(self.b.iter()).copied().collect()
    }

    fn at(&self, temp_c: f64) -> IndexCurve {
        let f = (temp_c - 24.5) * (temp_c + 570.82);
        let [a1, a2, a3, a4, a5, a6] = self.a;
        let [b1, b2, b3, b4] = self.b;
        let d1 = a3 + b3 * f;
        IndexCurve {
            c0: a1 + b1 * f,
            c1: a2 + b2 * f,
            d1: d1 * d1,
            c2: a4 + b4 * f,
            d2: a5 * a5,
            a6,
        }
    }
}

/// Sellmeier evaluated at a fixed temperature.
#[derive(Debug, Clone, Copy)]
struct IndexCurve {
    c0: f64,
    c1: f64,
    d1: f64,
    c2: f64,
    d2: f64,
    a6: f64,
}

impl IndexCurve {
    #[inline]
    fn n(&self, lambda_nm: f64) -> f64 {
        let l = lambda_nm * 1e-3;
        let l2 = l * l;
        math::sqrt(self.c0 + self.c1 / (l2 - self.d1) + self.c2 / (l2 - self.d2) - self.a6 * l2)
    }

    /// `n/lambda` in 1/m.
    #[inline]
    fn k(&self, lambda_nm: f64) -> f64 {
        self.n(lambda_nm) / (lambda_nm * 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrystalSpec {
    pub length_m: f64,
    pub poling_period_m: f64,
    pub temperature_c: f64,
    pub sellmeier: Sellmeier,
}

impl CrystalSpec {
    /// Accepted range for the phase-matching temperature. It is a fit proxy
    /// for doping, so it is wider than a physical operating range.
    pub const TEMPERATURE_RANGE_C: (f64, f64) = (0.0, 300.0);

    pub fn new(length_m: f64, poling_period_m: f64, temperature_c: f64) -> Result<Self> {
        let c = Self {
            length_m,
            poling_period_m,
            temperature_c,
            sellmeier: Sellmeier::MGO_CLN_5,
        };
        c.validate()?;
        Ok(c)
    }

    /// 1 cm waveguide, 18.3 um poling, temperature placed at the 1540 nm
    /// degenerate phase-matching peak.
    pub fn reference() -> Self {
        Self {
            length_m: 0.01,
            poling_period_m: 18.3e-6,
            temperature_c: 229.0,
            sellmeier: Sellmeier::MGO_CLN_5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_m > 0.0) {
            bail!(Config, "crystal length must be > 0");
        }
        if !(self.poling_period_m > 0.0) {
            bail!(Config, "poling period must be > 0");
        }
        let (lo, hi) = Self::TEMPERATURE_RANGE_C;
        if !(self.temperature_c >= lo && self.temperature_c <= hi) {
            bail!(Config, "temperature {} C outside [{lo}, {hi}] C", self.temperature_c);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpSpec {
    pub center_nm: f64,
    /// Gaussian width parameter of the pump intensity envelope,
    /// `exp(-(df/sigma)^2)`.
    pub sigma_hz: f64,
}

impl PumpSpec {
    pub fn from_fwhm(center_nm: f64, fwhm_hz: f64) -> Self {
        Self {
            center_nm,
            sigma_hz: fwhm_hz / (2.0 * math::sqrt(math::LN_2)),
        }
    }

    /// 769.78 nm, 243 GHz FWHM.
    pub fn reference() -> Self {
        Self::from_fwhm(769.78, 243e9)
    }

    pub fn fwhm_hz(&self) -> f64 {
        self.sigma_hz * 2.0 * math::sqrt(math::LN_2)
    }

    pub fn center_hz(&self) -> f64 {
        nm_to_hz(self.center_nm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_nm > 700.0 && self.center_nm < 800.0) {
            bail!(Config, "pump center {} nm outside (700, 800) nm", self.center_nm);
        }
        if !(self.sigma_hz > 0.0) {
            bail!(Config, "pump bandwidth must be > 0");
        }
        Ok(())
    }
}

fn check_wavelength(lambda_nm: f64) -> Result<()> {
    if !(lambda_nm > 300.0 && lambda_nm < 5000.0) {
        bail!(Domain, "wavelength {lambda_nm} nm outside (300, 5000) nm");
    }
    Ok(())
}

/// Extraordinary refractive index at `lambda_nm`.
pub fn refractive_index(lambda_nm: f64, crystal: &CrystalSpec) -> Result<f64> {
    check_wavelength(lambda_nm)?;
    Ok(crystal.sellmeier.at(crystal.temperature_c).n(lambda_nm))
}

/// Quasi-phase-matched wave-vector mismatch in rad/m, with the pump
/// wavelength fixed by `1/lp = 1/ls + 1/li`.
pub fn phase_mismatch(ls_nm: f64, li_nm: f64, crystal: &CrystalSpec) -> Result<f64> {
    check_wavelength(ls_nm)?;
    check_wavelength(li_nm)?;
    let lp = 1.0 / (1.0 / ls_nm + 1.0 / li_nm);
    check_wavelength(lp)?;
    let curve = crystal.sellmeier.at(crystal.temperature_c);
    Ok(mismatch(&curve, ls_nm, li_nm, crystal.poling_period_m))
}

#[inline]
fn mismatch(curve: &IndexCurve, ls: f64, li: f64, period_m: f64) -> f64 {
    let lp = 1.0 / (1.0 / ls + 1.0 / li);
    2.0 * PI * (curve.k(lp) - curve.k(ls) - curve.k(li) - 1.0 / period_m)
}

/// Source model: crystal, pump and an overall pair-rate scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsiModel {
    pub crystal: CrystalSpec,
    pub pump: PumpSpec,
    /// Peak JSI value in pairs per nm^2 per second.
    pub brightness: f64,
}

impl JsiModel {
    pub fn reference() -> Self {
        Self {
            crystal: CrystalSpec::reference(),
            pump: PumpSpec::reference(),
            brightness: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.crystal.validate()?;
        self.pump.validate()?;
        if !(self.brightness >= 0.0) {
            bail!(Config, "brightness must be >= 0");
        }
        Ok(())
    }

    pub fn intensity(&self, ls_nm: f64, li_nm: f64) -> Result<f64> {
        let dk = phase_mismatch(ls_nm, li_nm, &self.crystal)?;
        Ok(self.brightness * self.envelope(dk, nm_to_hz(ls_nm) + nm_to_hz(li_nm)))
    }

    #[inline]
    fn envelope(&self, dk: f64, fs_plus_fi: f64) -> f64 {
        let s = math::sinc(dk * self.crystal.length_m / 2.0);
        let d = (self.pump.center_hz() - fs_plus_fi) / self.pump.sigma_hz;
        s * s * math::exp(-d * d)
    }
}

/// `sinc^2(dk L/2) * exp(-(fp - fs - fi)^2/sigma^2) * brightness`.
pub fn jsi_intensity(ls_nm: f64, li_nm: f64, crystal: &CrystalSpec, pump: &PumpSpec, brightness: f64) -> Result<f64> {
    JsiModel {
        crystal: *crystal,
        pump: *pump,
        brightness,
    }
    .intensity(ls_nm, li_nm)
}

/// JSI sampled on uniform wavelength axes. `intensity[s * n_idler + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JsiGrid {
    pub signal_nm: Vec<f64>,
    pub idler_nm: Vec<f64>,
    pub intensity: Vec<f64>,
}

pub const MIN_GRID_POINTS: usize = 64;

impl JsiGrid {
    pub fn build(
        model: &JsiModel,
        signal_range_nm: (f64, f64),
        n_signal: usize,
        idler_range_nm: (f64, f64),
        n_idler: usize,
    ) -> Result<Self> {
        if n_signal < MIN_GRID_POINTS || n_idler < MIN_GRID_POINTS {
            bail!(
                Config,
                "grid resolution {n_signal}x{n_idler} below minimum {MIN_GRID_POINTS}"
            );
        }
        for &(lo, hi) in &[signal_range_nm, idler_range_nm] {
            if !(hi > lo) {
                bail!(Config, "grid range must be increasing");
            }
            check_wavelength(lo)?;
            check_wavelength(hi)?;
        }
        model.validate()?;
        let signal_nm = math::linspace(signal_range_nm.0, signal_range_nm.1, n_signal);
        let idler_nm = math::linspace(idler_range_nm.0, idler_range_nm.1, n_idler);
        let curve = model.crystal.sellmeier.at(model.crystal.temperature_c);
        let ks: Vec<f64> = signal_nm.iter().map(|&l| curve.k(l)).collect();
        let ki: Vec<f64> = idler_nm.iter().map(|&l| curve.k(l)).collect();
        let fs: Vec<f64> = signal_nm.iter().map(|&l| nm_to_hz(l)).collect();
        let fi: Vec<f64> = idler_nm.iter().map(|&l| nm_to_hz(l)).collect();
        let gamma = 1.0 / model.crystal.poling_period_m;
        let mut intensity = Vec::with_capacity(n_signal * n_idler);
        for (s, &ls) in signal_nm.iter().enumerate() {
            for (i, &li) in idler_nm.iter().enumerate() {
                let lp = 1.0 / (1.0 / ls + 1.0 / li);
                let dk = 2.0 * PI * (curve.k(lp) - ks[s] - ki[i] - gamma);
                intensity.push(model.brightness * model.envelope(dk, fs[s] + fi[i]));
            }
        }
        Ok(Self {
            signal_nm,
            idler_nm,
            intensity,
        })
    }

    #[inline]
    pub fn at(&self, s: usize, i: usize) -> f64 {
        self.intensity[s * self.idler_nm.len() + i]
    }

    pub fn validate(&self) -> Result<()> {
        let inc = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !inc(&self.signal_nm) || !inc(&self.idler_nm) {
            bail!(Config, "grid axes must be strictly increasing");
        }
        if self.intensity.len() != self.signal_nm.len() * self.idler_nm.len() {
            bail!(Config, "grid body does not match axis lengths");
        }
        if self.intensity.iter().any(|v| !(*v >= 0.0)) {
            bail!(Config, "grid intensity must be nonnegative");
        }
        Ok(())
    }

    fn axis(&self, arm: Arm) -> &[f64] {
        match arm {
            Arm::Signal => &self.signal_nm,
            Arm::Idler => &self.idler_nm,
        }
    }

    /// Trapezoid sum of `ws(s) * wi(i) * J(s, i)`.
    fn weighted_sum(&self, ws: &[f64], wi: &[f64]) -> f64 {
        let ts = math::trapezoid_weights(&self.signal_nm);
        let ti = math::trapezoid_weights(&self.idler_nm);
        let ni = self.idler_nm.len();
        let col: Vec<f64> = ti.iter().zip(wi).map(|(a, b)| a * b).collect();
        let mut total = 0.0;
        for s in 0..self.signal_nm.len() {
            let row = &self.intensity[s * ni..(s + 1) * ni];
            let r: f64 = row.iter().zip(&col).map(|(a, b)| a * b).sum();
            total += ts[s] * ws[s] * r;
        }
        total
    }
}

/// Uniform grid over the given ranges with equal resolution on both axes.
pub fn build_jsi_grid(
    model: &JsiModel,
    signal_range_nm: (f64, f64),
    idler_range_nm: (f64, f64),
    resolution: usize,
) -> Result<JsiGrid> {
    JsiGrid::build(model, signal_range_nm, resolution, idler_range_nm, resolution)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    /// Bob's photon, around 1530 nm.
    Signal,
    /// Alice's photon, around 1550 nm.
    Idler,
}

impl Arm {
    pub fn other(self) -> Arm {
        match self {
            Arm::Signal => Arm::Idler,
            Arm::Idler => Arm::Signal,
        }
    }
}

/// DWDM channel passband.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub itu_channel: Option<i32>,
    pub center_hz: f64,
    pub fwhm_hz: f64,
    pub order_m: u32,
    pub eta: f64,
    /// Measured `(frequency Hz, transmission)` samples sorted by frequency.
    /// Overrides the super-Gaussian shape; rescaled to unit peak.
    pub measured_curve: Option<Vec<(f64, f64)>>,
}

impl FilterSpec {
    pub const DEFAULT_FWHM_HZ: f64 = 82e9;
    pub const DEFAULT_ORDER: u32 = 3;

    pub fn super_gaussian(center_hz: f64, fwhm_hz: f64, order_m: u32, eta: f64) -> Self {
        Self {
            itu_channel: None,
            center_hz,
            fwhm_hz,
            order_m,
            eta,
            measured_curve: None,
        }
    }

    pub fn itu(channel: i32, fwhm_hz: f64, order_m: u32, eta: f64) -> Self {
        Self {
            itu_channel: Some(channel),
            ..Self::super_gaussian(itu_frequency_hz(channel), fwhm_hz, order_m, eta)
        }
    }

    /// Default 82 GHz, order 3, unit peak passband on an ITU channel.
    pub fn dwdm(channel: i32) -> Self {
        Self::itu(channel, Self::DEFAULT_FWHM_HZ, Self::DEFAULT_ORDER, 1.0)
    }

    pub fn measured(curve: Vec<(f64, f64)>, eta: f64) -> Result<Self> {
        if curve.len() < 2 {
            bail!(Config, "measured curve needs at least 2 samples");
        }
        if !curve.windows(2).all(|w| w[1].0 > w[0].0) {
            bail!(Config, "measured curve frequencies must be strictly increasing");
        }
        if curve.iter().any(|&(_, t)| !(0.0..=1.0).contains(&t)) {
            bail!(Config, "measured transmission outside [0, 1]");
        }
        let peak = curve.iter().fold(f64::MIN, |m, &(_, t)| m.max(t));
        if !(peak > 0.0) {
            bail!(Degenerate, "measured curve is identically zero");
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &(f, t) in &curve {
            num += f * t;
            den += t;
        }
        let above: Vec<f64> = curve
            .iter()
            .filter(|&&(_, t)| t >= 0.5 * peak)
            .map(|&(f, _)| f)
            .collect();
        let fwhm = above.last().unwrap() - above.first().unwrap();
        Ok(Self {
            itu_channel: None,
            center_hz: num / den,
            fwhm_hz: fwhm.max(f64::MIN_POSITIVE),
            order_m: Self::DEFAULT_ORDER,
            eta,
            measured_curve: Some(curve),
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            bail!(Config, "peak transmission {} outside [0, 1]", self.eta);
        }
        if !(self.fwhm_hz > 0.0) {
            bail!(Config, "filter FWHM must be > 0");
        }
        if self.order_m == 0 {
            bail!(Config, "super-Gaussian order must be >= 1");
        }
        Ok(())
    }

    fn sigma_hz(&self) -> f64 {
        let m = self.order_m as f64;
        (self.fwhm_hz / 2.0) / math::powf(math::LN_2, 1.0 / (2.0 * m))
    }

    /// Unit-peak passband shape `W(f)`.
    pub fn shape(&self, f_hz: f64) -> f64 {
        match &self.measured_curve {
            Some(curve) => {
                let peak = curve.iter().fold(0.0f64, |m, &(_, t)| m.max(t));
                let xs: Vec<f64> = curve.iter().map(|c| c.0).collect();
                let ys: Vec<f64> = curve.iter().map(|c| c.1).collect();
                math::interp(&xs, &ys, f_hz).map_or(0.0, |t| t / peak)
            }
            None => {
                let x = ((f_hz - self.center_hz) / self.sigma_hz()).abs();
                math::exp(-math::powf(x, 2.0 * self.order_m as f64))
            }
        }
    }

    /// Power transmission `eta * W(f)`.
    pub fn transmission(&self, f_hz: f64) -> f64 {
        self.eta * self.shape(f_hz)
    }

    /// Frequency window holding the passband: the measured sample range, or
    /// `center +- margin * FWHM`.
    pub fn window_hz(&self, margin_fwhm: f64) -> (f64, f64) {
        match &self.measured_curve {
            Some(c) => (c[0].0, c[c.len() - 1].0),
            None => (
                self.center_hz - margin_fwhm * self.fwhm_hz,
                self.center_hz + margin_fwhm * self.fwhm_hz,
            ),
        }
    }

    fn samples(&self, axis_nm: &[f64], unit_peak: bool) -> Vec<f64> {
        axis_nm
            .iter()
            .map(|&l| {
                let f = nm_to_hz(l);
                if unit_peak {
                    self.shape(f)
                } else {
                    self.transmission(f)
                }
            })
            .collect()
    }
}

pub fn filter_transmission(f_hz: f64, filter: &FilterSpec) -> f64 {
    filter.transmission(f_hz)
}

/// Passband is clipped when the unit-peak shape is appreciable at an axis
/// end. A filter that is flat (above 0.99) across the whole axis acts as an
/// all-pass and is accepted.
fn check_coverage(filter: &FilterSpec, axis_nm: &[f64], what: &str) -> Result<()> {
    filter.validate()?;
    let w: Vec<f64> = filter.samples(axis_nm, true);
    let flat = w.iter().all(|&v| v >= 0.99);
    if flat {
        return Ok(());
    }
    let (a, b) = (w[0], w[w.len() - 1]);
    let (f_hi, f_lo) = (nm_to_hz(axis_nm[0]), nm_to_hz(axis_nm[axis_nm.len() - 1]));
    let inside = filter.center_hz > f_lo && filter.center_hz < f_hi;
    if a > 1e-6 || b > 1e-6 || !inside {
        bail!(
            Coverage,
            "{what} passband at {:.4} THz clipped by grid ({:.4}..{:.4} THz)",
            filter.center_hz * 1e-12,
            f_lo * 1e-12,
            f_hi * 1e-12
        );
    }
    Ok(())
}

/// `int int T_u(lambda_arm) |f|^2` over the grid, Hz.
pub fn singles_integral(filter: &FilterSpec, arm: Arm, grid: &JsiGrid) -> Result<f64> {
    check_coverage(filter, grid.axis(arm), "singles")?;
    let t = filter.samples(grid.axis(arm), false);
    let ones_s = alloc::vec![1.0; grid.signal_nm.len()];
    let ones_i = alloc::vec![1.0; grid.idler_nm.len()];
    Ok(match arm {
        Arm::Signal => grid.weighted_sum(&t, &ones_i),
        Arm::Idler => grid.weighted_sum(&ones_s, &t),
    })
}

/// `int int T_u(lambda_s) T_v(lambda_i) |f|^2`, Hz. `u` filters the signal
/// (Bob), `v` the idler (Alice).
pub fn coincidence_integral(u: &FilterSpec, v: &FilterSpec, grid: &JsiGrid) -> Result<f64> {
    check_coverage(u, &grid.signal_nm, "signal")?;
    check_coverage(v, &grid.idler_nm, "idler")?;
    Ok(grid.weighted_sum(&u.samples(&grid.signal_nm, false), &v.samples(&grid.idler_nm, false)))
}

/// Mean pair number per clock cycle inside the mutually transmitted region,
/// `(1/R) int int W_u W_v |f|^2`.
pub fn mu_integral(u: &FilterSpec, v: &FilterSpec, grid: &JsiGrid, rep_rate_hz: f64) -> Result<f64> {
    check_coverage(u, &grid.signal_nm, "signal")?;
    check_coverage(v, &grid.idler_nm, "idler")?;
    if !(rep_rate_hz > 0.0) {
        bail!(Config, "repetition rate must be > 0");
    }
    Ok(grid.weighted_sum(&u.samples(&grid.signal_nm, true), &v.samples(&grid.idler_nm, true)) / rep_rate_hz)
}

/// Geometric factor in both conditioning directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    /// Fraction of idler photons through `v` whose partner passes `u`.
    pub given_idler: f64,
    /// Fraction of signal photons through `u` whose partner passes `v`.
    pub given_signal: f64,
    pub mean: f64,
}

/// `int int W_u W_v |f|^2 / int int W_v |f|^2` and the transposed ratio, on a
/// single grid that must span both partner spectra.
pub fn delta_model(u: &FilterSpec, v: &FilterSpec, grid: &JsiGrid) -> Result<Delta> {
    check_coverage(u, &grid.signal_nm, "signal")?;
    check_coverage(v, &grid.idler_nm, "idler")?;
    let wu = u.samples(&grid.signal_nm, true);
    let wv = v.samples(&grid.idler_nm, true);
    let ones_s = alloc::vec![1.0; wu.len()];
    let ones_i = alloc::vec![1.0; wv.len()];
    let num = grid.weighted_sum(&wu, &wv);
    let den_v = grid.weighted_sum(&ones_s, &wv);
    let den_u = grid.weighted_sum(&wu, &ones_i);
    if !(den_v > 0.0) || !(den_u > 0.0) {
        bail!(Degenerate, "filtered JSI has zero flux");
    }
    Ok(Delta {
        given_idler: num / den_v,
        given_signal: num / den_u,
        mean: 0.5 * (num / den_v + num / den_u),
    })
}

/// How to turn the filtered JSI into Schmidt weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchmidtMode {
    /// Singular values `s_k` of the filtered intensity, `lambda_k = s_k / sum s`.
    #[default]
    Intensity,
    /// Singular values of `sqrt(filtered intensity)` (flat spectral phase),
    /// `lambda_k = s_k^2 / sum s^2`.
    Amplitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchmidtResult {
    /// Descending, summing to one.
    pub coefficients: Vec<f64>,
    pub schmidt_number: f64,
    pub inverse_k: f64,
}

/// Schmidt weights of an arbitrary nonnegative matrix.
pub fn schmidt_from_matrix(m: DMatrix<f64>, mode: SchmidtMode) -> Result<SchmidtResult> {
    if m.iter().all(|&v| v == 0.0) {
        bail!(Degenerate, "filtered grid is identically zero");
    }
    let m = match mode {
        SchmidtMode::Intensity => m,
        SchmidtMode::Amplitude => m.map(|v| math::sqrt(v.max(0.0))),
    };
    let sv = m.svd(false, false).singular_values;
    let mut w: Vec<f64> = match mode {
        SchmidtMode::Intensity => sv.iter().copied().collect(),
        SchmidtMode::Amplitude => sv.iter().map(|s| s * s).collect(),
    };
    w.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    let inverse_k: f64 = w.iter().map(|v| v * v).sum();
    Ok(SchmidtResult {
        coefficients: w,
        schmidt_number: 1.0 / inverse_k,
        inverse_k,
    })
}

/// Schmidt decomposition of `T_u(lambda_s) T_v(lambda_i) |f|^2`.
pub fn schmidt_decompose(u: &FilterSpec, v: &FilterSpec, grid: &JsiGrid, mode: SchmidtMode) -> Result<SchmidtResult> {
    check_coverage(u, &grid.signal_nm, "signal")?;
    check_coverage(v, &grid.idler_nm, "idler")?;
    let tu = u.samples(&grid.signal_nm, false);
    let tv = v.samples(&grid.idler_nm, false);
    let (ns, ni) = (tu.len(), tv.len());
    let m = DMatrix::from_fn(ns, ni, |s, i| tu[s] * tv[i] * grid.at(s, i));
    schmidt_from_matrix(m, mode)
}

/// Resolution and extent of the grids used by pair-level analyses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Points per axis of the coincidence window grid.
    pub pair_points: usize,
    /// Window half-width in units of the filter FWHM.
    pub margin_fwhm: f64,
    /// Points across a single filter window in singles/delta grids.
    pub filter_points: usize,
    /// Points across the partner axis in singles/delta grids.
    pub conjugate_points: usize,
    /// Half-width of the partner axis around the energy-conjugate frequency.
    pub conjugate_halfwidth_hz: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            pair_points: 512,
            margin_fwhm: 3.0,
            filter_points: 512,
            conjugate_points: 2048,
            conjugate_halfwidth_hz: 1.2e12,
        }
    }
}

impl GridSpec {
    /// Cheaper grids for iterative fitting.
    pub fn coarse() -> Self {
        Self {
            pair_points: 96,
            margin_fwhm: 3.0,
            filter_points: 64,
            conjugate_points: 512,
            conjugate_halfwidth_hz: 1.2e12,
        }
    }

    fn range_nm(lo_hz: f64, hi_hz: f64) -> (f64, f64) {
        (hz_to_nm(hi_hz), hz_to_nm(lo_hz))
    }

    /// Grid over the windows of a signal filter `u` and idler filter `v`.
    pub fn pair_grid(&self, model: &JsiModel, u: &FilterSpec, v: &FilterSpec) -> Result<JsiGrid> {
        let (ul, uh) = u.window_hz(self.margin_fwhm);
        let (vl, vh) = v.window_hz(self.margin_fwhm);
        JsiGrid::build(
            model,
            Self::range_nm(ul, uh),
            self.pair_points,
            Self::range_nm(vl, vh),
            self.pair_points,
        )
    }

    /// Grid narrow on `filter`'s arm and wide across the energy conjugate.
    pub fn singles_grid(&self, model: &JsiModel, filter: &FilterSpec, arm: Arm) -> Result<JsiGrid> {
        let (fl, fh) = filter.window_hz(self.margin_fwhm);
        let conj = model.pump.center_hz() - filter.center_hz;
        let narrow = Self::range_nm(fl, fh);
        let wide = Self::range_nm(conj - self.conjugate_halfwidth_hz, conj + self.conjugate_halfwidth_hz);
        match arm {
            Arm::Signal => JsiGrid::build(model, narrow, self.filter_points, wide, self.conjugate_points),
            Arm::Idler => JsiGrid::build(model, wide, self.conjugate_points, narrow, self.filter_points),
        }
    }
}

/// Geometric factor for a channel pair, each direction evaluated on a grid
/// that is wide across the conditioning partner.
pub fn delta_for_pair(model: &JsiModel, u: &FilterSpec, v: &FilterSpec, spec: &GridSpec) -> Result<Delta> {
    let g_idler = spec.singles_grid(model, v, Arm::Idler)?;
    let wide_u = u.clone();
    let d_idler = delta_on_conditioned_grid(&wide_u, v, &g_idler, Arm::Idler)?;
    let g_signal = spec.singles_grid(model, u, Arm::Signal)?;
    let d_signal = delta_on_conditioned_grid(u, v, &g_signal, Arm::Signal)?;
    Ok(Delta {
        given_idler: d_idler,
        given_signal: d_signal,
        mean: 0.5 * (d_idler + d_signal),
    })
}

fn delta_on_conditioned_grid(u: &FilterSpec, v: &FilterSpec, grid: &JsiGrid, given: Arm) -> Result<f64> {
    check_coverage(u, &grid.signal_nm, "signal")?;
    check_coverage(v, &grid.idler_nm, "idler")?;
    let wu = u.samples(&grid.signal_nm, true);
    let wv = v.samples(&grid.idler_nm, true);
    let num = grid.weighted_sum(&wu, &wv);
    let den = match given {
        Arm::Idler => grid.weighted_sum(&alloc::vec![1.0; wu.len()], &wv),
        Arm::Signal => grid.weighted_sum(&wu, &alloc::vec![1.0; wv.len()]),
    };
    if !(den > 0.0) {
        bail!(Degenerate, "filtered JSI has zero flux");
    }
    Ok(num / den)
}

/// Alice's ITU channels (idler) in the reference configuration.
pub const ALICE_CHANNELS: [i32; 8] = [35, 36, 37, 38, 39, 40, 41, 42];
/// Bob's ITU channels (signal) in the reference configuration.
pub const BOB_CHANNELS: [i32; 8] = [59, 58, 57, 56, 55, 54, 53, 52];

/// Energy-matched `(alice idler, bob signal)` channel pairs: frequencies sum
/// to 389.4 THz.
pub fn matched_pairs() -> Vec<(i32, i32)> {
    ALICE_CHANNELS.iter().copied().zip(BOB_CHANNELS).collect()
}

/// A channel on one arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Channel {
    pub arm: Arm,
    pub itu: i32,
}

impl Channel {
    pub fn alice(itu: i32) -> Self {
        Self { arm: Arm::Idler, itu }
    }
    pub fn bob(itu: i32) -> Self {
        Self { arm: Arm::Signal, itu }
    }
}

/// Measured singles and coincidence rates in the layout of a channel-pair
/// rate matrix. Coincidences are keyed `(alice itu, bob itu)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateData {
    pub singles: BTreeMap<Channel, f64>,
    pub coincidences: BTreeMap<(i32, i32), f64>,
}

impl RateData {
    pub fn len(&self) -> usize {
        self.singles.len() + self.coincidences.len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of the rate model `S_u = eta_u B I_u`,
/// `C_uv = eta_u eta_v B I_uv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub temperature_c: f64,
    pub pump_center_nm: f64,
    pub pump_sigma_hz: f64,
    pub etas: BTreeMap<Channel, f64>,
    pub brightness: f64,
    pub fixed: FixedFlags,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedFlags {
    pub temperature: bool,
    pub pump_center: bool,
    pub pump_sigma: bool,
    pub brightness: bool,
    pub etas: BTreeSet<Channel>,
}

impl FixedFlags {
    pub fn all(etas: impl IntoIterator<Item = Channel>) -> Self {
        Self {
            temperature: true,
            pump_center: true,
            pump_sigma: true,
            brightness: true,
            etas: etas.into_iter().collect(),
        }
    }
}

impl FitParams {
    pub fn floating_count(&self) -> usize {
        let f = &self.fixed;
        [!f.temperature, !f.pump_center, !f.pump_sigma, !f.brightness]
            .iter()
            .filter(|&&b| b)
            .count()
            + self.etas.keys().filter(|c| !f.etas.contains(c)).count()
    }

    fn model(&self, crystal: &CrystalSpec) -> JsiModel {
        JsiModel {
            crystal: CrystalSpec {
                temperature_c: self.temperature_c,
                ..*crystal
            },
            pump: PumpSpec {
                center_nm: self.pump_center_nm,
                sigma_hz: self.pump_sigma_hz,
            },
            brightness: 1.0,
        }
    }
}

/// Shape integrals (unit brightness, unit-peak filters) entering the rate
/// model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeIntegrals {
    pub singles: BTreeMap<Channel, f64>,
    pub coincidences: BTreeMap<(i32, i32), f64>,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub grid: GridSpec,
    /// Passband per channel; channels without an entry use `default_filter`
    /// recentred on their ITU frequency.
    pub filters: BTreeMap<Channel, FilterSpec>,
    pub default_fwhm_hz: f64,
    pub default_order: u32,
    pub nelder_mead: NelderMeadOptions,
    pub starts: usize,
    /// Relative jitter of the extra starting points.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::coarse(),
            filters: BTreeMap::new(),
            default_fwhm_hz: FilterSpec::DEFAULT_FWHM_HZ,
            default_order: FilterSpec::DEFAULT_ORDER,
            nelder_mead: NelderMeadOptions::default(),
            starts: 3,
            jitter: 0.02,
            seed: 0,
        }
    }
}

impl FitOptions {
    fn filter(&self, ch: Channel) -> FilterSpec {
        self.filters
            .get(&ch)
            .cloned()
            .unwrap_or_else(|| FilterSpec::itu(ch.itu, self.default_fwhm_hz, self.default_order, 1.0))
    }
}

/// Evaluate the shape integrals needed for `data`'s channels.
pub fn shape_integrals(
    model: &JsiModel,
    singles: impl IntoIterator<Item = Channel>,
    pairs: impl IntoIterator<Item = (i32, i32)>,
    opts: &FitOptions,
) -> Result<ShapeIntegrals> {
    let model = JsiModel {
        brightness: 1.0,
        ..*model
    };
    let mut out = ShapeIntegrals::default();
    for ch in singles {
        let f = opts.filter(ch);
        let g = opts.grid.singles_grid(&model, &f, ch.arm)?;
        out.singles
            .insert(ch, singles_integral(&f.clone().with_eta(1.0), ch.arm, &g)?);
    }
    for (a, b) in pairs {
        let fv = opts.filter(Channel::alice(a)).with_eta(1.0);
        let fu = opts.filter(Channel::bob(b)).with_eta(1.0);
        let g = opts.grid.pair_grid(&model, &fu, &fv)?;
        out.coincidences.insert((a, b), coincidence_integral(&fu, &fv, &g)?);
    }
    Ok(out)
}

/// Rates predicted by `params` on the channels of `template`.
pub fn predict_rates(
    params: &FitParams,
    crystal: &CrystalSpec,
    template: &RateData,
    opts: &FitOptions,
) -> Result<RateData> {
    let shapes = shape_integrals(
        &params.model(crystal),
        template.singles.keys().copied(),
        template.coincidences.keys().copied(),
        opts,
    )?;
    Ok(apply_linear(&shapes, &params.etas, params.brightness))
}

fn eta_of(etas: &BTreeMap<Channel, f64>, ch: Channel) -> f64 {
    etas.get(&ch).copied().unwrap_or(1.0)
}

fn apply_linear(shapes: &ShapeIntegrals, etas: &BTreeMap<Channel, f64>, b: f64) -> RateData {
    RateData {
        singles: shapes
            .singles
            .iter()
            .map(|(&c, &i)| (c, eta_of(etas, c) * b * i))
            .collect(),
        coincidences: shapes
            .coincidences
            .iter()
            .map(|(&(a, bb), &i)| {
                let e = eta_of(etas, Channel::alice(a)) * eta_of(etas, Channel::bob(bb));
                ((a, bb), e * b * i)
            })
            .collect(),
    }
}

fn relative_objective(model: &RateData, data: &RateData) -> f64 {
    let mut s = 0.0;
    for (k, &m) in &data.singles {
        let p = model.singles.get(k).copied().unwrap_or(0.0);
        let r = (p - m) / m;
        s += r * r;
    }
    for (k, &m) in &data.coincidences {
        let p = model.coincidences.get(k).copied().unwrap_or(0.0);
        let r = (p - m) / m;
        s += r * r;
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub label: String,
    pub measured: f64,
    pub model: f64,
    pub relative: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: FitParams,
    pub objective: f64,
    pub residuals: Vec<Residual>,
    pub converged: bool,
    pub iterations: usize,
    /// Best objective after each accepted outer simplex step.
    pub trace: Vec<f64>,
}

fn residuals(model: &RateData, data: &RateData) -> Vec<Residual> {
    let mut out = Vec::new();
    for (k, &m) in &data.singles {
        let p = model.singles.get(k).copied().unwrap_or(0.0);
        let arm = match k.arm {
            Arm::Idler => "A",
            Arm::Signal => "B",
        };
        out.push(Residual {
            label: format!("S_{arm}{}", k.itu),
            measured: m,
            model: p,
            relative: (p - m) / m,
        });
    }
    for (&(a, b), &m) in &data.coincidences {
        let p = model.coincidences.get(&(a, b)).copied().unwrap_or(0.0);
        out.push(Residual {
            label: format!("C_{a}_{b}"),
            measured: m,
            model: p,
            relative: (p - m) / m,
        });
    }
    out
}

/// Linear parameters (brightness and efficiencies) for fixed shape
/// integrals: a log-space least-squares start polished by Nelder–Mead on the
/// relative-error objective. Returns the updated parameters and objective.
fn profile_linear(
    shapes: &ShapeIntegrals,
    data: &RateData,
    params: &FitParams,
    nm: NelderMeadOptions,
) -> (BTreeMap<Channel, f64>, f64, f64) {
    let free: Vec<Channel> = params
        .etas
        .keys()
        .copied()
        .filter(|c| !params.fixed.etas.contains(c))
        .collect();
    let free_b = !params.fixed.brightness;
    let n = free.len() + free_b as usize;
    let mut etas = params.etas.clone();
    let mut b = params.brightness;
    if n == 0 {
        let obj = relative_objective(&apply_linear(shapes, &etas, b), data);
        return (etas, b, obj);
    }
    let idx = |c: Channel| free.iter().position(|&x| x == c);

    // log m = log B + sum log eta + log I
    let rows = data.len();
    let mut a = DMatrix::<f64>::zeros(rows, n);
    let mut y = DVector::<f64>::zeros(rows);
    let mut r = 0;
    let mut add = |chs: &[Channel], meas: f64, shape: f64, a: &mut DMatrix<f64>, y: &mut DVector<f64>| {
        let mut rhs = math::ln(meas) - math::ln(shape.max(f64::MIN_POSITIVE));
        if free_b {
            a[(r, n - 1)] = 1.0;
        } else {
            rhs -= math::ln(b);
        }
        for &c in chs {
            match idx(c) {
                Some(k) => a[(r, k)] += 1.0,
                None => rhs -= math::ln(eta_of(&etas, c)),
            }
        }
        y[r] = rhs;
        r += 1;
    };
    for (&c, &m) in &data.singles {
        add(&[c], m, shapes.singles.get(&c).copied().unwrap_or(0.0), &mut a, &mut y);
    }
    for (&(ai, bi), &m) in &data.coincidences {
        let sh = shapes.coincidences.get(&(ai, bi)).copied().unwrap_or(0.0);
        add(&[Channel::alice(ai), Channel::bob(bi)], m, sh, &mut a, &mut y);
    }
    if let Ok(sol) = a.clone().svd(true, true).solve(&y, 1e-12) {
        for (k, &c) in free.iter().enumerate() {
            etas.insert(c, math::exp(sol[k]).clamp(1e-9, 1.0));
        }
        if free_b {
            b = math::exp(sol[n - 1]);
        }
    }

    // Polish on the actual objective in log coordinates.
    let mut x0 = Vec::with_capacity(n);
    for c in &free {
        x0.push(math::ln(etas[c]));
    }
    if free_b {
        x0.push(math::ln(b));
    }
    let mut hi = alloc::vec![0.0; n];
    let mut lo = alloc::vec![math::ln(1e-9); n];
    if free_b {
        hi[n - 1] = f64::INFINITY;
        lo[n - 1] = f64::NEG_INFINITY;
    }
    let unpack = |x: &[f64], etas: &mut BTreeMap<Channel, f64>| -> f64 {
        for (k, &c) in free.iter().enumerate() {
            etas.insert(c, math::exp(x[k]));
        }
        if free_b {
            math::exp(x[n - 1])
        } else {
            params.brightness
        }
    };
    let mut scratch = etas.clone();
    let best = nelder_mead(
        |x| {
            let bb = unpack(x, &mut scratch);
            relative_objective(&apply_linear(shapes, &scratch, bb), data)
        },
        &x0,
        &alloc::vec![0.05; n],
        Some((&lo, &hi)),
        nm,
    );
    let b = unpack(&best.x, &mut etas);
    (etas, b, best.value)
}

/// Fit temperature, pump and efficiencies to measured singles and
/// coincidence rates by minimizing the sum of squared relative errors.
///
/// Floating shape parameters (temperature, pump center, pump width) are
/// searched by Nelder–Mead with `opts.starts` jittered starts; for each shape
/// the brightness and efficiencies are profiled out.
pub fn fit_jsi(data: &RateData, initial: &FitParams, crystal: &CrystalSpec, opts: &FitOptions) -> Result<FitReport> {
    if data
        .singles
        .values()
        .chain(data.coincidences.values())
        .any(|&v| !(v > 0.0))
    {
        bail!(Config, "measured rates must be > 0");
    }
    for (&c, &e) in &initial.etas {
        if !(0.0..=1.0).contains(&e) {
            bail!(Config, "efficiency for channel {} outside [0, 1]", c.itu);
        }
    }
    let floating = initial.floating_count();
    if floating > data.len() {
        bail!(
            Config,
            "{floating} floating parameters but only {} data points",
            data.len()
        );
    }
    let singles: Vec<Channel> = data.singles.keys().copied().collect();
    let pairs: Vec<(i32, i32)> = data.coincidences.keys().copied().collect();
    let shapes_for = |p: &FitParams| shape_integrals(&p.model(crystal), singles.clone(), pairs.clone(), opts);

    if floating == 0 {
        let shapes = shapes_for(initial)?;
        let model = apply_linear(&shapes, &initial.etas, initial.brightness);
        return Ok(FitReport {
            params: initial.clone(),
            objective: relative_objective(&model, data),
            residuals: residuals(&model, data),
            converged: true,
            iterations: 0,
            trace: Vec::new(),
        });
    }

    let f = &initial.fixed;
    let shape_free: Vec<usize> = [!f.temperature, !f.pump_center, !f.pump_sigma]
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(k, _)| k)
        .collect();
    let base = [initial.temperature_c, initial.pump_center_nm, initial.pump_sigma_hz];
    let scale = [1.0, 0.01, 1e9];
    let step = [0.5, 0.02, 5e9];
    let (tlo, thi) = CrystalSpec::TEMPERATURE_RANGE_C;
    let lo_all = [tlo, 700.0 + 1e-6, 1e9];
    let hi_all = [thi, 800.0 - 1e-6, 5e12];

    let with_shape = |x: &[f64]| -> FitParams {
        let mut p = initial.clone();
        let mut v = base;
        for (k, &i) in shape_free.iter().enumerate() {
            v[i] = x[k] * scale[i];
        }
        p.temperature_c = v[0];
        p.pump_center_nm = v[1];
        p.pump_sigma_hz = v[2];
        p
    };
    let evaluate = |x: &[f64]| -> Result<(FitParams, f64)> {
        let mut p = with_shape(x);
        let shapes = shapes_for(&p)?;
        let (etas, b, obj) = profile_linear(
            &shapes,
            data,
            &p,
            NelderMeadOptions {
                max_iter: 2000,
                tol: 1e-10,
            },
        );
        p.etas = etas;
        p.brightness = b;
        Ok((p, obj))
    };

    let x0: Vec<f64> = shape_free.iter().map(|&i| base[i] / scale[i]).collect();
    let steps: Vec<f64> = shape_free.iter().map(|&i| step[i] / scale[i]).collect();
    let lo: Vec<f64> = shape_free.iter().map(|&i| lo_all[i] / scale[i]).collect();
    let hi: Vec<f64> = shape_free.iter().map(|&i| hi_all[i] / scale[i]).collect();

    if shape_free.is_empty() {
        let (p, obj) = evaluate(&[])?;
        let shapes = shapes_for(&p)?;
        let model = apply_linear(&shapes, &p.etas, p.brightness);
        return Ok(FitReport {
            residuals: residuals(&model, data),
            params: p,
            objective: obj,
            converged: true,
            iterations: 0,
            trace: Vec::new(),
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    // (params, objective, converged, iterations, trace)
    #[allow(clippy::type_complexity)]
    let mut best: Option<(Vec<f64>, f64, bool, usize, Vec<f64>)> = None;
    let mut first_err: Option<Error> = None;
    for start in 0..opts.starts.max(1) {
        let xs: Vec<f64> = x0
            .iter()
            .zip(&steps)
            .map(|(&v, &s)| {
                if start == 0 {
                    v
                } else {
                    v + rng.random_range(-1.0..1.0) * (opts.jitter * v.abs()).max(s)
                }
            })
            .collect();
        let m = nelder_mead(
            |x| match evaluate(x) {
                Ok((_, o)) => o,
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                    f64::INFINITY
                }
            },
            &xs,
            &steps,
            Some((&lo, &hi)),
            NelderMeadOptions {
                max_iter: opts.nelder_mead.max_iter,
                tol: opts.nelder_mead.tol,
            },
        );
        if best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((m.x, m.value, m.converged, m.iterations, m.trace));
        }
    }
    let (x, _, converged, iterations, trace) = best.unwrap();
    let (p, obj) = match evaluate(&x) {
        Ok(v) => v,
        Err(e) => return Err(first_err.unwrap_or(e)),
    };
    if !obj.is_finite() {
        return Err(first_err.unwrap_or_else(|| Error::Undefined("fit objective is not finite".into())));
    }
    let shapes = shapes_for(&p)?;
    let model = apply_linear(&shapes, &p.etas, p.brightness);
    Ok(FitReport {
        residuals: residuals(&model, data),
        params: p,
        objective: obj,
        converged,
        iterations,
        trace,
    })
}
