//! Closed-form rate, visibility and key-rate formulas, a truncated Fock-space
//! reference for the multiphoton coincidence probability, and extrapolation
//! of rate metrics under detector saturation.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{bail, Result};
use crate::math;

/// Singles, coincidences and clock rate of one channel pair, all in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredRates {
    pub s_a: f64,
    pub s_b: f64,
    pub c_ab: f64,
    pub rep_rate_hz: f64,
}

impl MeasuredRates {
    pub fn validate(&self) -> Result<()> {
        if [self.s_a, self.s_b, self.c_ab, self.rep_rate_hz]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            bail!(Config, "rates must be nonnegative");
        }
        if self.c_ab > self.s_a.min(self.s_b) {
            bail!(Config, "coincidence rate exceeds a singles rate");
        }
        Ok(())
    }
}

/// `mu = delta S_A S_B / (R C_AB)`.
pub fn mu_from_rates(rates: &MeasuredRates, delta: f64) -> Result<f64> {
    if !(rates.c_ab > 0.0) || !(rates.rep_rate_hz > 0.0) {
        bail!(Division, "coincidence and repetition rates must be > 0");
    }
    Ok(delta * rates.s_a * rates.s_b / (rates.rep_rate_hz * rates.c_ab))
}

/// `delta = C / (eta S_other)`: fraction of one arm's photons whose partner
/// is spectrally compatible with the other arm's filter.
pub fn delta_empirical(c: f64, eta: f64, s_other: f64) -> Result<f64> {
    let den = eta * s_other;
    if !(den > 0.0) {
        bail!(Division, "efficiency and singles rate must be > 0");
    }
    Ok(c / den)
}

/// Accidental coincidence rate and its three components, Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accidentals {
    pub total: f64,
    /// Both photons from incompatible spectral regions.
    pub ee: f64,
    /// Compatible photon at Alice lost its partner; Bob's photon incompatible.
    pub em: f64,
    pub me: f64,
}

pub fn accidental_rate(
    s_a: f64,
    s_b: f64,
    rep_rate_hz: f64,
    delta: f64,
    eta_a: f64,
    eta_b: f64,
) -> Result<Accidentals> {
    if [s_a, s_b, eta_a, eta_b].iter().any(|v| !(*v >= 0.0)) || !(rep_rate_hz > 0.0) {
        bail!(Config, "accidental-rate inputs must be nonnegative");
    }
    if !(0.0..=1.0).contains(&delta) {
        bail!(Config, "delta {delta} outside [0, 1]");
    }
    let base = s_a * s_b / rep_rate_hz;
    let ee = (1.0 - delta) * (1.0 - delta) * base;
    let em = (1.0 - delta) * delta * (1.0 - eta_a) * base;
    let me = (1.0 - delta) * delta * (1.0 - eta_b) * base;
    Ok(Accidentals {
        total: ee + em + me,
        ee,
        em,
        me,
    })
}

/// Visibility in percent after subtracting an accidental rate from both
/// fringe extremes (negative differences clamp to zero).
pub fn visibility_corrected(c_max: f64, c_min: f64, c_acc: f64) -> Result<f64> {
    if !(c_min >= 0.0) || !(c_max >= c_min) {
        bail!(Config, "need C_max >= C_min >= 0");
    }
    let hi = (c_max - c_acc).max(0.0);
    let lo = (c_min - c_acc).max(0.0);
    if !(hi + lo > 0.0) {
        bail!(Undefined, "corrected fringe extremes sum to zero");
    }
    Ok(100.0 * (hi - lo) / (hi + lo))
}

pub fn first_order_visibility(mu: f64, v0: f64) -> f64 {
    v0 / (1.0 + mu)
}

/// Delay interferometer. `t` is the beamsplitter amplitude transmittance,
/// `alpha`/`beta` the power efficiencies of the short/long paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferometerSpec {
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
    pub phase: f64,
    pub delay_ps: f64,
}

impl InterferometerSpec {
    pub fn balanced(delay_ps: f64) -> Self {
        Self {
            t: core::f64::consts::FRAC_1_SQRT_2,
            alpha: 1.0,
            beta: 1.0,
            phase: 0.0,
            delay_ps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            bail!(Config, "|t| = {} outside [0, 1]", self.t);
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            bail!(Config, "path efficiencies must lie in [0, 1]");
        }
        if !(self.delay_ps > 0.0) {
            bail!(Config, "interferometer delay must be > 0");
        }
        Ok(())
    }

    /// `|r|^2 = 1 - |t|^2`.
    pub fn r2(&self) -> f64 {
        1.0 - self.t * self.t
    }

    /// `epsilon = |t|^2 / |r|^2`.
    pub fn epsilon(&self) -> f64 {
        self.t * self.t / self.r2()
    }
}

/// Path-efficiency ratios `(kappa_A, kappa_B)`: long/short for Alice,
/// short/long for Bob.
pub fn kappas(alice: &InterferometerSpec, bob: &InterferometerSpec) -> (f64, f64) {
    (alice.beta / alice.alpha, bob.alpha / bob.beta)
}

/// Single-pair entanglement visibilities for output-port combinations
/// `[A1B1, A1B2, A2B1, A2B2]` at early/late pair ratio `x`.
pub fn port_visibilities(x: f64, kappa_a: f64, kappa_b: f64, eps_a: f64, eps_b: f64) -> Result<[f64; 4]> {
    if [x, kappa_a, kappa_b, eps_a, eps_b].iter().any(|v| !(*v > 0.0)) {
        bail!(Config, "port-visibility inputs must be > 0");
    }
    let p = math::sqrt(kappa_b / kappa_a);
    let q = math::sqrt(kappa_a / kappa_b);
    let v = |e: f64| 2.0 * math::sqrt(x) / (p / e + e * q * x);
    Ok([v(1.0), v(eps_b), v(eps_a), v(eps_a * eps_b)])
}

/// `mu_E/mu_L` emitted from output `port` of the source interferometer,
/// with amplitude path efficiencies `alpha`, `beta`.
pub fn source_port_mu_ratio(port: u8, t: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        bail!(Config, "|t| must lie in (0, 1)");
    }
    let sq = |x: f64| x * x;
    let a4 = sq(alpha * alpha);
    let b4 = sq(beta * beta);
    match port {
        1 => Ok(a4 / b4),
        2 => {
            let r8 = sq(sq(1.0 - t * t));
            let t8 = sq(sq(t * t));
            Ok(r8 * a4 / (t8 * b4))
        }
        _ => bail!(Config, "port must be 1 or 2"),
    }
}

/// Entanglement visibility including all multiphoton terms for a balanced
/// measurement interferometer.
pub fn multiphoton_visibility(mu_e: f64, mu_l: f64) -> Result<f64> {
    if !(mu_e >= 0.0 && mu_l >= 0.0) {
        bail!(Config, "mean photon numbers must be >= 0");
    }
    if mu_e == 0.0 && mu_l == 0.0 {
        bail!(Undefined, "visibility undefined without pairs");
    }
    let s = math::sqrt(mu_e * mu_l * (1.0 + mu_e) * (1.0 + mu_l));
    let g = |sg: f64| {
        mu_e * mu_e * (9.0 + 8.0 * mu_l * (2.0 + mu_l))
            + sg * (4.0 + 3.0 * mu_l) * (sg * 4.0 + sg * 3.0 * mu_l + 4.0 * s)
            + 2.0 * mu_e * (12.0 + sg * 6.0 * s)
            + 2.0 * mu_e * mu_l * (19.0 + 8.0 * mu_l + sg * 4.0 * s)
    };
    let (gm, gp) = (g(-1.0), g(1.0));
    let a = 2.0 / math::sqrt(gm);
    let b = 2.0 / math::sqrt(gp);
    Ok((a - b) / (1.0 - 4.0 / (2.0 + mu_e + mu_l) + a + b))
}

/// Coincidence probability between output 1 of A and output 2 of B, middle
/// bin, threshold detectors. `tau_a`, `tau_b` are amplitude transmittances.
pub fn multiphoton_coincidence(mu_e: f64, mu_l: f64, tau_a: f64, tau_b: f64, phase: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau_a) || !(0.0..=1.0).contains(&tau_b) {
        bail!(Config, "tau must lie in [0, 1]");
    }
    if !(mu_e >= 0.0 && mu_l >= 0.0) {
        bail!(Config, "mean photon numbers must be >= 0");
    }
    let (ta, tb) = (tau_a * tau_a, tau_b * tau_b);
    let f = 1.0 + mu_l + ta * (mu_e - mu_l);
    let g = 1.0 + mu_e + tb * (mu_l - mu_e);
    let h = 1.0 + mu_e + mu_l * (1.0 + mu_e) * (1.0 - ta) - mu_e * tb * (1.0 + mu_l)
        + ta * tb * (mu_e + mu_l + 2.0 * mu_e * mu_l)
        - 2.0
            * math::sqrt(mu_e * mu_l * ta * (1.0 + mu_e) * (1.0 + mu_l) * (1.0 - ta))
            * math::sqrt(tb * (1.0 - tb))
            * math::cos(phase);
    Ok(1.0 - 1.0 / f.abs() - 1.0 / g.abs() + 1.0 / h.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FockResult {
    pub probability: f64,
    /// Probability mass discarded by the photon-number cutoff.
    pub truncation_loss: f64,
    /// Set when `truncation_loss > 1e-8`.
    pub truncated: bool,
}

fn tmsv(mu: f64, n_max: usize) -> Vec<f64> {
    (0..=n_max)
        .map(|n| {
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            sign * math::sqrt(math::powf(mu, n as f64) / math::powf(1.0 + mu, n as f64 + 1.0))
        })
        .collect()
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |a, k| a * k as f64)
}

fn binom(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Output amplitudes over `(k1, k2)` for `n` early and `m` late photons
/// entering a two-output station with mode weights `w`.
fn station(n: usize, m: usize, w: [Complex64; 4], dim: usize) -> Vec<Complex64> {
    let [we1, we2, wl1, wl2] = w;
    let mut out = alloc::vec![Complex64::new(0.0, 0.0); dim * dim];
    let norm = math::sqrt(factorial(n) * factorial(m));
    for j in 0..=n {
        for l in 0..=m {
            let k1 = j + l;
            let k2 = n - j + m - l;
            let coef = we1.powu(j as u32)
                * we2.powu((n - j) as u32)
                * wl1.powu(l as u32)
                * wl2.powu((m - l) as u32)
                * (binom(n, j) * binom(m, l));
            out[k1 * dim + k2] += coef * (math::sqrt(factorial(k1) * factorial(k2)) / norm);
        }
    }
    out
}

/// Same quantity as [`multiphoton_coincidence`], computed by propagating a
/// truncated two-mode squeezed vacuum in each time bin through both
/// interferometers photon by photon.
pub fn fock_coincidence_oracle(
    mu_e: f64,
    mu_l: f64,
    tau_a: f64,
    tau_b: f64,
    phase: f64,
    n_max: usize,
) -> Result<FockResult> {
    if !(2..=6).contains(&n_max) {
        bail!(Config, "photon cutoff {n_max} outside [2, 6]");
    }
    if !(0.0..=1.0).contains(&tau_a) || !(0.0..=1.0).contains(&tau_b) {
        bail!(Config, "tau must lie in [0, 1]");
    }
    let ce = tmsv(mu_e, n_max);
    let cl = tmsv(mu_l, n_max);
    let (ta, tb) = (tau_a * tau_a, tau_b * tau_b);
    let (sa, ca) = (math::sqrt(ta), math::sqrt(1.0 - ta));
    let (sb, cb) = (math::sqrt(tb), math::sqrt(1.0 - tb));
    let e = Complex64::from_polar(1.0, phase);
    let re = |x: f64| Complex64::new(x, 0.0);
    let wa = [re(sa), re(ca), e * ca, -e * sa];
    let wb = [re(sb), re(cb), re(-cb), re(sb)];
    let dim = 2 * n_max + 1;
    let mut amps = alloc::vec![Complex64::new(0.0, 0.0); dim.pow(4)];
    for n in 0..=n_max {
        for m in 0..=n_max {
            let c = ce[n] * cl[m];
            if c == 0.0 {
                continue;
            }
            let a = station(n, m, wa, dim);
            let b = station(n, m, wb, dim);
            for (ia, va) in a.iter().enumerate().filter(|(_, v)| v.norm_sqr() > 0.0) {
                for (ib, vb) in b.iter().enumerate().filter(|(_, v)| v.norm_sqr() > 0.0) {
                    amps[ia * dim * dim + ib] += va * vb * c;
                }
            }
        }
    }
    let mut p = 0.0;
    for (idx, a) in amps.iter().enumerate() {
        let k1 = idx / (dim * dim * dim);
        let k4 = idx % dim;
        if k1 > 0 && k4 > 0 {
            p += a.norm_sqr();
        }
    }
    let kept = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>();
    let loss = 1.0 - kept(&ce) * kept(&cl);
    Ok(FockResult {
        probability: p,
        truncation_loss: loss,
        truncated: loss > 1e-8,
    })
}

/// Heralded second-order coherence, `2 (2 - eta_i) S_i / (R eta_i)`.
pub fn heralded_g2(s_i: f64, eta_i: f64, rep_rate_hz: f64) -> Result<f64> {
    if !(eta_i > 0.0) || !(rep_rate_hz > 0.0) {
        bail!(Division, "idler efficiency and repetition rate must be > 0");
    }
    Ok(2.0 * (2.0 - eta_i) * s_i / (rep_rate_hz * eta_i))
}

/// `g2(0) / mu` for a caller-supplied mean photon number.
pub fn heralded_g2_slope(s_i: f64, eta_i: f64, rep_rate_hz: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        bail!(Division, "mu must be > 0");
    }
    Ok(heralded_g2(s_i, eta_i, rep_rate_hz)? / mu)
}

/// `H2(p)` in bits, zero at both ends.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * math::log2(p) - (1.0 - p) * math::log2(1.0 - p)
}

pub const DEFAULT_SIFT_Q: f64 = 0.81;
pub const DEFAULT_F_EC: f64 = 1.1;

/// Secret fraction `q [1 - f H2(E) - H2(E)]` with `E = (1 - V)/2`, clamped
/// at zero.
pub fn secret_fraction(visibility: f64, q: f64, f_ec: f64) -> f64 {
    let e = (1.0 - visibility) / 2.0;
    let h = binary_entropy(e);
    (q * (1.0 - f_ec * h - h)).max(0.0)
}

pub fn secret_key_rate(c_ab: f64, visibility: f64, q: f64, f_ec: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&visibility) {
        bail!(Config, "visibility {visibility} outside [0, 1]");
    }
    Ok(c_ab * secret_fraction(visibility, q, f_ec))
}

/// Output-port rate ratios relative to the measured port combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortRatios {
    pub r_a: f64,
    pub r_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    /// Sum over all four port combinations.
    AllPorts,
    /// Two time-bin branches scaled up from the lowest-rate one.
    TwoBranchesFromMin,
}

pub fn full_wavefunction_scaling(c: f64, ratios: PortRatios, mode: ScalingMode) -> Result<f64> {
    if !(c >= 0.0) {
        bail!(Config, "coincidence rate must be >= 0");
    }
    if !(ratios.r_a > 0.0 && ratios.r_b > 0.0) {
        bail!(Config, "port ratios must be > 0");
    }
    let p = ratios.r_a * ratios.r_b;
    Ok(match mode {
        ScalingMode::AllPorts => c * (1.0 + ratios.r_a + ratios.r_b + p),
        ScalingMode::TwoBranchesFromMin => c * (4.0 / 3.0) * (1.0 + p),
    })
}

/// Detector efficiency that halves at `rate_3db`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationSpec {
    pub eta0: f64,
    pub rate_3db: f64,
}

impl SaturationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta0) {
            bail!(Config, "nominal efficiency outside [0, 1]");
        }
        if !(self.rate_3db > 0.0) {
            bail!(Config, "3 dB rate must be > 0");
        }
        Ok(())
    }

    /// Efficiency relative to nominal at observed count rate `r`.
    pub fn relative(&self, r: f64) -> f64 {
        1.0 / (1.0 + r / self.rate_3db)
    }

    /// Observed count rate for a rate `nominal` that would be registered at
    /// nominal efficiency: the root of `r (1 + r/r3) = nominal`.
    pub fn observed_rate(&self, nominal: f64) -> f64 {
        let r3 = self.rate_3db;
        let x = 4.0 * nominal / r3;
        // 2 nominal / (1 + sqrt(1 + x)) avoids cancellation at small x.
        if nominal <= 0.0 {
            0.0
        } else {
            2.0 * nominal / (1.0 + math::sqrt(1.0 + x))
        }
    }
}

/// `eta0 / (1 + rate/rate_3db)` at observed count rate `rate`.
pub fn detector_efficiency(rate: f64, sat: &SaturationSpec) -> Result<f64> {
    sat.validate()?;
    if !(rate >= 0.0) {
        bail!(Config, "count rate must be >= 0");
    }
    Ok(sat.eta0 * sat.relative(rate))
}

/// Coincidence rate with derived entanglement and key rates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateMetrics {
    pub mu: f64,
    pub c_ab: f64,
    /// Log-negativity rate, ebits/s.
    pub c_n: f64,
    /// Coherent-information rate, ebits/s.
    pub c_i: f64,
    /// Secret key rate, bits/s.
    pub skr: f64,
}

/// Secret-fraction model versus `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SecretLaw {
    /// `E_S(mu) = E_S(mu0) + slope (mu - mu0)`.
    Linear { slope: f64 },
    /// `V(mu) = v0 + slope mu` pushed through [`secret_fraction`].
    FromVisibility { v0: f64, slope: f64, q: f64, f_ec: f64 },
}

/// Per-pair quality slopes `dE/dmu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualitySlopes {
    pub e_n: f64,
    pub e_i: f64,
    pub secret: SecretLaw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maximizers {
    pub c_ab: f64,
    pub c_n: f64,
    pub c_i: f64,
    pub skr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub per_channel: Vec<RateMetrics>,
    /// `per_channel` times the channel count.
    pub total: Vec<RateMetrics>,
    pub argmax: Maximizers,
}

/// Scale baseline metrics at `baseline.mu` across `mus`.
///
/// Singles grow as `S0 mu/mu0` in each arm and each detector's efficiency
/// follows the saturation law at that rate, so the coincidence rate scales as
/// `mu eta(S_A) eta(S_B)` and peaks where the singles reach `r3`. Qualities
/// are linear in `mu` and clamp at zero.
pub fn extrapolate_metrics(
    baseline: &RateMetrics,
    baseline_singles: (f64, f64),
    slopes: &QualitySlopes,
    sat: Option<&SaturationSpec>,
    channel_count: usize,
    mus: &[f64],
) -> Result<Extrapolation> {
    if mus.is_empty() {
        bail!(Config, "empty mu range");
    }
    if mus.iter().any(|&m| !(m > 0.0)) {
        bail!(Config, "mu values must be > 0");
    }
    let mu0 = baseline.mu;
    let (lo, hi) = mus
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| (a.min(m), b.max(m)));
    if !(mu0 >= lo && mu0 <= hi) {
        bail!(Config, "baseline mu {mu0} outside [{lo}, {hi}]");
    }
    if !(baseline.c_ab > 0.0) {
        bail!(Config, "baseline coincidence rate must be > 0");
    }
    if slopes.e_n > 0.0 || slopes.e_i > 0.0 {
        bail!(Config, "quality slopes must be <= 0");
    }
    if let Some(s) = sat {
        s.validate()?;
    }
    let e_n0 = baseline.c_n / baseline.c_ab;
    let e_i0 = baseline.c_i / baseline.c_ab;
    let e_s0 = baseline.skr / baseline.c_ab;
    let rel = |s_obs: f64| sat.map_or(1.0, |s| s.relative(s_obs));
    let scaled_singles = |s0: f64, mu: f64| s0 * mu / mu0;
    let (sa0, sb0) = baseline_singles;
    let mut per_channel = Vec::with_capacity(mus.len());
    for &mu in mus {
        let sa = scaled_singles(sa0, mu);
        let sb = scaled_singles(sb0, mu);
        let c_ab = baseline.c_ab * (mu / mu0) * (rel(sa) / rel(sa0)) * (rel(sb) / rel(sb0));
        let dmu = mu - mu0;
        let e_n = (e_n0 + slopes.e_n * dmu).max(0.0);
        let e_i = (e_i0 + slopes.e_i * dmu).max(0.0);
        let e_s = match slopes.secret {
            SecretLaw::Linear { slope } => (e_s0 + slope * dmu).max(0.0),
            SecretLaw::FromVisibility { v0, slope, q, f_ec } => {
                secret_fraction((v0 + slope * mu).clamp(0.0, 1.0), q, f_ec)
            }
        };
        per_channel.push(RateMetrics {
            mu,
            c_ab,
            c_n: c_ab * e_n,
            c_i: c_ab * e_i,
            skr: c_ab * e_s,
        });
    }
    let k = channel_count as f64;
    let total = per_channel
        .iter()
        .map(|m| RateMetrics {
            mu: m.mu,
            c_ab: m.c_ab * k,
            c_n: m.c_n * k,
            c_i: m.c_i * k,
            skr: m.skr * k,
        })
        .collect();
    let arg = |f: fn(&RateMetrics) -> f64| {
        per_channel
            .iter()
            .fold((f64::NEG_INFINITY, mus[0]), |(best, at), m| {
                let v = f(m);
                if v > best {
                    (v, m.mu)
                } else {
                    (best, at)
                }
            })
            .1
    };
    let argmax = Maximizers {
        c_ab: arg(|m| m.c_ab),
        c_n: arg(|m| m.c_n),
        c_i: arg(|m| m.c_i),
        skr: arg(|m| m.skr),
    };
    Ok(Extrapolation {
        per_channel,
        total,
        argmax,
    })
}
