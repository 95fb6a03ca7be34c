//! Seeded synthetic time-tag streams for one detector at Alice and one at
//! Bob.
//!
//! Each clock cycle carries a Poisson number of spectrally compatible pairs
//! (mean `mu`) and, independently on each arm, a Poisson number of photons
//! whose partner falls outside the other filter (mean `mu (1 - delta)/delta`).
//! Pair photons are routed through the source and analysis interferometers
//! to the early, middle or late bin of output 1; middle-middle coincidences
//! interfere with phase `theta`. Events are then thinned by detection
//! efficiency and saturation, jittered, time-walked and dead-time filtered.

use alloc::vec::Vec;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Geometric, Normal};

use crate::error::{bail, Result};
use crate::math;
use crate::rates::{InterferometerSpec, SaturationSpec};
use crate::{period_ps, Bin, TimeTag, BIN_CENTERS_PS, DEFAULT_REP_RATE_HZ};

pub const CHANNEL_A: u8 = 1;
pub const CHANNEL_B: u8 = 2;

/// Interferometer delay, ps.
pub const DELAY_PS: f64 = 80.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceScenario {
    pub rep_rate_hz: f64,
    /// Mean compatible pairs per cycle (early plus late).
    pub mu: f64,
    pub delta: f64,
    pub eta_a: f64,
    pub eta_b: f64,
    pub source: InterferometerSpec,
    pub alice: InterferometerSpec,
    pub bob: InterferometerSpec,
    /// Residual two-photon coherence of the middle-middle term.
    pub phase_visibility: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl SourceScenario {
    /// Reference source: delta 0.393, 20% detection efficiency per arm,
    /// early/late imbalances 1.13 (source), 1.24 (Alice), 1.15 (Bob).
    pub fn reference(mu: f64, duration_s: f64, seed: u64) -> Self {
        let ifo = |long: f64| InterferometerSpec {
            beta: long,
            ..InterferometerSpec::balanced(DELAY_PS)
        };
        Self {
            rep_rate_hz: DEFAULT_REP_RATE_HZ,
            mu,
            delta: 0.393,
            eta_a: 0.2,
            eta_b: 0.2,
            source: ifo(1.0 / 1.13),
            alice: ifo(1.0 / 1.24),
            bob: ifo(1.0 / 1.15),
            phase_visibility: 1.0,
            duration_s,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.mu) {
            bail!(Config, "mu {} outside [0, 0.5]", self.mu);
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            bail!(Config, "delta {} outside (0, 1]", self.delta);
        }
        for (n, v) in [
            ("eta_a", self.eta_a),
            ("eta_b", self.eta_b),
            ("visibility", self.phase_visibility),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bail!(Config, "{n} = {v} outside [0, 1]");
            }
        }
        if !(self.duration_s > 0.0) {
            bail!(Config, "duration must be > 0");
        }
        if !(self.rep_rate_hz > 0.0) {
            bail!(Config, "repetition rate must be > 0");
        }
        self.source.validate()?;
        self.alice.validate()?;
        self.bob.validate()?;
        Ok(())
    }

    /// Total two-photon phase `theta`.
    pub fn theta(&self) -> f64 {
        self.source.phase + self.alice.phase + self.bob.phase
    }

    /// Returns a copy with the two-photon phase set to `theta` via the
    /// source interferometer.
    pub fn with_theta(&self, theta: f64) -> Self {
        let mut s = self.clone();
        s.source.phase = theta - self.alice.phase - self.bob.phase;
        s
    }

    pub fn cycles(&self) -> u64 {
        math::floor(self.duration_s * self.rep_rate_hz) as u64
    }
}

/// Ground-truth time-walk delay `d(t')` added to a detection that follows
/// the previous one by `t'`.
#[derive(Debug, Clone, PartialEq)]
pub enum WalkCurve {
    None,
    /// `amplitude exp(-t'/tau)`.
    Exponential {
        amplitude_ps: f64,
        tau_ps: f64,
    },
    /// Linear interpolation, zero beyond the last sample.
    Table {
        t_prime_ps: Vec<f64>,
        d_ps: Vec<f64>,
    },
}

impl WalkCurve {
    pub fn eval(&self, t_prime_ps: f64) -> f64 {
        match self {
            WalkCurve::None => 0.0,
            WalkCurve::Exponential { amplitude_ps, tau_ps } => amplitude_ps * math::exp(-t_prime_ps / tau_ps),
            WalkCurve::Table { t_prime_ps: x, d_ps } => {
                if x.is_empty() {
                    0.0
                } else if t_prime_ps < x[0] {
                    d_ps[0]
                } else {
                    math::interp(x, d_ps, t_prime_ps).unwrap_or(0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub jitter_fwhm_ps: f64,
    pub walk: WalkCurve,
    pub saturation: Option<SaturationSpec>,
    pub dead_time_ps: f64,
}

impl DetectorModel {
    pub fn ideal() -> Self {
        Self {
            jitter_fwhm_ps: 0.0,
            walk: WalkCurve::None,
            saturation: None,
            dead_time_ps: 0.0,
        }
    }

    /// 13 ps jitter, saturation halving efficiency at 15.5 MHz, no walk.
    pub fn reference() -> Self {
        Self {
            jitter_fwhm_ps: 13.0,
            walk: WalkCurve::None,
            saturation: Some(SaturationSpec {
                eta0: 1.0,
                rate_3db: 15.5e6,
            }),
            dead_time_ps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_fwhm_ps >= 0.0) {
            bail!(Config, "jitter must be >= 0");
        }
        if !(self.dead_time_ps >= 0.0) {
            bail!(Config, "dead time must be >= 0");
        }
        if let Some(s) = &self.saturation {
            s.validate()?;
        }
        if let WalkCurve::Table { t_prime_ps, d_ps } = &self.walk {
            if t_prime_ps.len() != d_ps.len() || !t_prime_ps.windows(2).all(|w| w[1] > w[0]) {
                bail!(Config, "walk table must be strictly increasing with matching lengths");
            }
        }
        Ok(())
    }
}

/// Outcome of one photon at one station: a bin of output 1, or not
/// recorded (other output or lost inside the interferometer).
const NOT_RECORDED: usize = 3;

/// Joint bin probabilities of one compatible pair at output 1 of both
/// analysis interferometers, before detection efficiency. Index 3 is "not
/// recorded".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTable {
    pub joint: [[f64; 4]; 4],
    pub alice: [f64; 3],
    pub bob: [f64; 3],
}

impl PairTable {
    pub fn new(sc: &SourceScenario) -> Self {
        let (ae, al) = (sc.source.alpha, sc.source.beta);
        let norm = math::sqrt(ae * ae + al * al);
        let ce = Complex64::new(ae / norm, 0.0);
        let cl = Complex64::from_polar(al / norm, sc.source.phase);
        let arms = |s: &InterferometerSpec| {
            let rt = s.t * math::sqrt(s.r2());
            (
                Complex64::from_polar(rt * math::sqrt(s.alpha), s.phase),
                Complex64::new(rt * math::sqrt(s.beta), 0.0),
            )
        };
        let (sa, la) = arms(&sc.alice);
        let (sb, lb) = arms(&sc.bob);
        // amplitude of each station bin given an early or late photon
        let a_e = [sa, la, Complex64::new(0.0, 0.0)];
        let a_l = [Complex64::new(0.0, 0.0), sa, la];
        let b_e = [sb, lb, Complex64::new(0.0, 0.0)];
        let b_l = [Complex64::new(0.0, 0.0), sb, lb];
        let mut joint = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                let x = ce * a_e[i] * b_e[j];
                let y = cl * a_l[i] * b_l[j];
                joint[i][j] = x.norm_sqr() + y.norm_sqr() + 2.0 * sc.phase_visibility * (x * y.conj()).re;
            }
        }
        let pe = ce.norm_sqr();
        let pl = cl.norm_sqr();
        let alice: [f64; 3] = core::array::from_fn(|i| pe * a_e[i].norm_sqr() + pl * a_l[i].norm_sqr());
        let bob: [f64; 3] = core::array::from_fn(|j| pe * b_e[j].norm_sqr() + pl * b_l[j].norm_sqr());
        let mut total = 0.0;
        for i in 0..3 {
            let row: f64 = joint[i][..3].iter().sum();
            joint[i][NOT_RECORDED] = (alice[i] - row).max(0.0);
            let col: f64 = (0..3).map(|k| joint[k][i]).sum();
            joint[NOT_RECORDED][i] = (bob[i] - col).max(0.0);
        }
        for row in &joint {
            total += row.iter().sum::<f64>();
        }
        joint[NOT_RECORDED][NOT_RECORDED] = (1.0 - total).max(0.0);
        Self { joint, alice, bob }
    }

    /// Same table after independent detection with efficiencies `eta_a`,
    /// `eta_b`.
    pub fn detected(&self, eta_a: f64, eta_b: f64) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let p = self.joint[i][j];
                let pa = if i < 3 { [eta_a, 1.0 - eta_a] } else { [0.0, 1.0] };
                let pb = if j < 3 { [eta_b, 1.0 - eta_b] } else { [0.0, 1.0] };
                out[i][j] += p * pa[0] * pb[0];
                out[i][NOT_RECORDED] += p * pa[0] * pb[1];
                out[NOT_RECORDED][j] += p * pa[1] * pb[0];
                out[NOT_RECORDED][NOT_RECORDED] += p * pa[1] * pb[1];
            }
        }
        out
    }

    /// Probability that a photon reaching a station is recorded in output 1.
    pub fn port_probability(&self) -> (f64, f64) {
        (self.alice.iter().sum(), self.bob.iter().sum())
    }
}

/// Expected per-arm detection rates before saturation, Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedRates {
    pub singles_a: f64,
    pub singles_b: f64,
    /// Compatible pairs detected on both arms.
    pub pair_coincidences: f64,
}

pub fn expected_rates(sc: &SourceScenario) -> ExpectedRates {
    let t = PairTable::new(sc);
    let (pa, pb) = t.port_probability();
    let r = sc.rep_rate_hz;
    let total = sc.mu / sc.delta;
    let d = t.detected(sc.eta_a, sc.eta_b);
    let both: f64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| d[i][j])
        .sum();
    ExpectedRates {
        singles_a: r * total * sc.eta_a * pa,
        singles_b: r * total * sc.eta_b * pb,
        pair_coincidences: r * sc.mu * both,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTruth {
    pub cycles: u64,
    /// `mu * cycles`.
    pub expected_pairs: f64,
    /// Pairs with at least one detection.
    pub pair_events: u64,
    /// Pairs detected on both arms, before jitter, walk and dead time.
    pub both_detected: u64,
    /// `both_detected` split by (Alice bin, Bob bin).
    pub cells: [[u64; 3]; 3],
    pub singles_a: [u64; 3],
    pub singles_b: [u64; 3],
    /// Detection efficiency times output-1 probability times saturation
    /// factor.
    pub effective_eta_a: f64,
    pub effective_eta_b: f64,
    pub saturation_a: f64,
    pub saturation_b: f64,
    pub dropped_walk_a: u64,
    pub dropped_walk_b: u64,
    pub dropped_dead_a: u64,
    pub dropped_dead_b: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub a: Vec<TimeTag>,
    pub b: Vec<TimeTag>,
    pub truth: SimTruth,
}

fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Poisson draw conditioned on at least one event.
fn zero_truncated_poisson<R: Rng>(rng: &mut R, lambda: f64) -> u32 {
    let p0 = math::exp(-lambda);
    let mut u = rng.random::<f64>() * (1.0 - p0);
    let mut k = 1u32;
    let mut term = p0 * lambda;
    loop {
        if u < term || k > 200 {
            return k;
        }
        u -= term;
        k += 1;
        term *= lambda / k as f64;
    }
}

/// Per-arm timing chain: jitter, walk (relative to the previous distorted
/// arrival), dead time, integer picoseconds within `[0, end_ps)`.
fn detect<R: Rng>(
    rng: &mut R,
    mut times: Vec<f64>,
    det: &DetectorModel,
    channel: u8,
    end_ps: f64,
) -> Result<(Vec<TimeTag>, u64, u64)> {
    if det.jitter_fwhm_ps > 0.0 {
        let sigma = det.jitter_fwhm_ps / (2.0 * math::sqrt(2.0 * math::LN_2));
        let n = Normal::new(0.0, sigma).map_err(|_| crate::Error::Config("bad jitter".into()))?;
        for t in &mut times {
            *t += n.sample(rng);
        }
        times.sort_by(|a, b| a.total_cmp(b));
    }
    let mut out: Vec<f64> = Vec::with_capacity(times.len());
    let mut dropped_walk = 0;
    let mut prev: Option<f64> = None;
    for t in times {
        let o = match prev {
            None => t,
            Some(p) => {
                let tp = t - p;
                if tp <= 0.0 {
                    dropped_walk += 1;
                    continue;
                }
                t + det.walk.eval(tp)
            }
        };
        prev = Some(o);
        out.push(o);
    }
    out.sort_by(|a, b| a.total_cmp(b));
    let mut tags = Vec::with_capacity(out.len());
    let mut dropped_dead = 0;
    let mut last: Option<f64> = None;
    for o in out {
        if let Some(l) = last {
            if o - l < det.dead_time_ps {
                dropped_dead += 1;
                continue;
            }
        }
        last = Some(o);
        let ps = math::round(o);
        if ps >= 0.0 && ps < end_ps {
            tags.push(TimeTag::new(channel, ps as u64));
        }
    }
    Ok((tags, dropped_walk, dropped_dead))
}

/// Generate both streams and the ground-truth record.
pub fn generate_stream(sc: &SourceScenario, det_a: &DetectorModel, det_b: &DetectorModel) -> Result<SimOutput> {
    sc.validate()?;
    det_a.validate()?;
    det_b.validate()?;
    let table = PairTable::new(sc);
    let (port_a, port_b) = table.port_probability();
    let expected = expected_rates(sc);
    let sat = |det: &DetectorModel, r: f64| match &det.saturation {
        Some(s) if r > 0.0 => s.observed_rate(r) / r,
        _ => 1.0,
    };
    let sat_a = sat(det_a, expected.singles_a);
    let sat_b = sat(det_b, expected.singles_b);
    let (eta_a, eta_b) = (sc.eta_a * sat_a, sc.eta_b * sat_b);

    let detected = table.detected(eta_a, eta_b);
    let mut pair_cells = [0.0; 16];
    for i in 0..4 {
        for j in 0..4 {
            pair_cells[i * 4 + j] = detected[i][j];
        }
    }
    pair_cells[15] = 0.0;
    let q_pair: f64 = pair_cells.iter().sum();
    let incompatible = sc.mu * (1.0 - sc.delta) / sc.delta;
    let lam_pair = sc.mu * q_pair;
    let lam_a = incompatible * eta_a * port_a;
    let lam_b = incompatible * eta_b * port_b;
    let lambda = lam_pair + lam_a + lam_b;

    let cycles = sc.cycles();
    let period = period_ps(sc.rep_rate_hz);
    let end_ps = sc.duration_s * 1e12;
    let mut rng = ChaCha20Rng::seed_from_u64(sc.seed);
    let mut truth = SimTruth {
        cycles,
        expected_pairs: sc.mu * cycles as f64,
        effective_eta_a: eta_a * port_a,
        effective_eta_b: eta_b * port_b,
        saturation_a: sat_a,
        saturation_b: sat_b,
        ..Default::default()
    };
    let mut ta: Vec<f64> = Vec::new();
    let mut tb: Vec<f64> = Vec::new();
    if lambda > 0.0 && cycles > 0 {
        let p_active = -libm::expm1(-lambda);
        let geo = Geometric::new(p_active).map_err(|_| crate::Error::Config("bad event rate".into()))?;
        let kinds = [lam_pair, lam_a, lam_b];
        let mut cycle: u64 = geo.sample(&mut rng);
        while cycle < cycles {
            let base = cycle as f64 * period;
            for _ in 0..zero_truncated_poisson(&mut rng, lambda) {
                match categorical(&mut rng, &kinds) {
                    0 => {
                        truth.pair_events += 1;
                        let c = categorical(&mut rng, &pair_cells);
                        let (i, j) = (c / 4, c % 4);
                        if i < 3 {
                            ta.push(base + BIN_CENTERS_PS[i]);
                            truth.singles_a[i] += 1;
                        }
                        if j < 3 {
                            tb.push(base + BIN_CENTERS_PS[j]);
                            truth.singles_b[j] += 1;
                        }
                        if i < 3 && j < 3 {
                            truth.both_detected += 1;
                            truth.cells[i][j] += 1;
                        }
                    }
                    1 => {
                        let i = categorical(&mut rng, &table.alice);
                        ta.push(base + BIN_CENTERS_PS[i]);
                        truth.singles_a[i] += 1;
                    }
                    _ => {
                        let j = categorical(&mut rng, &table.bob);
                        tb.push(base + BIN_CENTERS_PS[j]);
                        truth.singles_b[j] += 1;
                    }
                }
            }
            let skip: u64 = geo.sample(&mut rng);
            cycle = cycle.saturating_add(skip).saturating_add(1);
        }
    }
    let (a, wa, da) = detect(&mut rng, ta, det_a, CHANNEL_A, end_ps)?;
    let (b, wb, db) = detect(&mut rng, tb, det_b, CHANNEL_B, end_ps)?;
    truth.dropped_walk_a = wa;
    truth.dropped_walk_b = wb;
    truth.dropped_dead_a = da;
    truth.dropped_dead_b = db;
    Ok(SimOutput { a, b, truth })
}

/// Time of bin `bin` in cycle `cycle`, ps.
pub fn bin_time_ps(cycle: u64, bin: Bin, rep_rate_hz: f64) -> f64 {
    cycle as f64 * period_ps(rep_rate_hz) + BIN_CENTERS_PS[bin.index()]
}
