//! Bin classification against the clock, Alice/Bob pairing, visibility,
//! fringe fitting and hill-climbing phase lock.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};

use crate::error::{bail, Result};
use crate::math;
use crate::{period_ps, Bin, TimeTag, DEFAULT_REP_RATE_HZ};

#[derive(Debug, Clone, PartialEq)]
pub struct BinConfig {
    pub period_ps: f64,
    /// `[start, end)` windows for early, middle and late, ps.
    pub windows: [(f64, f64); 3],
    pub guard_centers: [f64; 2],
    /// Full width of each guard region; zero disables guards.
    pub guard_width_ps: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        let period = period_ps(DEFAULT_REP_RATE_HZ);
        Self {
            period_ps: period,
            windows: [(0.0, 80.0), (80.0, 160.0), (160.0, period)],
            guard_centers: [80.0, 160.0],
            guard_width_ps: 10.0,
        }
    }
}

impl BinConfig {
    pub fn with_guard(mut self, width_ps: f64) -> Self {
        self.guard_width_ps = width_ps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period_ps > 0.0) {
            bail!(Config, "period must be > 0");
        }
        if !(self.guard_width_ps >= 0.0) {
            bail!(Config, "guard width must be >= 0");
        }
        for &(s, e) in &self.windows {
            if !(s >= 0.0 && e > s && e <= self.period_ps) {
                bail!(Config, "bin window [{s}, {e}) outside [0, period)");
            }
        }
        for k in 0..3 {
            for j in k + 1..3 {
                let (a, b) = (self.windows[k], self.windows[j]);
                if a.0 < b.1 && b.0 < a.1 {
                    bail!(Config, "bin windows overlap");
                }
            }
        }
        Ok(())
    }

    fn phase(&self, time_ps: f64) -> f64 {
        let p = time_ps % self.period_ps;
        if p < 0.0 {
            p + self.period_ps
        } else {
            p
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Bin(Bin),
    Guard,
    Outside,
}

/// Fold `time_ps` into the clock period and classify it. Guards take
/// precedence over bin windows.
pub fn classify_bin(time_ps: f64, cfg: &BinConfig) -> Slot {
    let x = cfg.phase(time_ps);
    let half = cfg.guard_width_ps / 2.0;
    if half > 0.0 && cfg.guard_centers.iter().any(|&c| x >= c - half && x < c + half) {
        return Slot::Guard;
    }
    for b in Bin::ALL {
        let (s, e) = cfg.windows[b.index()];
        if x >= s && x < e {
            return Slot::Bin(b);
        }
    }
    Slot::Outside
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoincidenceRecord {
    pub a_bin: Bin,
    pub b_bin: Bin,
    pub cycle_index: u64,
    pub a_time: u64,
    pub b_time: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Coincidences {
    pub records: Vec<CoincidenceRecord>,
    /// Counts by (Alice bin, Bob bin).
    pub matrix: [[u64; 3]; 3],
    pub unpaired_a: u64,
    pub unpaired_b: u64,
    /// Tags in guard regions or outside every window.
    pub excluded_a: u64,
    pub excluded_b: u64,
}

impl Coincidences {
    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn cell(&self, a: Bin, b: Bin) -> u64 {
        self.matrix[a.index()][b.index()]
    }
}

fn check_sorted(s: &[TimeTag]) -> Result<()> {
    if let Some(k) = s.windows(2).position(|w| w[1].time_ps < w[0].time_ps) {
        return Err(crate::Error::Unsorted(k + 1));
    }
    Ok(())
}

/// Pair Alice and Bob tags whose times differ by at most `window_ps`.
///
/// Tags in guard regions are dropped first. Candidate pairs are accepted
/// greedily in order of increasing `|dt|` (ties broken by time sum, then
/// earlier and later time), each tag used at most once. The order does not
/// depend on which stream is called Alice, so swapping the streams
/// transposes the bin matrix.
pub fn find_coincidences(a: &[TimeTag], b: &[TimeTag], window_ps: f64, cfg: &BinConfig) -> Result<Coincidences> {
    cfg.validate()?;
    check_sorted(a)?;
    check_sorted(b)?;
    if !(window_ps >= 0.0) {
        bail!(Config, "coincidence window must be >= 0");
    }
    let keep = |s: &[TimeTag]| -> (Vec<(u64, Bin)>, u64) {
        let mut kept = Vec::with_capacity(s.len());
        let mut excluded = 0;
        for t in s {
            match classify_bin(t.time_ps as f64, cfg) {
                Slot::Bin(bin) => kept.push((t.time_ps, bin)),
                _ => excluded += 1,
            }
        }
        (kept, excluded)
    };
    let (ka, excluded_a) = keep(a);
    let (kb, excluded_b) = keep(b);

    let w = window_ps as u64 + u64::from(window_ps > math::floor(window_ps));
    let mut cand: Vec<(u64, u64, u64, u64, u32, u32)> = Vec::new();
    let mut lo = 0usize;
    for (i, &(ta, _)) in ka.iter().enumerate() {
        while lo < kb.len() && kb[lo].0 + w < ta {
            lo += 1;
        }
        let mut j = lo;
        while j < kb.len() && kb[j].0 <= ta + w {
            let tb = kb[j].0;
            let d = ta.abs_diff(tb);
            if d as f64 <= window_ps {
                cand.push((d, ta + tb, ta.min(tb), ta.max(tb), i as u32, j as u32));
            }
            j += 1;
        }
    }
    cand.sort_unstable();
    let mut used_a = alloc::vec![false; ka.len()];
    let mut used_b = alloc::vec![false; kb.len()];
    let mut out = Coincidences {
        excluded_a,
        excluded_b,
        ..Default::default()
    };
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for &(_, _, _, _, i, j) in &cand {
        if !used_a[i as usize] && !used_b[j as usize] {
            used_a[i as usize] = true;
            used_b[j as usize] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    for (i, j) in pairs {
        let (ta, ba) = ka[i as usize];
        let (tb, bb) = kb[j as usize];
        out.matrix[ba.index()][bb.index()] += 1;
        out.records.push(CoincidenceRecord {
            a_bin: ba,
            b_bin: bb,
            cycle_index: (ta as f64 / cfg.period_ps) as u64,
            a_time: ta,
            b_time: tb,
        });
    }
    out.unpaired_a = used_a.iter().filter(|u| !**u).count() as u64;
    out.unpaired_b = used_b.iter().filter(|u| !**u).count() as u64;
    Ok(out)
}

/// Visibility in percent and its one-sigma Poisson error, from counts at the
/// fringe maximum and minimum with their integration times.
pub fn visibility(counts_max: f64, counts_min: f64, duration_max_s: f64, duration_min_s: f64) -> Result<(f64, f64)> {
    if !(duration_max_s > 0.0 && duration_min_s > 0.0) {
        bail!(Config, "durations must be > 0");
    }
    if !(counts_max >= 0.0 && counts_min >= 0.0) {
        bail!(Config, "counts must be >= 0");
    }
    let r1 = counts_max / duration_max_s;
    let r2 = counts_min / duration_min_s;
    let s = r1 + r2;
    if !(s > 0.0) {
        bail!(Undefined, "no counts at either fringe extreme");
    }
    let v = (r1 - r2) / s;
    let s1 = math::sqrt(counts_max) / duration_max_s;
    let s2 = math::sqrt(counts_min) / duration_min_s;
    let d1 = 2.0 * r2 / (s * s);
    let d2 = 2.0 * r1 / (s * s);
    let sigma = math::sqrt(d1 * d1 * s1 * s1 + d2 * d2 * s2 * s2);
    Ok((100.0 * v, 100.0 * sigma))
}

/// Rates recorded against a control setting.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeScan {
    pub control: Vec<f64>,
    pub rates: Vec<f64>,
}

/// `offset + amplitude cos(frequency x + phase)`, `amplitude >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FringeFit {
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    /// Set when the scan carries no modulation.
    pub degenerate: bool,
}

impl FringeFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.offset + self.amplitude * math::cos(self.frequency * x + self.phase)
    }

    pub fn visibility(&self) -> f64 {
        self.amplitude / self.offset
    }
}

/// Linear least squares in `[1, cos, sin]` at fixed frequency; returns
/// `(offset, c, s, sse)`.
fn lls_at(x: &[f64], y: &[f64], a: f64) -> Option<(f64, f64, f64, f64)> {
    let mut m = Matrix3::<f64>::zeros();
    let mut v = Vector3::<f64>::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let f = Vector3::new(1.0, math::cos(a * xi), math::sin(a * xi));
        m += f * f.transpose();
        v += f * yi;
    }
    let sol = m.lu().solve(&v)?;
    let mut sse = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let r = yi - (sol[0] + sol[1] * math::cos(a * xi) + sol[2] * math::sin(a * xi));
        sse += r * r;
    }
    Some((sol[0], sol[1], sol[2], sse))
}

/// Fit a cosine fringe. With `frequency` given only offset, amplitude and
/// phase are fitted (linear least squares); otherwise the frequency is found
/// by a grid search over one period per scan span up to the sampling limit,
/// refined by golden-section search.
pub fn fit_fringe(scan: &FringeScan, frequency: Option<f64>) -> Result<FringeFit> {
    let (x, y) = (&scan.control, &scan.rates);
    if x.len() != y.len() {
        bail!(Config, "control and rate lengths differ");
    }
    if x.len() < 8 {
        bail!(Config, "need at least 8 samples, got {}", x.len());
    }
    if y.iter().any(|v| !(*v >= 0.0)) {
        bail!(Config, "rates must be >= 0");
    }
    let mean = math::mean(y);
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if sst <= 1e-24 * (1.0 + mean * mean) {
        return Ok(FringeFit {
            offset: mean,
            amplitude: 0.0,
            frequency: frequency.unwrap_or(0.0),
            phase: 0.0,
            r_squared: 1.0,
            residuals: alloc::vec![0.0; y.len()],
            degenerate: true,
        });
    }
    let a = match frequency {
        Some(a) => a,
        None => {
            let (lo, hi) = x
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let span = hi - lo;
            let mut sorted = x.clone();
            sorted.sort_by(|p, q| p.total_cmp(q));
            let min_dx = sorted
                .windows(2)
                .map(|w| w[1] - w[0])
                .filter(|d| *d > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !(span > 0.0) || !min_dx.is_finite() {
                bail!(Config, "scan must span a range of control values");
            }
            let a_lo = 2.0 * math::PI / span;
            let a_hi = math::PI / min_dx;
            if a_hi <= a_lo {
                bail!(Config, "scan does not span one fringe period at the sampling limit");
            }
            let n = 4000;
            let sse = |a: f64| lls_at(x, y, a).map_or(f64::INFINITY, |r| r.3);
            let mut best = (a_lo, f64::INFINITY);
            let step = (a_hi - a_lo) / n as f64;
            for k in 0..=n {
                let a = a_lo + step * k as f64;
                let s = sse(a);
                if s < best.1 {
                    best = (a, s);
                }
            }
            let (mut l, mut h) = ((best.0 - step).max(a_lo * 0.5), best.0 + step);
            let g = (math::sqrt(5.0) - 1.0) / 2.0;
            for _ in 0..100 {
                let m1 = h - g * (h - l);
                let m2 = l + g * (h - l);
                if sse(m1) < sse(m2) {
                    h = m2;
                } else {
                    l = m1;
                }
            }
            0.5 * (l + h)
        }
    };
    let (offset, c, s, sse) =
        lls_at(x, y, a).ok_or_else(|| crate::Error::Degenerate("singular fringe design".into()))?;
    let amplitude = math::sqrt(c * c + s * s);
    let phase = math::atan2(-s, c);
    let fit = FringeFit {
        offset,
        amplitude,
        frequency: a,
        phase,
        r_squared: 1.0 - sse / sst,
        residuals: Vec::new(),
        degenerate: false,
    };
    let residuals = x.iter().zip(y).map(|(&xi, &yi)| yi - fit.eval(xi)).collect();
    Ok(FringeFit { residuals, ..fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extremum {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLock {
    pub control: f64,
    pub rate: f64,
    /// `(control, rate)` of every query.
    pub trace: Vec<(f64, f64)>,
    pub iterations: usize,
    pub converged: bool,
}

/// Hill-climb a rate towards `target` by comparing the current setting with
/// one step away. Both points are re-measured each iteration; a failed step
/// reverses direction and halves the step. Stops once the step falls below
/// `tolerance` or after `max_iters` iterations.
pub fn phase_lock<F>(
    mut oracle: F,
    target: Extremum,
    initial: f64,
    step: f64,
    tolerance: f64,
    max_iters: usize,
) -> Result<PhaseLock>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    if !(step > 0.0) {
        bail!(Config, "step must be > 0");
    }
    let mut trace = Vec::new();
    let mut measure = |x: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
        let (counts, duration) = oracle(x)?;
        if !(duration > 0.0) {
            bail!(Config, "oracle returned a non-positive duration");
        }
        let r = counts / duration;
        trace.push((x, r));
        Ok(r)
    };
    let better = |new: f64, old: f64| match target {
        Extremum::Max => new > old,
        Extremum::Min => new < old,
    };
    let (mut x, mut h, mut dir) = (initial, step, 1.0);
    let mut iterations = 0;
    let mut converged = false;
    let mut rate = measure(x, &mut trace)?;
    while iterations < max_iters {
        if h < tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let here = if iterations == 1 { rate } else { measure(x, &mut trace)? };
        let there = measure(x + dir * h, &mut trace)?;
        if better(there, here) {
            x += dir * h;
            rate = there;
        } else {
            rate = here;
            dir = -dir;
            h /= 2.0;
        }
    }
    if !converged && h < tolerance {
        converged = true;
    }
    Ok(PhaseLock {
        control: x,
        rate,
        trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        let c = BinConfig::default();
        assert_eq!(classify_bin(80.0, &c), Slot::Guard);
        assert_eq!(classify_bin(40.0, &c), Slot::Bin(Bin::Early));
        assert_eq!(classify_bin(120.0, &c), Slot::Bin(Bin::Middle));
        assert_eq!(classify_bin(200.0, &c), Slot::Bin(Bin::Late));
        assert_eq!(classify_bin(160.0 + c.period_ps * 3.0, &c), Slot::Guard);
        assert_eq!(classify_bin(80.0, &c.clone().with_guard(0.0)), Slot::Bin(Bin::Middle));
    }
}
