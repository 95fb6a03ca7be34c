//! In-situ time-walk calibration from a single detector's own stream.
//!
//! Every tag is placed in a 2D histogram by clock phase (x) and the gap to
//! the preceding tag (y). Rows at large gaps are undistorted and form a
//! template; each other row is matched to it by circular sum of absolute
//! differences, giving the walk `d(t')` as a function of the gap.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::TimeTag;

/// Row spacing of the gap axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum YBins {
    Log { lo_ps: f64, hi_ps: f64, rows: usize },
    Linear { lo_ps: f64, hi_ps: f64, rows: usize },
}

impl Default for YBins {
    /// 256 logarithmic rows from 10 ns to 1 us.
    fn default() -> Self {
        YBins::Log {
            lo_ps: 1e4,
            hi_ps: 1e6,
            rows: 256,
        }
    }
}

impl YBins {
    pub fn edges(&self) -> Result<Vec<f64>> {
        match *self {
            YBins::Log { lo_ps, hi_ps, rows } => {
                if !(lo_ps > 0.0 && hi_ps > lo_ps && rows > 0) {
                    bail!(Config, "bad logarithmic row spec");
                }
                Ok(math::logspace(lo_ps, hi_ps, rows + 1))
            }
            YBins::Linear { lo_ps, hi_ps, rows } => {
                if !(lo_ps >= 0.0 && hi_ps > lo_ps && rows > 0) {
                    bail!(Config, "bad linear row spec");
                }
                Ok(math::linspace(lo_ps, hi_ps, rows + 1))
            }
        }
    }
}

/// Counts by clock phase (columns) and gap to the previous tag (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Hist2D {
    pub period_ps: f64,
    pub x_bin_ps: f64,
    pub x_bins: usize,
    pub y_edges: Vec<f64>,
    /// Row-major, `rows x x_bins`.
    pub counts: Vec<u64>,
}

impl Hist2D {
    /// Empty histogram. The column width is adjusted so that an integer
    /// number of columns fills one period.
    pub fn new(period_ps: f64, x_bin_ps: f64, y: &YBins) -> Result<Self> {
        if !(period_ps > 0.0 && x_bin_ps > 0.0 && x_bin_ps <= period_ps) {
            bail!(Config, "bad period or column width");
        }
        let x_bins = (math::round(period_ps / x_bin_ps) as usize).max(1);
        let y_edges = y.edges()?;
        let rows = y_edges.len() - 1;
        Ok(Self {
            period_ps,
            x_bin_ps: period_ps / x_bins as f64,
            x_bins,
            y_edges,
            counts: alloc::vec![0; rows * x_bins],
        })
    }

    pub fn rows(&self) -> usize {
        self.y_edges.len() - 1
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.counts[r * self.x_bins..(r + 1) * self.x_bins]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [u64] {
        let n = self.x_bins;
        &mut self.counts[r * n..(r + 1) * n]
    }

    /// Geometric (log rows) or arithmetic center of row `r`.
    pub fn row_center(&self, r: usize) -> f64 {
        let (a, b) = (self.y_edges[r], self.y_edges[r + 1]);
        if a > 0.0 {
            math::sqrt(a * b)
        } else {
            0.5 * (a + b)
        }
    }

    pub fn column(&self, time_ps: f64) -> usize {
        let x = time_ps % self.period_ps;
        ((x / self.x_bin_ps) as usize).min(self.x_bins - 1)
    }

    pub fn row_of(&self, gap_ps: f64) -> Option<usize> {
        let e = &self.y_edges;
        if gap_ps < e[0] || gap_ps >= e[e.len() - 1] {
            return None;
        }
        Some(e.partition_point(|&v| v <= gap_ps) - 1)
    }

    pub fn add(&mut self, time_ps: f64, gap_ps: f64) {
        if let Some(r) = self.row_of(gap_ps) {
            let c = self.column(time_ps);
            self.counts[r * self.x_bins + c] += 1;
        }
    }

    /// Sum another histogram with identical binning into this one.
    pub fn merge(&mut self, other: &Hist2D) -> Result<()> {
        if self.x_bins != other.x_bins || self.y_edges != other.y_edges || self.period_ps != other.period_ps {
            bail!(Config, "histogram binning differs");
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn check_sorted(s: &[TimeTag]) -> Result<()> {
    if let Some(k) = s.windows(2).position(|w| w[1].time_ps < w[0].time_ps) {
        return Err(crate::Error::Unsorted(k + 1));
    }
    Ok(())
}

/// Histogram every tag after the first by clock phase and gap to its
/// predecessor. Gaps outside the row range are skipped.
pub fn build_hist2d(stream: &[TimeTag], period_ps: f64, x_bin_ps: f64, y: &YBins) -> Result<Hist2D> {
    check_sorted(stream)?;
    let mut h = Hist2D::new(period_ps, x_bin_ps, y)?;
    for w in stream.windows(2) {
        h.add(w[1].time_ps as f64, (w[1].time_ps - w[0].time_ps) as f64);
    }
    Ok(h)
}

/// Walk correction per histogram row.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkTable {
    pub t_prime_edges: Vec<f64>,
    /// Correction at each row center, ps; may exceed one period.
    pub correction_ps: Vec<f64>,
    /// Gaps at or above this get no correction.
    pub valid_below: f64,
    /// Rows whose SAD minimum was not unique.
    pub flagged: Vec<bool>,
    /// Rows too sparse for their own estimate.
    pub inherited: Vec<bool>,
}

impl WalkTable {
    /// Identity correction over the given rows.
    pub fn zero(t_prime_edges: Vec<f64>, valid_below: f64) -> Self {
        let n = t_prime_edges.len().saturating_sub(1);
        Self {
            t_prime_edges,
            correction_ps: alloc::vec![0.0; n],
            valid_below,
            flagged: alloc::vec![false; n],
            inherited: alloc::vec![false; n],
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.t_prime_edges
            .windows(2)
            .map(|w| {
                if w[0] > 0.0 {
                    math::sqrt(w[0] * w[1])
                } else {
                    0.5 * (w[0] + w[1])
                }
            })
            .collect()
    }

    /// Correction for a tag arriving `t_prime_ps` after its predecessor:
    /// linear interpolation between row centers, held constant below the
    /// first center, zero from `valid_below` on.
    pub fn eval(&self, t_prime_ps: f64) -> f64 {
        if t_prime_ps >= self.valid_below || self.correction_ps.is_empty() {
            return 0.0;
        }
        let c = self.centers();
        if t_prime_ps <= c[0] {
            return self.correction_ps[0];
        }
        math::interp(&c, &self.correction_ps, t_prime_ps).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Gap interval whose rows form the template, ps.
    pub template_range_ps: (f64, f64),
    /// Minimum counts for a row to get its own estimate.
    pub min_row_counts: u64,
    /// Relative SAD tolerance under which two shifts count as tied.
    pub tie_tolerance: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            template_range_ps: (5e5, 1e6),
            min_row_counts: 1000,
            tie_tolerance: 1e-12,
        }
    }
}

/// Circular SAD of `row` shifted left by `k` columns against `template`.
fn sad(row: &[f64], template: &[f64], k: usize) -> f64 {
    let n = row.len();
    let mut s = 0.0;
    for x in 0..n {
        let y = x + k;
        let y = if y >= n { y - n } else { y };
        s += (row[y] - template[x]).abs();
    }
    s
}

/// Signed shift in columns (`k` mapped into `(-n/2, n/2]`).
fn signed(k: usize, n: usize) -> f64 {
    if 2 * k > n {
        k as f64 - n as f64
    } else {
        k as f64
    }
}

/// Best circular shift of `row` onto `template`, in columns, with
/// parabolic refinement, and whether the minimum was tied.
fn best_shift(row: &[f64], template: &[f64], tol: f64) -> (f64, bool) {
    let n = row.len();
    let s: Vec<f64> = (0..n).map(|k| sad(row, template, k)).collect();
    let m = s.iter().copied().fold(f64::INFINITY, f64::min);
    let limit = m + tol * m.abs().max(1e-300);
    let ties: Vec<usize> = (0..n).filter(|&k| s[k] <= limit).collect();
    let k = *ties
        .iter()
        .min_by(|&&a, &&b| signed(a, n).abs().total_cmp(&signed(b, n).abs()).then(a.cmp(&b)))
        .unwrap();
    let tied = ties.len() > 1;
    if n < 3 {
        return (signed(k, n), tied);
    }
    let (sm, s0, sp) = (s[(k + n - 1) % n], s[k], s[(k + 1) % n]);
    let den = sm - 2.0 * s0 + sp;
    let frac = if den > 0.0 {
        (0.5 * (sm - sp) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    (signed(k, n) + frac, tied)
}

/// Derive the walk table from a histogram.
pub fn calibrate(hist: &Hist2D, opts: &CalibrationOptions) -> Result<WalkTable> {
    let rows = hist.rows();
    let (tlo, thi) = opts.template_range_ps;
    if !(thi > tlo) {
        bail!(Config, "template range must be increasing");
    }
    let n = hist.x_bins;
    let in_template: Vec<bool> = (0..rows)
        .map(|r| {
            let c = hist.row_center(r);
            c >= tlo && c <= thi
        })
        .collect();
    let mut template = alloc::vec![0.0; n];
    for r in (0..rows).filter(|&r| in_template[r]) {
        for (t, &c) in template.iter_mut().zip(hist.row(r)) {
            *t += c as f64;
        }
    }
    let tsum: f64 = template.iter().sum();
    if tsum == 0.0 {
        bail!(Calibration, "template rows are empty");
    }
    if (tsum as u64) < opts.min_row_counts {
        bail!(
            Calibration,
            "template holds {} counts, fewer than {}",
            tsum as u64,
            opts.min_row_counts
        );
    }
    for t in &mut template {
        *t /= tsum;
    }

    let period = hist.period_ps;
    let mut raw: Vec<Option<f64>> = alloc::vec![None; rows];
    let mut flagged = alloc::vec![false; rows];
    let mut prev = 0.0;
    for r in (0..rows).rev() {
        let row = hist.row(r);
        let total: u64 = row.iter().sum();
        if total < opts.min_row_counts {
            continue;
        }
        let norm: Vec<f64> = row.iter().map(|&c| c as f64 / total as f64).collect();
        let (shift, tied) = best_shift(&norm, &template, opts.tie_tolerance);
        flagged[r] = tied;
        let d = shift * hist.x_bin_ps;
        let m = math::round((prev - d) / period);
        let d = d + m * period;
        raw[r] = Some(d);
        prev = d;
    }
    if raw.iter().all(|v| v.is_none()) {
        bail!(Calibration, "no row has enough counts");
    }
    let mut correction = alloc::vec![0.0; rows];
    let mut inherited = alloc::vec![false; rows];
    for r in 0..rows {
        match raw[r] {
            Some(d) => correction[r] = d,
            None => {
                inherited[r] = true;
                let mut best: Option<(usize, f64)> = None;
                for (k, v) in raw.iter().enumerate() {
                    if let Some(d) = v {
                        let dist = r.abs_diff(k);
                        // equal distance: prefer the larger-gap row
                        if best.is_none_or(|(bd, _)| dist < bd || (dist == bd && k > r)) {
                            best = Some((dist, *d));
                        }
                    }
                }
                correction[r] = best.unwrap().1;
            }
        }
    }
    Ok(WalkTable {
        t_prime_edges: hist.y_edges.clone(),
        correction_ps: correction,
        valid_below: tlo,
        flagged,
        inherited,
    })
}

/// Subtract the tabulated walk from every tag after the first, using the
/// measured gap to its predecessor. Re-sorts if corrections reorder tags.
pub fn apply_correction(stream: &[TimeTag], table: &WalkTable) -> Result<Vec<TimeTag>> {
    check_sorted(stream)?;
    let mut out = Vec::with_capacity(stream.len());
    let mut reordered = false;
    for (k, t) in stream.iter().enumerate() {
        let time = if k == 0 {
            t.time_ps
        } else {
            let gap = (t.time_ps - stream[k - 1].time_ps) as f64;
            let c = math::round(t.time_ps as f64 - table.eval(gap));
            if c < 0.0 {
                0
            } else {
                c as u64
            }
        };
        if let Some(last) = out.last() {
            let last: &TimeTag = last;
            reordered |= time < last.time_ps;
        }
        out.push(TimeTag::new(t.channel, time));
    }
    if reordered {
        out.sort_by_key(|t| t.time_ps);
    }
    Ok(out)
}

/// Drop every tag that follows the previously kept tag by less than
/// `dead_ps`.
pub fn dead_time_filter(stream: &[TimeTag], dead_ps: u64) -> Result<Vec<TimeTag>> {
    check_sorted(stream)?;
    let mut out: Vec<TimeTag> = Vec::with_capacity(stream.len());
    for &t in stream {
        match out.last() {
            Some(l) if t.time_ps - l.time_ps < dead_ps => {}
            _ => out.push(t),
        }
    }
    Ok(out)
}
