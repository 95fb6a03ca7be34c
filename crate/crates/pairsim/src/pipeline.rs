//! simulate -> walk-correct -> pair -> reconstruct -> report, over a mu
//! sweep.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use pairsim_core::coincidence::{classify_bin, find_coincidences, visibility, BinConfig, Slot};
use pairsim_core::math;
use pairsim_core::optics::{delta_for_pair, GridSpec};
use pairsim_core::rates::{
    accidental_rate, extrapolate_metrics, visibility_corrected, Extrapolation, QualitySlopes, RateMetrics, SecretLaw,
    DEFAULT_F_EC, DEFAULT_SIFT_Q,
};
use pairsim_core::sim::{generate_stream, SimOutput};
use pairsim_core::timewalk::{
    apply_correction, build_hist2d, calibrate, dead_time_filter, CalibrationOptions, Hist2D, WalkTable, YBins,
};
use pairsim_core::tomography::{assemble_counts, entangled_rates, mle_reconstruct, MleOptions, PhaseSetting, C4};
use pairsim_core::{period_ps, Bin, Error, TimeTag};
use rayon::prelude::*;

use crate::config::{substream, DeltaSetting, RunConfig, WalkMode};
use crate::error::{CliError, CliResult};
use crate::formats::{self, num, Provenance};

/// Total two-photon phases of the three analysis settings.
pub const THETAS: [f64; 3] = [0.0, PI / 2.0, PI];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkStatus {
    Off,
    Calibrated,
    /// Calibration failed on sparse data; streams left uncorrected.
    Fallback,
}

impl WalkStatus {
    pub fn label(self) -> &'static str {
        match self {
            WalkStatus::Off => "off",
            WalkStatus::Calibrated => "calibrated",
            WalkStatus::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingResult {
    pub theta: f64,
    pub matrix: [[u64; 3]; 3],
    pub singles_a: u64,
    pub singles_b: u64,
    /// Expected accidental middle-middle coincidences.
    pub accidental_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub mu: f64,
    pub delta: f64,
    pub duration_s: f64,
    pub settings: Vec<SettingResult>,
    pub walk: [WalkStatus; 2],
    pub singles_a_hz: f64,
    pub singles_b_hz: f64,
    /// All-cell coincidence rate averaged over the settings, Hz.
    pub c_ab: f64,
    /// Raw middle-middle fringe visibility and its counting error, percent.
    pub v_raw: f64,
    pub v_raw_err: f64,
    /// Accidental-subtracted visibility, percent.
    pub v_c: f64,
    pub e_n: f64,
    pub e_i: f64,
    pub c_n: f64,
    pub c_i: f64,
    pub skr: f64,
    pub rho: C4,
    pub mle_converged: bool,
}

pub fn bin_config(cfg: &RunConfig) -> BinConfig {
    let p = period_ps(cfg.rep_rate_hz);
    let mut b = BinConfig::default().with_guard(cfg.guard_ps);
    b.period_ps = p;
    b.windows[2].1 = p;
    b
}

/// Resolved geometric factor.
pub fn resolve_delta(cfg: &RunConfig) -> CliResult<f64> {
    match cfg.delta {
        DeltaSetting::Value(d) => Ok(d),
        DeltaSetting::Model => {
            let (u, v) = cfg.filters();
            Ok(delta_for_pair(&cfg.jsi_model(), &u, &v, &GridSpec::default())?.mean)
        }
    }
}

fn walk_histogram(streams: &[&[TimeTag]], cfg: &RunConfig) -> pairsim_core::Result<Hist2D> {
    let p = period_ps(cfg.rep_rate_hz);
    let mut h = Hist2D::new(p, cfg.hist_bin_ps, &YBins::default())?;
    for s in streams {
        h.merge(&build_hist2d(s, p, cfg.hist_bin_ps, &YBins::default())?)?;
    }
    Ok(h)
}

/// Walk table for one arm from all of its streams, following the
/// configured mode.
pub fn walk_table(streams: &[&[TimeTag]], cfg: &RunConfig) -> CliResult<(Option<WalkTable>, WalkStatus)> {
    if cfg.walk_correction == WalkMode::Off {
        return Ok((None, WalkStatus::Off));
    }
    let h = walk_histogram(streams, cfg)?;
    match calibrate(&h, &CalibrationOptions::default()) {
        Ok(t) => Ok((Some(t), WalkStatus::Calibrated)),
        Err(Error::Calibration(_)) if cfg.walk_correction == WalkMode::Auto => Ok((None, WalkStatus::Fallback)),
        Err(e) => Err(e.into()),
    }
}

fn prepare(stream: &[TimeTag], table: Option<&WalkTable>, dead_ps: u64) -> pairsim_core::Result<Vec<TimeTag>> {
    let s = match table {
        Some(t) => apply_correction(stream, t)?,
        None => stream.to_vec(),
    };
    if dead_ps > 0 {
        dead_time_filter(&s, dead_ps)
    } else {
        Ok(s)
    }
}

fn middle_fraction(s: &[TimeTag], bins: &BinConfig) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let m = s
        .iter()
        .filter(|t| classify_bin(t.time_ps as f64, bins) == Slot::Bin(Bin::Middle))
        .count();
    m as f64 / s.len() as f64
}

/// Streams for one mu at each phase setting.
pub fn simulate_point(cfg: &RunConfig, delta: f64, mu: f64) -> CliResult<Vec<SimOutput>> {
    let det = cfg.detector();
    THETAS
        .iter()
        .enumerate()
        .map(|(k, &th)| {
            let seed = substream(cfg.seed, &format!("simulate mu={mu:e} setting={k}"));
            let sc = cfg.scenario(mu, delta, seed).with_theta(th);
            Ok(generate_stream(&sc, &det, &det)?)
        })
        .collect()
}

/// Analysis of the three settings of one mu.
pub fn analyze_point(cfg: &RunConfig, delta: f64, mu: f64, outs: &[SimOutput]) -> CliResult<PointResult> {
    let a: Vec<&[TimeTag]> = outs.iter().map(|o| o.a.as_slice()).collect();
    let b: Vec<&[TimeTag]> = outs.iter().map(|o| o.b.as_slice()).collect();
    let (ta, wa) = walk_table(&a, cfg)?;
    let (tb, wb) = walk_table(&b, cfg)?;
    let bins = bin_config(cfg);
    let dur = cfg.duration_s;
    let mut settings = Vec::with_capacity(outs.len());
    for (k, out) in outs.iter().enumerate() {
        let sa = prepare(&out.a, ta.as_ref(), cfg.dead_time_filter_ps)?;
        let sb = prepare(&out.b, tb.as_ref(), cfg.dead_time_filter_ps)?;
        let c = find_coincidences(&sa, &sb, cfg.window_ps, &bins)?;
        let acc = accidental_rate(
            sa.len() as f64 / dur,
            sb.len() as f64 / dur,
            cfg.rep_rate_hz,
            delta,
            out.truth.effective_eta_a,
            out.truth.effective_eta_b,
        )?;
        settings.push(SettingResult {
            theta: THETAS[k],
            matrix: c.matrix,
            singles_a: sa.len() as u64,
            singles_b: sb.len() as u64,
            accidental_mm: acc.total * dur * middle_fraction(&sa, &bins) * middle_fraction(&sb, &bins),
        });
    }
    let mm = |k: usize| settings[k].matrix[1][1] as f64;
    let (v_raw, v_raw_err) = visibility(mm(0), mm(2), dur, dur)?;
    let acc_mm = 0.5 * (settings[0].accidental_mm + settings[2].accidental_mm);
    let v_c = visibility_corrected(mm(0).max(mm(2)), mm(0).min(mm(2)), acc_mm).unwrap_or(f64::NAN);
    let n = settings.len() as f64;
    let total: u64 = settings.iter().map(|s| s.matrix.iter().flatten().sum::<u64>()).sum();
    let c_ab = total as f64 / (n * dur);
    let phase: Vec<PhaseSetting> = settings
        .iter()
        .map(|s| PhaseSetting {
            theta: s.theta,
            matrix: s.matrix.map(|r| r.map(|v| v as f64)),
            duration_s: dur,
        })
        .collect();
    let mle = mle_reconstruct(&assemble_counts(&phase)?, &MleOptions::default())?;
    let r = entangled_rates(&mle.rho, c_ab, (v_raw / 100.0).clamp(0.0, 1.0))?;
    Ok(PointResult {
        mu,
        delta,
        duration_s: dur,
        singles_a_hz: settings.iter().map(|s| s.singles_a).sum::<u64>() as f64 / (n * dur),
        singles_b_hz: settings.iter().map(|s| s.singles_b).sum::<u64>() as f64 / (n * dur),
        settings,
        walk: [wa, wb],
        c_ab,
        v_raw,
        v_raw_err,
        v_c,
        e_n: r.e_n,
        e_i: r.e_i,
        c_n: r.c_n,
        c_i: r.c_i,
        skr: r.skr,
        rho: mle.rho,
        mle_converged: mle.converged,
    })
}

pub fn run_point(cfg: &RunConfig, delta: f64, mu: f64) -> CliResult<PointResult> {
    let outs = simulate_point(cfg, delta, mu)?;
    analyze_point(cfg, delta, mu, &outs)
}

/// Linear quality fits and the extrapolated table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationFit {
    /// `(intercept, slope)` of V (fraction), E_N and E_I against mu.
    pub visibility: (f64, f64),
    pub e_n: (f64, f64),
    pub e_i: (f64, f64),
    pub baseline: RateMetrics,
    pub table: Extrapolation,
}

/// Fits V, E_N and E_I linearly in mu across `points`, anchors the
/// baseline at the median mu and extrapolates through the saturation law.
pub fn fit_extrapolation(cfg: &RunConfig, points: &[PointResult]) -> CliResult<ExtrapolationFit> {
    if points.len() < 2 {
        return Err(CliError::Usage("extrapolation needs at least two mu values".into()));
    }
    let mut sorted: Vec<&PointResult> = points.iter().collect();
    sorted.sort_by(|x, y| x.mu.total_cmp(&y.mu));
    let mus: Vec<f64> = sorted.iter().map(|p| p.mu).collect();
    let fit = |f: fn(&PointResult) -> f64| {
        let ys: Vec<f64> = sorted.iter().map(|p| f(p)).collect();
        math::linear_fit(&mus, &ys)
    };
    let visibility = fit(|p| p.v_raw / 100.0);
    let e_n = fit(|p| p.e_n);
    let e_i = fit(|p| p.e_i);
    let base = sorted[sorted.len() / 2];
    let mu0 = base.mu;
    let at = |(a, b): (f64, f64)| a + b * mu0;
    let v0 = at(visibility).clamp(0.0, 1.0);
    let baseline = RateMetrics {
        mu: mu0,
        c_ab: base.c_ab,
        c_n: base.c_ab * at(e_n).max(0.0),
        c_i: base.c_ab * at(e_i).max(0.0),
        skr: pairsim_core::rates::secret_key_rate(base.c_ab, v0, DEFAULT_SIFT_Q, DEFAULT_F_EC)?,
    };
    // noise can tilt a flat quality upward; the law needs slopes <= 0
    let slopes = QualitySlopes {
        e_n: e_n.1.min(0.0),
        e_i: e_i.1.min(0.0),
        secret: SecretLaw::FromVisibility {
            v0: visibility.0,
            slope: visibility.1.min(0.0),
            q: DEFAULT_SIFT_Q,
            f_ec: DEFAULT_F_EC,
        },
    };
    let lo = mus[0].min(1e-4);
    let hi = cfg.extrapolate_mu_max.max(mus[mus.len() - 1]);
    let grid = math::linspace(lo, hi, cfg.extrapolate_points);
    let sat = cfg.saturation();
    let table = extrapolate_metrics(
        &baseline,
        (base.singles_a_hz, base.singles_b_hz),
        &slopes,
        sat.as_ref(),
        cfg.channel_count,
        &grid,
    )?;
    Ok(ExtrapolationFit {
        visibility,
        e_n,
        e_i,
        baseline,
        table,
    })
}

/// Runs every mu point on up to `jobs` threads; results in config order.
pub fn run_points(cfg: &RunConfig, delta: f64, jobs: usize) -> CliResult<Vec<PointResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| cfg.mu.par_iter().map(|&mu| run_point(cfg, delta, mu)).collect())
}

pub struct Report {
    pub delta: f64,
    pub points: Vec<PointResult>,
    pub extrapolation: Option<ExtrapolationFit>,
}

struct Manifest {
    path: std::path::PathBuf,
    text: String,
}

impl Manifest {
    fn stage(&mut self, line: &str) -> CliResult<()> {
        self.text.push_str(line);
        self.text.push('\n');
        formats::write_text(&self.path, &self.text)
    }
}

fn point_rows(p: &PointResult) -> Vec<Vec<String>> {
    p.settings
        .iter()
        .flat_map(|s| {
            Bin::ALL.iter().flat_map(move |&a| {
                Bin::ALL.iter().map(move |&b| {
                    vec![
                        num(s.theta),
                        a.label().to_string(),
                        b.label().to_string(),
                        s.matrix[a.index()][b.index()].to_string(),
                    ]
                })
            })
        })
        .collect()
}

/// Full pipeline. Writes into `cfg.out_dir`: `MANIFEST` (stages reached),
/// `config.resolved`, `point_<k>.csv` (cells per setting), `visibility.csv`,
/// `rates.csv`, `summary.csv` and, for two or more mu values,
/// `extrapolation.csv`.
pub fn run_pipeline(cfg: &RunConfig, jobs: usize) -> CliResult<Report> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut manifest = Manifest {
        path: dir.join("MANIFEST"),
        text: format!("pairsim {}\nconfig {}\nseed {}\n", crate::VERSION, cfg.hash(), cfg.seed),
    };
    let result = pipeline_stages(cfg, jobs, dir, &mut manifest);
    match &result {
        Ok(_) => manifest.stage("complete")?,
        Err(e) => manifest.stage(&format!("failed: {e}"))?,
    }
    result
}

fn pipeline_stages(cfg: &RunConfig, jobs: usize, dir: &Path, manifest: &mut Manifest) -> CliResult<Report> {
    formats::write_text(&dir.join("config.resolved"), &cfg.canonical)?;
    manifest.stage("stage config")?;
    let delta = resolve_delta(cfg)?;
    manifest.stage(&format!("stage delta {}", num(delta)))?;
    let points = run_points(cfg, delta, jobs)?;
    let prov = Provenance {
        config_hash: cfg.hash(),
        seed: Some(cfg.seed),
    };
    for (k, p) in points.iter().enumerate() {
        let text = formats::csv_text(
            &prov,
            &[format!("mu={} duration_s={}", num(p.mu), num(p.duration_s))],
            &["theta", "alice_bin", "bob_bin", "count"],
            &point_rows(p),
        );
        formats::write_text(&dir.join(format!("point_{k}.csv")), &text)?;
    }
    manifest.stage(&format!("stage points {}", points.len()))?;
    let vis: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![num(p.mu), num(p.v_raw), num(p.v_raw_err), num(p.v_c)])
        .collect();
    formats::write_text(
        &dir.join("visibility.csv"),
        &formats::csv_text(&prov, &[], &["mu", "v_raw_pct", "v_raw_err_pct", "v_c_pct"], &vis),
    )?;
    let rates: Vec<Vec<String>> = points
        .iter()
        .map(|p| vec![num(p.mu), num(p.c_ab), num(p.c_n), num(p.c_i), num(p.skr)])
        .collect();
    formats::write_text(
        &dir.join("rates.csv"),
        &formats::csv_text(&prov, &[], &["mu", "c_ab_hz", "c_n_hz", "c_i_hz", "skr_hz"], &rates),
    )?;
    let summary: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                num(p.mu),
                num(p.delta),
                num(p.singles_a_hz),
                num(p.singles_b_hz),
                num(p.c_ab),
                num(p.v_raw),
                num(p.v_raw_err),
                num(p.v_c),
                num(p.e_n),
                num(p.e_i),
                num(p.c_n),
                num(p.c_i),
                num(p.skr),
                p.walk[0].label().to_string(),
                p.walk[1].label().to_string(),
                p.mle_converged.to_string(),
            ]
        })
        .collect();
    formats::write_text(
        &dir.join("summary.csv"),
        &formats::csv_text(
            &prov,
            &[],
            &[
                "mu",
                "delta",
                "singles_a_hz",
                "singles_b_hz",
                "c_ab_hz",
                "v_raw_pct",
                "v_raw_err_pct",
                "v_c_pct",
                "e_n",
                "e_i",
                "c_n_hz",
                "c_i_hz",
                "skr_hz",
                "walk_a",
                "walk_b",
                "mle_converged",
            ],
            &summary,
        ),
    )?;
    manifest.stage("stage summary")?;
    let extrapolation = if points.len() >= 2 {
        let fit = fit_extrapolation(cfg, &points)?;
        formats::write_text(&dir.join("extrapolation.csv"), &extrapolation_csv(&prov, &fit))?;
        manifest.stage("stage extrapolation")?;
        Some(fit)
    } else {
        None
    };
    Ok(Report {
        delta,
        points,
        extrapolation,
    })
}

pub fn extrapolation_csv(prov: &Provenance, fit: &ExtrapolationFit) -> String {
    let m = &fit.table.argmax;
    let comments = vec![
        format!(
            "v_fit={},{} e_n_fit={},{} e_i_fit={},{} baseline_mu={}",
            num(fit.visibility.0),
            num(fit.visibility.1),
            num(fit.e_n.0),
            num(fit.e_n.1),
            num(fit.e_i.0),
            num(fit.e_i.1),
            num(fit.baseline.mu)
        ),
        format!(
            "argmax c_ab={} c_n={} c_i={} skr={}",
            num(m.c_ab),
            num(m.c_n),
            num(m.c_i),
            num(m.skr)
        ),
    ];
    extrapolation_table_csv(prov, &comments, &fit.table)
}

pub fn extrapolation_table_csv(prov: &Provenance, comments: &[String], t: &Extrapolation) -> String {
    let rows: Vec<Vec<String>> = t
        .per_channel
        .iter()
        .zip(&t.total)
        .map(|(p, q)| {
            vec![
                num(p.mu),
                num(p.c_ab),
                num(p.c_n),
                num(p.c_i),
                num(p.skr),
                num(q.c_ab),
                num(q.c_n),
                num(q.c_i),
                num(q.skr),
            ]
        })
        .collect();
    formats::csv_text(
        prov,
        comments,
        &[
            "mu",
            "c_ab_hz",
            "c_n_hz",
            "c_i_hz",
            "skr_hz",
            "total_c_ab_hz",
            "total_c_n_hz",
            "total_c_i_hz",
            "total_skr_hz",
        ],
        &rows,
    )
}
