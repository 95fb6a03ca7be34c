//! On-disk formats: binary and CSV time-tag streams, walk tables, tomography
//! counts, density matrices, JSI grids and measured rate tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use pairsim_core::optics::{Channel, JsiGrid, RateData};
use pairsim_core::timewalk::{WalkTable, YBins};
use pairsim_core::tomography::{Projector, Qubit, TomoCounts, TomoEntry, C4};
use pairsim_core::TimeTag;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const TTG_MAGIC: &[u8; 8] = b"PAIRTTG1";
const TTG_HEADER: u64 = 16;
const TTG_RECORD: u64 = 9;

/// Malformed binary stream; `offset` is the byte where decoding failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("byte {offset}: {msg}")]
pub struct TtgError {
    pub offset: u64,
    pub msg: String,
}

pub fn write_ttg<W: Write>(mut w: W, tags: &[TimeTag]) -> std::io::Result<()> {
    w.write_all(TTG_MAGIC)?;
    w.write_all(&(tags.len() as u64).to_le_bytes())?;
    for t in tags {
        w.write_all(&[t.channel])?;
        w.write_all(&t.time_ps.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_ttg<R: Read>(mut r: R) -> Result<Vec<TimeTag>, TtgError> {
    let err = |offset: u64, msg: &str| TtgError {
        offset,
        msg: msg.to_string(),
    };
    let mut head = [0u8; 16];
    let got = read_full(&mut r, &mut head).map_err(|e| err(0, &e.to_string()))?;
    if got < 8 || &head[..8] != TTG_MAGIC {
        return Err(err(0, "bad magic, expected PAIRTTG1"));
    }
    if got < 16 {
        return Err(err(got as u64, "truncated record count"));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap());
    let mut out = Vec::with_capacity(n.min(1 << 28) as usize);
    let mut rec = [0u8; 9];
    for k in 0..n {
        let offset = TTG_HEADER + k * TTG_RECORD;
        let got = read_full(&mut r, &mut rec).map_err(|e| err(offset, &e.to_string()))?;
        if got < 9 {
            return Err(err(offset + got as u64, "truncated record"));
        }
        out.push(TimeTag::new(rec[0], u64::from_le_bytes(rec[1..].try_into().unwrap())));
    }
    let mut extra = [0u8; 1];
    if read_full(&mut r, &mut extra).map_err(|e| err(0, &e.to_string()))? > 0 {
        return Err(err(TTG_HEADER + n * TTG_RECORD, "trailing bytes after last record"));
    }
    Ok(out)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn write_tags_csv<W: Write>(w: W, tags: &[TimeTag]) -> csv::Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["channel", "time_ps"])?;
    for t in tags {
        c.write_record([t.channel.to_string(), t.time_ps.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

pub fn read_tags_csv<R: Read>(r: R) -> Result<Vec<TimeTag>, String> {
    let mut c = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = c.headers().map_err(|e| e.to_string())?.clone();
    if headers.len() != 2 || &headers[0] != "channel" || &headers[1] != "time_ps" {
        return Err("expected header `channel,time_ps`".into());
    }
    let mut out = Vec::new();
    for (k, row) in c.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let line = k + 2;
        let ch: u8 = row[0].trim().parse().map_err(|_| format!("line {line}: bad channel"))?;
        let t: u64 = row[1].trim().parse().map_err(|_| format!("line {line}: bad time"))?;
        out.push(TimeTag::new(ch, t));
    }
    Ok(out)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a stream, choosing CSV for `.csv` paths and the binary format
/// otherwise.
pub fn load_stream(path: &Path) -> CliResult<Vec<TimeTag>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let r = BufReader::new(f);
    if is_csv(path) {
        read_tags_csv(r).map_err(|m| CliError::format(path, m))
    } else {
        read_ttg(r).map_err(|e| CliError::format(path, e.to_string()))
    }
}

pub fn save_stream(path: &Path, tags: &[TimeTag]) -> CliResult<()> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let w = BufWriter::new(f);
    if is_csv(path) {
        write_tags_csv(w, tags).map_err(|e| CliError::format(path, e.to_string()))
    } else {
        write_ttg(w, tags).map_err(|e| CliError::io(path, e))
    }
}

/// Tags of one channel, in stream order.
pub fn channel(tags: &[TimeTag], ch: u8) -> Vec<TimeTag> {
    tags.iter().copied().filter(|t| t.channel == ch).collect()
}

/// Two sorted streams merged by time, ties by channel.
pub fn merge_streams(a: &[TimeTag], b: &[TimeTag]) -> Vec<TimeTag> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if (a[i].time_ps, a[i].channel) <= (b[j].time_ps, b[j].channel) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What every CSV records in its leading comment line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new(config_text: &str, seed: Option<u64>) -> Self {
        Self {
            config_hash: sha256_hex(config_text.as_bytes()),
            seed,
        }
    }

    pub fn comment(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# pairsim {} config={} seed={}\n",
            crate::VERSION,
            self.config_hash,
            seed
        )
    }
}

/// CSV text: provenance comment, extra comment lines, header, rows.
pub fn csv_text(prov: &Provenance, extra_comments: &[String], header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = prov.comment();
    for c in extra_comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"));
    out
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// `key=value` pairs from `#` comment lines.
fn comment_fields(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .flat_map(|l| l.split_whitespace())
        .filter_map(|tok| tok.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Data rows of a CSV with `#` comments, header checked against `header`.
fn csv_rows(text: &str, header: &[&str]) -> Result<Vec<Vec<f64>>, String> {
    let mut c = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let h = c.headers().map_err(|e| e.to_string())?.clone();
    if h.iter().collect::<Vec<_>>() != header {
        return Err(format!("expected header `{}`", header.join(",")));
    }
    let mut out = Vec::new();
    for (k, row) in c.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let vals: Result<Vec<f64>, _> = row.iter().map(|v| v.parse::<f64>()).collect();
        out.push(vals.map_err(|_| format!("data row {}: not a number", k + 1))?);
    }
    Ok(out)
}

fn ybins_fields(y: &YBins) -> String {
    match *y {
        YBins::Log { lo_ps, hi_ps, rows } => format!("rows=log lo_ps={} hi_ps={} count={rows}", num(lo_ps), num(hi_ps)),
        YBins::Linear { lo_ps, hi_ps, rows } => {
            format!("rows=linear lo_ps={} hi_ps={} count={rows}", num(lo_ps), num(hi_ps))
        }
    }
}

/// Two columns (row center, correction); comment lines carry the period,
/// column width and row layout so the table can be rebuilt exactly.
pub fn walk_table_csv(prov: &Provenance, table: &WalkTable, period_ps: f64, x_bin_ps: f64, y: &YBins) -> String {
    let rows: Vec<Vec<String>> = table
        .centers()
        .iter()
        .zip(&table.correction_ps)
        .map(|(c, d)| vec![num(*c), num(*d)])
        .collect();
    let comments = vec![
        format!(
            "period_ps={} x_bin_ps={} valid_below_ps={}",
            num(period_ps),
            num(x_bin_ps),
            num(table.valid_below)
        ),
        ybins_fields(y),
    ];
    csv_text(prov, &comments, &["t_prime_ps", "correction_ps"], &rows)
}

pub fn parse_walk_table(text: &str) -> Result<WalkTable, String> {
    let f = comment_fields(text);
    let get = |k: &str| -> Result<f64, String> {
        f.get(k)
            .ok_or_else(|| format!("missing `{k}` in comment header"))?
            .parse::<f64>()
            .map_err(|_| format!("bad `{k}`"))
    };
    let count = get("count")? as usize;
    let (lo_ps, hi_ps) = (get("lo_ps")?, get("hi_ps")?);
    let y = match f.get("rows").map(String::as_str) {
        Some("log") => YBins::Log {
            lo_ps,
            hi_ps,
            rows: count,
        },
        Some("linear") => YBins::Linear {
            lo_ps,
            hi_ps,
            rows: count,
        },
        _ => return Err("missing or unknown `rows` layout".into()),
    };
    let edges = y.edges().map_err(|e| e.to_string())?;
    let rows = csv_rows(text, &["t_prime_ps", "correction_ps"])?;
    if rows.len() != count {
        return Err(format!("{} rows, header says {count}", rows.len()));
    }
    let mut t = WalkTable::zero(edges, get("valid_below_ps")?);
    for (k, (c, r)) in t.centers().iter().zip(&rows).enumerate() {
        if (c - r[0]).abs() > 1e-6 * c.abs().max(1.0) {
            return Err(format!("row {}: center {} does not match layout", k + 1, r[0]));
        }
        t.correction_ps[k] = r[1];
    }
    Ok(t)
}

pub fn parse_qubit(s: &str) -> Option<Qubit> {
    use std::f64::consts::PI;
    Some(match s {
        "e" => Qubit::Early,
        "l" => Qubit::Late,
        "+" => Qubit::Phase(0.0),
        "+i" => Qubit::Phase(PI / 2.0),
        "-" => Qubit::Phase(PI),
        "-i" => Qubit::Phase(3.0 * PI / 2.0),
        _ => return None,
    })
}

/// `alice,bob = count` per line; `#` starts a comment.
pub fn parse_tomo_counts(text: &str) -> Result<TomoCounts, String> {
    let mut entries = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let n = k + 1;
        let (label, count) = line
            .split_once('=')
            .ok_or_else(|| format!("line {n}: expected `label = count`"))?;
        let (a, b) = label
            .trim()
            .split_once(',')
            .ok_or_else(|| format!("line {n}: label must be `a,b`"))?;
        let qa = parse_qubit(a.trim()).ok_or_else(|| format!("line {n}: unknown projector `{}`", a.trim()))?;
        let qb = parse_qubit(b.trim()).ok_or_else(|| format!("line {n}: unknown projector `{}`", b.trim()))?;
        let count: f64 = count.trim().parse().map_err(|_| format!("line {n}: bad count"))?;
        entries.push(TomoEntry {
            projector: Projector::new(qa, qb),
            count,
        });
    }
    Ok(TomoCounts { entries })
}

pub fn tomo_counts_text(counts: &TomoCounts) -> String {
    counts
        .entries
        .iter()
        .map(|e| format!("{} = {}\n", e.projector.label(), num(e.count)))
        .collect()
}

/// One row per element: `row,col,re,im`.
pub fn density_csv(prov: &Provenance, rho: &C4) -> String {
    let mut rows = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            let z = rho[(i, j)];
            rows.push(vec![i.to_string(), j.to_string(), num(z.re), num(z.im)]);
        }
    }
    csv_text(
        prov,
        &["basis=ee,el,le,ll".to_string()],
        &["row", "col", "re", "im"],
        &rows,
    )
}

pub fn parse_density(text: &str) -> Result<C4, String> {
    let rows = csv_rows(text, &["row", "col", "re", "im"])?;
    if rows.len() != 16 {
        return Err(format!("expected 16 elements, found {}", rows.len()));
    }
    let mut m = C4::zeros();
    let mut seen = [[false; 4]; 4];
    for r in rows {
        let (i, j) = (r[0] as usize, r[1] as usize);
        if i > 3 || j > 3 || r[0].fract() != 0.0 || r[1].fract() != 0.0 {
            return Err(format!("index ({}, {}) outside 0..4", r[0], r[1]));
        }
        if seen[i][j] {
            return Err(format!("element ({i}, {j}) given twice"));
        }
        seen[i][j] = true;
        m[(i, j)] = Complex64::new(r[2], r[3]);
    }
    Ok(m)
}

/// First row idler wavelengths, first column signal wavelengths, nm.
pub fn jsi_csv(grid: &JsiGrid) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["signal_nm\\idler_nm".to_string()];
    head.extend(grid.idler_nm.iter().map(|v| num(*v)));
    w.write_record(&head).expect("in-memory csv");
    let ni = grid.idler_nm.len();
    for (s, ls) in grid.signal_nm.iter().enumerate() {
        let mut row = vec![num(*ls)];
        row.extend(grid.intensity[s * ni..(s + 1) * ni].iter().map(|v| num(*v)));
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

pub fn parse_jsi(text: &str) -> Result<JsiGrid, String> {
    let mut c = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = c.records();
    let head = rows.next().ok_or("empty grid")?.map_err(|e| e.to_string())?;
    let idler: Result<Vec<f64>, _> = head.iter().skip(1).map(str::parse).collect();
    let idler_nm = idler.map_err(|_| "bad idler wavelength")?;
    let mut signal_nm = Vec::new();
    let mut intensity = Vec::new();
    for (k, row) in rows.enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        if row.len() != idler_nm.len() + 1 {
            return Err(format!(
                "row {}: {} columns, expected {}",
                k + 2,
                row.len(),
                idler_nm.len() + 1
            ));
        }
        let vals: Result<Vec<f64>, _> = row.iter().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|_| format!("row {}: not a number", k + 2))?;
        signal_nm.push(vals[0]);
        intensity.extend_from_slice(&vals[1..]);
    }
    let g = JsiGrid {
        signal_nm,
        idler_nm,
        intensity,
    };
    g.validate().map_err(|e| e.to_string())?;
    Ok(g)
}

/// Coincidence matrix (header row Bob channels, header column Alice
/// channels, Hz) plus a `channel,hz` singles file with Alice channels
/// prefixed `A` and Bob channels `B`.
pub fn parse_rate_data(matrix: &str, singles: &str) -> Result<RateData, String> {
    let mut data = RateData::default();
    let mut c = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(matrix.as_bytes());
    let mut rows = c.records();
    let head = rows.next().ok_or("empty rate matrix")?.map_err(|e| e.to_string())?;
    let bob: Result<Vec<i32>, _> = head.iter().skip(1).map(str::parse).collect();
    let bob = bob.map_err(|_| "bad Bob channel in header row")?;
    for row in rows {
        let row = row.map_err(|e| e.to_string())?;
        let a: i32 = row[0].parse().map_err(|_| format!("bad Alice channel `{}`", &row[0]))?;
        for (b, v) in bob.iter().zip(row.iter().skip(1)) {
            if v.is_empty() {
                continue;
            }
            let hz: f64 = v.parse().map_err(|_| format!("bad rate `{v}`"))?;
            data.coincidences.insert((a, *b), hz);
        }
    }
    let mut c = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(singles.as_bytes());
    for row in c.records() {
        let row = row.map_err(|e| e.to_string())?;
        let label = &row[0];
        let hz: f64 = row[1].parse().map_err(|_| format!("bad singles rate `{}`", &row[1]))?;
        let (arm, itu) = label.split_at(1);
        let itu: i32 = itu.parse().map_err(|_| format!("bad singles channel `{label}`"))?;
        let ch = match arm {
            "A" | "a" => Channel::alice(itu),
            "B" | "b" => Channel::bob(itu),
            _ => return Err(format!("singles channel `{label}` must start with A or B")),
        };
        data.singles.insert(ch, hz);
    }
    Ok(data)
}

/// `frequency_hz,transmission` samples.
pub fn parse_filter_curve(text: &str) -> Result<Vec<(f64, f64)>, String> {
    Ok(csv_rows(text, &["frequency_hz", "transmission"])?
        .into_iter()
        .map(|r| (r[0], r[1]))
        .collect())
}
