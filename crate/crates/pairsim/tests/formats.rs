use num_complex::Complex64;
use pairsim::formats::*;
use pairsim_core::timewalk::{WalkTable, YBins};
use pairsim_core::tomography::{canonical_projectors, werner, TomoCounts};
use pairsim_core::TimeTag;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tags(n: usize, seed: u64) -> Vec<TimeTag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0u64;
    (0..n)
        .map(|_| {
            t += rng.random_range(1..500_000u64);
            TimeTag::new(rng.random_range(0..=255u8), t)
        })
        .collect()
}

fn ttg_bytes(tags: &[TimeTag]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_ttg(&mut buf, tags).unwrap();
    buf
}

#[test]
fn ttg_million_records_round_trip_hash_identical() {
    let tags = random_tags(1_000_000, 7);
    let bytes = ttg_bytes(&tags);
    assert_eq!(bytes.len(), 16 + 9 * 1_000_000);
    let back = read_ttg(bytes.as_slice()).unwrap();
    assert_eq!(back, tags);
    assert_eq!(sha256_hex(&ttg_bytes(&back)), sha256_hex(&bytes));
}

#[test]
fn ttg_layout_is_little_endian() {
    let bytes = ttg_bytes(&[TimeTag::new(3, 0x0102_0304_0506_0708)]);
    assert_eq!(&bytes[..8], b"PAIRTTG1");
    assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
    assert_eq!(bytes[16], 3);
    assert_eq!(&bytes[17..], &[8, 7, 6, 5, 4, 3, 2, 1]);
}

#[test]
fn ttg_errors_carry_offsets() {
    let good = ttg_bytes(&random_tags(10, 1));
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(read_ttg(bad.as_slice()).unwrap_err().offset, 0);
    assert_eq!(read_ttg(&good[..12]).unwrap_err().offset, 12);
    let e = read_ttg(&good[..16 + 9 * 4 + 5]).unwrap_err();
    assert_eq!(e.offset, 16 + 9 * 4 + 5);
    let mut long = good.clone();
    long.push(0);
    assert_eq!(read_ttg(long.as_slice()).unwrap_err().offset, 16 + 9 * 10);
    assert!(read_ttg(&[][..]).is_err());
}

#[test]
fn stream_files_choose_format_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let tags = random_tags(500, 2);
    for name in ["s.ttg", "s.csv", "s.CSV", "s"] {
        let p = dir.path().join(name);
        save_stream(&p, &tags).unwrap();
        assert_eq!(load_stream(&p).unwrap(), tags, "{name}");
    }
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(text.starts_with("channel,time_ps\n"));
    assert_eq!(std::fs::read(dir.path().join("s")).unwrap(), ttg_bytes(&tags));
}

#[test]
fn tag_csv_rejects_bad_rows() {
    assert!(read_tags_csv("time,channel\n1,2\n".as_bytes()).is_err());
    let e = read_tags_csv("channel,time_ps\n1,2\n300,4\n".as_bytes()).unwrap_err();
    assert!(e.contains("line 3"), "{e}");
    assert!(read_tags_csv("channel,time_ps\n1,-2\n".as_bytes()).is_err());
    let ok = read_tags_csv("# note\nchannel,time_ps\n1, 2\n".as_bytes()).unwrap();
    assert_eq!(ok, vec![TimeTag::new(1, 2)]);
}

#[test]
fn merge_and_channel_split() {
    let a = vec![TimeTag::new(1, 5), TimeTag::new(1, 20)];
    let b = vec![TimeTag::new(2, 5), TimeTag::new(2, 10)];
    let m = merge_streams(&a, &b);
    assert_eq!(m.iter().map(|t| t.time_ps).collect::<Vec<_>>(), vec![5, 5, 10, 20]);
    assert_eq!(channel(&m, 1), a);
    assert_eq!(channel(&m, 2), b);
}

#[test]
fn provenance_comment_and_csv() {
    let p = Provenance::new("seed = 1\n", Some(1));
    assert_eq!(p.config_hash, sha256_hex(b"seed = 1\n"));
    assert!(p.comment().starts_with("# pairsim "));
    assert!(p.comment().ends_with(&format!("config={} seed=1\n", p.config_hash)));
    assert!(Provenance::new("", None).comment().ends_with("seed=none\n"));
    let t = csv_text(&p, &["k=v".into()], &["a", "b"], &[vec!["1".into(), "2".into()]]);
    let lines: Vec<_> = t.lines().collect();
    assert_eq!(lines[1], "# k=v");
    assert_eq!(&lines[2..], ["a,b", "1,2"]);
}

#[test]
fn walk_table_round_trip() {
    for y in [
        YBins::default(),
        YBins::Linear {
            lo_ps: 2e4,
            hi_ps: 2e5,
            rows: 50,
        },
    ] {
        let mut t = WalkTable::zero(y.edges().unwrap(), 5e5);
        for (k, d) in t.correction_ps.iter_mut().enumerate() {
            *d = 30.0 * (-(k as f64) / 17.0).exp() + 0.1 * k as f64;
        }
        let text = walk_table_csv(&Provenance::new("x", None), &t, 244.4988, 1.0, &y);
        let back = parse_walk_table(&text).unwrap();
        assert_eq!(back.t_prime_edges, t.t_prime_edges);
        assert_eq!(back.correction_ps, t.correction_ps);
        assert_eq!(back.valid_below, t.valid_below);
    }
}

#[test]
fn walk_table_rejects_mismatched_rows() {
    let y = YBins::Linear {
        lo_ps: 0.0,
        hi_ps: 10.0,
        rows: 2,
    };
    let t = WalkTable::zero(y.edges().unwrap(), 10.0);
    let text = walk_table_csv(&Provenance::new("", None), &t, 244.0, 1.0, &y);
    assert!(parse_walk_table(&text.replace("count=2", "count=3")).is_err());
    assert!(parse_walk_table(&text.replace("rows=linear", "rows=cubic")).is_err());
    assert!(parse_walk_table(&text.replace("\n2.5,", "\n3.5,")).is_err());
}

#[test]
fn density_round_trip() {
    let mut rho = werner(0.9);
    rho[(0, 3)] = Complex64::new(0.4, -0.1 / 3.0);
    rho[(3, 0)] = rho[(0, 3)].conj();
    let text = density_csv(&Provenance::new("", None), &rho);
    assert_eq!(parse_density(&text).unwrap(), rho);
    let dup = text.replacen("0,1,", "0,0,", 1);
    assert!(parse_density(&dup).is_err());
    let short: String = text
        .lines()
        .take(text.lines().count() - 1)
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(parse_density(&short).is_err());
}

#[test]
fn tomo_counts_round_trip() {
    let counts = TomoCounts::expected(&werner(0.95), &canonical_projectors(), 12345.0);
    let back = parse_tomo_counts(&tomo_counts_text(&counts)).unwrap();
    assert_eq!(back.entries.len(), counts.entries.len());
    for (a, b) in back.entries.iter().zip(&counts.entries) {
        assert_eq!(a.projector, b.projector);
        assert_eq!(a.count, b.count);
    }
    let parsed = parse_tomo_counts("# header\ne, l = 3\n-i,+ = 4 # tail\n").unwrap();
    assert_eq!(parsed.entries.len(), 2);
    assert!(parse_tomo_counts("e,x = 1").unwrap_err().contains("line 1"));
    assert!(parse_tomo_counts("e l = 1").is_err());
    assert!(parse_tomo_counts("e,l = many").is_err());
}

#[test]
fn rate_data_and_filter_curve() {
    let d = parse_rate_data("a\\b,56,57\n38,100,\n39,,5.5\n", "channel,hz\nA38,1e6\nB56,2e6\n").unwrap();
    assert_eq!(d.coincidences.len(), 2);
    assert_eq!(d.coincidences[&(39, 57)], 5.5);
    assert_eq!(d.singles.len(), 2);
    assert!(parse_rate_data("x,56\n38,1\n", "channel,hz\nC38,1\n").is_err());
    let c = parse_filter_curve("frequency_hz,transmission\n1e14,0.5\n").unwrap();
    assert_eq!(c, vec![(1e14, 0.5)]);
    assert!(parse_filter_curve("f,t\n1,2\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ttg_round_trip_any(tags in prop::collection::vec((any::<u8>(), any::<u64>()), 0..200)) {
        let tags: Vec<TimeTag> = tags.into_iter().map(|(c, t)| TimeTag::new(c, t)).collect();
        let bytes = ttg_bytes(&tags);
        prop_assert_eq!(read_ttg(bytes.as_slice()).unwrap(), tags);
    }

    #[test]
    fn ttg_truncation_always_errors(n in 1usize..50, cut in 1usize..1000) {
        let bytes = ttg_bytes(&random_tags(n, n as u64));
        let cut = cut % bytes.len();
        let e = read_ttg(&bytes[..cut]).unwrap_err();
        prop_assert!(e.offset <= cut as u64);
    }
}
