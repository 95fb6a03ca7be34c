use pairsim::config::*;
use pairsim::CliError;

const MINIMAL: &str = "seed = 4\nout_dir = out\nduration_s = 0.01\nmu = 1e-3, 5e-3\n";

fn usage(text: &str) -> String {
    match RunConfig::parse(text) {
        Err(e @ CliError::Usage(_)) => {
            assert_eq!(e.exit_code(), 2);
            e.to_string()
        }
        other => panic!("expected usage error, got {other:?}"),
    }
}

#[test]
fn minimal_config_takes_defaults() {
    let c = RunConfig::parse(MINIMAL).unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.mu, vec![1e-3, 5e-3]);
    assert_eq!(c.delta, DeltaSetting::Value(0.393));
    assert_eq!((c.eta_a, c.eta_b), (0.2, 0.2));
    assert_eq!(
        (c.imbalance_source, c.imbalance_alice, c.imbalance_bob),
        (1.13, 1.24, 1.15)
    );
    assert_eq!(c.rep_rate_hz, 4.09e9);
    assert_eq!(c.jitter_ps, 13.0);
    assert_eq!(c.rate_3db_hz, 15.5e6);
    assert_eq!((c.window_ps, c.guard_ps), (100.0, 10.0));
    assert_eq!(c.walk_correction, WalkMode::Auto);
    assert_eq!((c.alice_channel, c.bob_channel), (38, 56));
    assert_eq!(c.canonical.lines().count(), KEYS.len());
}

#[test]
fn every_key_has_a_description() {
    for (k, _, doc) in KEYS {
        assert!(!doc.is_empty(), "{k}");
    }
}

#[test]
fn missing_required_key_is_named() {
    for key in ["seed", "out_dir", "duration_s", "mu"] {
        let text: String = MINIMAL
            .lines()
            .filter(|l| !l.starts_with(key))
            .map(|l| format!("{l}\n"))
            .collect();
        let msg = usage(&text);
        assert!(msg.contains(&format!("`{key}`")), "{msg}");
    }
}

#[test]
fn unknown_duplicate_and_malformed_lines() {
    assert!(usage(&format!("{MINIMAL}colour = red\n")).contains("unknown key `colour`"));
    assert!(usage(&format!("{MINIMAL}seed = 5\n")).contains("duplicate key `seed`"));
    assert!(usage(&format!("{MINIMAL}jitter_ps\n")).contains("line 5"));
    assert!(usage(&format!("{MINIMAL}jitter_ps = fast\n")).contains("jitter_ps"));
    assert!(usage(&format!("{MINIMAL}walk_correction = maybe\n")).contains("walk_correction"));
    assert!(usage(&MINIMAL.replace("mu = 1e-3, 5e-3", "mu = 0.7")).contains("mu"));
    assert!(usage(&MINIMAL.replace("0.01", "0")).contains("duration_s"));
    assert!(usage(&format!("{MINIMAL}imbalance_bob = 0.9\n")).contains("imbalance_bob"));
}

#[test]
fn comments_and_scientific_integers() {
    let c = RunConfig::parse(&format!(
        "# sweep\n{MINIMAL}channel_count = 1.6e1 # sixteen\ndelta = model\n"
    ))
    .unwrap();
    assert_eq!(c.channel_count, 16);
    assert_eq!(c.delta, DeltaSetting::Model);
    assert_eq!(parse_u64("k", "1e6").unwrap(), 1_000_000);
    assert!(parse_u64("k", "1.5").is_err());
    assert!(parse_u64("k", "-1").is_err());
    assert_eq!(parse_i64("k", "-2e1").unwrap(), -20);
    assert!(parse_f64("k", "inf").is_err());
}

#[test]
fn hash_depends_on_resolved_values_only() {
    let a = RunConfig::parse(MINIMAL).unwrap();
    let b =
        RunConfig::parse("# reordered\nmu = 1e-3, 5e-3\nduration_s = 0.01\nout_dir = out\nseed = 4\njitter_ps = 13\n")
            .unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = RunConfig::parse(&format!("{MINIMAL}jitter_ps = 14\n")).unwrap();
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn substreams_are_distinct_and_stable() {
    let a = substream(1, "simulate mu=5e-3 setting=0");
    assert_eq!(a, substream(1, "simulate mu=5e-3 setting=0"));
    assert_ne!(a, substream(1, "simulate mu=5e-3 setting=1"));
    assert_ne!(a, substream(2, "simulate mu=5e-3 setting=0"));
}

#[test]
fn derived_models_follow_config() {
    let c = RunConfig::parse(&format!("{MINIMAL}rate_3db_hz = 0\nfilter_fwhm_ghz = 41\n")).unwrap();
    assert!(c.saturation().is_none());
    let (signal, idler) = c.filters();
    assert_eq!((signal.itu_channel, idler.itu_channel), (Some(56), Some(38)));
    assert_eq!(signal.fwhm_hz, 41e9);
    let sc = c.scenario(5e-3, 0.393, 9);
    assert_eq!(sc.mu, 5e-3);
    assert_eq!(sc.delta, 0.393);
}
