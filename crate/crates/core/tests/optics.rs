use pairsim_core::optics::*;

// Reference values from an independent NumPy evaluation of the same model
// (trapezoid integration, full SVD), T = 229 C.
const N_229: [(f64, f64); 3] = [
    (769.78, 2.244629007459017),
    (1530.33, 2.202801241257601),
    (1549.32, 2.2022466432806667),
];
// (alice, bob, delta given signal, delta given idler, 1/K at 82 GHz, 1/K at 41 GHz)
const PAIRS_229: [(i32, i32, f64, f64, f64, f64); 3] = [
    (35, 59, 0.38930887847786527, 0.38847407199759093, 0.8631, 0.9608),
    (38, 56, 0.3891893816717383, 0.3885692462272595, 0.8629, 0.9607),
    (42, 52, 0.3890226730716926, 0.3886811757816484, 0.8627, 0.9606),
];

#[test]
fn refractive_index_matches_reference() {
    let c = CrystalSpec::reference();
    for (l, n) in N_229 {
        assert!((refractive_index(l, &c).unwrap() - n).abs() < 1e-12);
    }
    let room = CrystalSpec {
        temperature_c: 24.5,
        ..c
    };
    assert!((refractive_index(1550.0, &room).unwrap() - 2.1305703312029918).abs() < 1e-12);
}

#[test]
fn phase_mismatch_matches_reference() {
    let c = CrystalSpec::reference();
    assert!((phase_mismatch(1530.33, 1549.32, &c).unwrap() - 162.78993207452862).abs() < 1e-6);
    assert!((phase_mismatch(1539.56, 1539.56, &c).unwrap() - 274.2189528403491).abs() < 1e-6);
}

#[test]
fn wavelength_domain_is_checked() {
    let c = CrystalSpec::reference();
    assert!(matches!(
        refractive_index(250.0, &c),
        Err(pairsim_core::Error::Domain(_))
    ));
    assert!(matches!(
        refractive_index(6000.0, &c),
        Err(pairsim_core::Error::Domain(_))
    ));
}

#[test]
fn temperature_outside_range_is_rejected() {
    assert!(CrystalSpec::new(0.01, 18.3e-6, 301.0).is_err());
    assert!(CrystalSpec::new(0.01, 18.3e-6, -1.0).is_err());
    assert!(CrystalSpec::new(0.01, 18.3e-6, 229.0).is_ok());
}

#[test]
fn jsi_peak_is_brightness_at_phase_matching() {
    let model = JsiModel {
        brightness: 3.5,
        ..JsiModel::reference()
    };
    let v = model.intensity(1539.56, 1539.56).unwrap();
    assert!(v > 0.0 && v <= 3.5);
}

#[test]
fn delta_and_schmidt_match_reference() {
    let model = JsiModel::reference();
    let spec = GridSpec::default();
    for (a, b, dsig, didl, ik82, ik41) in PAIRS_229 {
        let (v, u) = (FilterSpec::dwdm(a), FilterSpec::dwdm(b));
        let d = delta_for_pair(&model, &u, &v, &spec).unwrap();
        assert!((d.given_signal - dsig).abs() < 1e-4, "{a}/{b}: {}", d.given_signal);
        assert!((d.given_idler - didl).abs() < 1e-4, "{a}/{b}: {}", d.given_idler);
        let g = spec.pair_grid(&model, &u, &v).unwrap();
        let k = schmidt_decompose(&u, &v, &g, SchmidtMode::Intensity).unwrap();
        assert!((k.inverse_k - ik82).abs() < 1e-4, "{a}/{b}: {}", k.inverse_k);
        let (v2, u2) = (FilterSpec::itu(a, 41e9, 3, 1.0), FilterSpec::itu(b, 41e9, 3, 1.0));
        let g2 = spec.pair_grid(&model, &u2, &v2).unwrap();
        let k2 = schmidt_decompose(&u2, &v2, &g2, SchmidtMode::Intensity).unwrap();
        assert!((k2.inverse_k - ik41).abs() < 1e-4, "{a}/{b}: {}", k2.inverse_k);
    }
}

#[test]
fn clipped_passband_is_a_coverage_error() {
    let model = JsiModel::reference();
    let f = FilterSpec::dwdm(38);
    let lo = hz_to_nm(f.center_hz + 20e9);
    let hi = hz_to_nm(f.center_hz - 300e9);
    let g = JsiGrid::build(&model, (1525.0, 1535.0), 64, (lo, hi), 64).unwrap();
    assert!(matches!(
        singles_integral(&f, Arm::Idler, &g),
        Err(pairsim_core::Error::Coverage(_))
    ));
}

#[test]
fn all_pass_filter_integrates_whole_grid() {
    let model = JsiModel::reference();
    let g = JsiGrid::build(&model, (1528.0, 1532.0), 80, (1547.0, 1551.0), 90).unwrap();
    let wide = FilterSpec::super_gaussian(195.9e12, 1e18, 1, 1.0);
    let s = singles_integral(&wide, Arm::Signal, &g).unwrap();
    let ts = pairsim_core::math::trapezoid_weights(&g.signal_nm);
    let ti = pairsim_core::math::trapezoid_weights(&g.idler_nm);
    let mut total = 0.0;
    for (a, wa) in ts.iter().enumerate() {
        for (b, wb) in ti.iter().enumerate() {
            total += wa * wb * g.at(a, b);
        }
    }
    assert!((s - total).abs() <= 1e-9 * total);
}

#[test]
fn grid_below_minimum_resolution_is_rejected() {
    let model = JsiModel::reference();
    assert!(JsiGrid::build(&model, (1528.0, 1532.0), 32, (1547.0, 1551.0), 64).is_err());
}
