use num_complex::Complex64;
use pairsim_core::tomography::*;
use pairsim_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use std::f64::consts::PI;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn poisson(counts: &TomoCounts, rng: &mut ChaCha8Rng) -> TomoCounts {
    let mut out = counts.clone();
    for e in &mut out.entries {
        e.count = if e.count > 0.0 {
            Poisson::new(e.count).unwrap().sample(rng)
        } else {
            0.0
        };
    }
    out
}

/// Ginibre-distributed state of rank `k`.
fn random_state(rng: &mut impl Rng, k: usize) -> C4 {
    let g = nalgebra::DMatrix::<Complex64>::from_fn(4, k, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let m = &g * g.adjoint();
    let mut r = C4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            r[(i, j)] = m[(i, j)];
        }
    }
    let t = trace(&r);
    r / c(t)
}

fn random_unitary2(rng: &mut impl Rng) -> nalgebra::Matrix2<Complex64> {
    let (a, b, g): (f64, f64, f64) = (
        rng.random::<f64>() * 2.0 * PI,
        rng.random::<f64>() * 2.0 * PI,
        rng.random::<f64>() * PI,
    );
    let (s, co) = (g.sin(), g.cos());
    nalgebra::Matrix2::new(
        Complex64::from_polar(co, a),
        Complex64::from_polar(s, b),
        -Complex64::from_polar(s, -b),
        Complex64::from_polar(co, -a),
    )
}

fn kron(a: &nalgebra::Matrix2<Complex64>, b: &nalgebra::Matrix2<Complex64>) -> C4 {
    C4::from_fn(|i, j| a[(i / 2, j / 2)] * b[(i % 2, j % 2)])
}

#[test]
fn bell_state_measures() {
    let phi = pure(&phi_plus());
    assert!((log_negativity(&phi) - 1.0).abs() < 1e-9);
    assert!((coherent_information(&phi) - 1.0).abs() < 1e-9);
    let mixed = werner(0.0);
    assert!(log_negativity(&mixed).abs() < 1e-9);
    assert!((coherent_information(&mixed) + 1.0).abs() < 1e-9);
}

#[test]
fn product_state_has_no_coherent_information() {
    let psi = Projector::new(Qubit::PLUS, Qubit::Late).ket();
    let r = pure(&psi);
    assert!(coherent_information(&r).abs() < 1e-9);
    assert!(log_negativity(&r).abs() < 1e-9);
}

#[test]
fn noiseless_bell_counts_reconstruct() {
    let counts = TomoCounts::expected(&pure(&phi_plus()), &canonical_projectors(), 1e6);
    let r = mle_reconstruct(&counts, &MleOptions::default()).unwrap();
    assert!(fidelity_pure(&r.rho, &phi_plus()) >= 1.0 - 1e-8);
    validate_density(&r.rho).unwrap();
}

#[test]
fn mixed_counts_reconstruct_mixed() {
    let counts = TomoCounts::expected(&werner(0.0), &canonical_projectors(), 1e6);
    let r = mle_reconstruct(&counts, &MleOptions::default()).unwrap();
    assert!((r.rho - werner(0.0)).norm() < 1e-6);
}

#[test]
fn likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let counts = poisson(
        &TomoCounts::expected(&werner(0.9), &canonical_projectors(), 1e5),
        &mut rng,
    );
    let r = mle_reconstruct(&counts, &MleOptions::default()).unwrap();
    for w in r.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    validate_density(&r.rho).unwrap();
}

#[test]
fn dephased_state_round_trip() {
    let v = 0.99;
    let mut target = C4::zeros();
    target[(0, 0)] = c(0.5);
    target[(3, 3)] = c(0.5);
    target[(0, 3)] = c(v / 2.0);
    target[(3, 0)] = c(v / 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let counts = poisson(&TomoCounts::expected(&target, &canonical_projectors(), 1e6), &mut rng);
    let r = mle_reconstruct(&counts, &MleOptions::default()).unwrap();
    assert!(fidelity(&r.rho, &target) >= 0.999);
}

#[test]
fn chi_square_on_overcomplete_data() {
    let q = [
        Qubit::Early,
        Qubit::Late,
        Qubit::Phase(0.0),
        Qubit::Phase(PI / 2.0),
        Qubit::Phase(PI),
        Qubit::Phase(3.0 * PI / 2.0),
    ];
    let proj: Vec<Projector> = q
        .iter()
        .flat_map(|&a| q.iter().map(move |&b| Projector::new(a, b)))
        .collect();
    assert_eq!(gram_rank(&proj), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let target = random_state(&mut rng, 4);
    let mut stats = Vec::new();
    for _ in 0..20 {
        let counts = poisson(&TomoCounts::expected(&target, &proj, 1e6), &mut rng);
        let r = mle_reconstruct(&counts, &MleOptions::default()).unwrap();
        let fit = TomoCounts::expected(&r.rho, &proj, counts.total());
        let chi: f64 = counts
            .entries
            .iter()
            .zip(&fit.entries)
            .map(|(o, e)| (o.count - e.count).powi(2) / e.count)
            .sum();
        stats.push(chi / (36.0 - 16.0));
    }
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    assert!((0.5..=2.0).contains(&mean), "{mean}");
}

#[test]
fn incomplete_set_rejected() {
    let proj: Vec<Projector> = canonical_projectors().into_iter().take(12).collect();
    let counts = TomoCounts::expected(&werner(0.5), &proj, 1e3);
    assert!(matches!(
        mle_reconstruct(&counts, &MleOptions::default()),
        Err(Error::Degenerate(_))
    ));
}

/// Cells at total phase `theta`, applied on Bob's side.
fn setting(rho: &C4, theta: f64, scale: f64, duration: f64) -> PhaseSetting {
    let q = |bin: usize, phase: f64| match bin {
        0 => Qubit::Early,
        1 => Qubit::Phase(phase),
        _ => Qubit::Late,
    };
    let mut m = [[0.0; 3]; 3];
    for (x, row) in m.iter_mut().enumerate() {
        for (y, v) in row.iter_mut().enumerate() {
            let p = Projector::new(q(x, 0.0), q(y, theta));
            *v = scale * duration * p.weight() * expectation(rho, &p.matrix());
        }
    }
    PhaseSetting {
        theta,
        matrix: m,
        duration_s: duration,
    }
}

#[test]
fn assembled_bell_counts() {
    let rho = pure(&phi_plus());
    let s = [
        setting(&rho, PI, 1e5, 1.0),
        setting(&rho, PI / 2.0, 1e5, 2.0),
        setting(&rho, 0.0, 1e5, 0.5),
    ];
    let counts = assemble_counts(&s).unwrap();
    assert_eq!(counts.entries.len(), 16);
    let get = |l: &str| counts.entries.iter().find(|e| e.projector.label() == l).unwrap().count;
    // rescaled to the shortest (0.5 s) setting
    assert!((get("e,e") - 1e5 * 0.5 * 0.5).abs() < 1e-6);
    assert!(get("e,l").abs() < 1e-9);
    assert!(get("+,+") > get("+,+i"));
    assert!(get("+i,+i") < 1e-9);
    let r = mle_reconstruct(&counts, &MleOptions::default()).unwrap();
    assert!(fidelity_pure(&r.rho, &phi_plus()) > 1.0 - 1e-8);
}

#[test]
fn assembly_errors() {
    let rho = werner(0.5);
    let s = [setting(&rho, PI, 1.0, 1.0), setting(&rho, 0.0, 1.0, 1.0)];
    assert!(matches!(assemble_counts(&s), Err(Error::Config(_))));
    let s = [
        setting(&rho, PI, 1.0, 1.0),
        setting(&rho, PI / 2.0, 1.0, 1.0),
        setting(&rho, 0.0, 1.0, 0.0),
    ];
    assert!(assemble_counts(&s).is_err());
}

#[test]
fn entangled_rate_examples() {
    let r = entangled_rates(&pure(&phi_plus()), 1e6, 1.0).unwrap();
    assert!((r.c_n - 1e6).abs() < 1e-3);
    assert!((r.skr - 0.81e6).abs() < 1e-6);
    let r = entangled_rates(&werner(0.0), 1e6, 0.5).unwrap();
    assert_eq!(r.c_i, 0.0);
    assert!(r.c_i <= r.c_n + 1e-9);
}

#[test]
fn log_negativity_local_unitary_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let rho = random_state(&mut rng, 2);
        let u = kron(&random_unitary2(&mut rng), &random_unitary2(&mut rng));
        let r2 = u * rho * u.adjoint();
        assert!((log_negativity(&rho) - log_negativity(&r2)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn coherent_information_below_log_negativity(seed in any::<u64>(), rank in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = random_state(&mut rng, rank);
        prop_assert!(coherent_information(&rho) <= log_negativity(&rho) + 1e-9);
    }
}
