//! Two-qubit time-bin tomography: count assembly from three phase
//! settings, maximum-likelihood reconstruction and entanglement measures.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64;

use crate::error::{bail, Result};
use crate::math;
use crate::rates::{secret_key_rate, DEFAULT_F_EC, DEFAULT_SIFT_Q};
use crate::Bin;

pub type C4 = Matrix4<Complex64>;

const PI: f64 = core::f64::consts::PI;

/// Single-qubit projection direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Qubit {
    Early,
    Late,
    /// `(|e> + e^{i phase}|l>)/sqrt 2`.
    Phase(f64),
}

impl Qubit {
    pub const PLUS: Qubit = Qubit::Phase(0.0);
    pub const PLUS_I: Qubit = Qubit::Phase(PI / 2.0);

    pub fn ket(&self) -> [Complex64; 2] {
        match *self {
            Qubit::Early => [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
            Qubit::Late => [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
            Qubit::Phase(p) => {
                let s = core::f64::consts::FRAC_1_SQRT_2;
                [Complex64::new(s, 0.0), Complex64::from_polar(s, p)]
            }
        }
    }

    /// Detection weight of this projection at one analyzer: timing bins
    /// catch a quarter of the photon, the middle bin half.
    pub fn weight(&self) -> f64 {
        match self {
            Qubit::Early | Qubit::Late => 1.0,
            Qubit::Phase(_) => 2.0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Qubit::Early => "e".into(),
            Qubit::Late => "l".into(),
            Qubit::Phase(p) => {
                let q = p / (PI / 2.0);
                let k = math::round(q);
                if (q - k).abs() < 1e-9 {
                    match (k as i64).rem_euclid(4) {
                        0 => "+".into(),
                        1 => "+i".into(),
                        2 => "-".into(),
                        _ => "-i".into(),
                    }
                } else {
                    alloc::format!("p{p:.4}")
                }
            }
        }
    }
}

/// Product projector `|a><a| (x) |b><b|` with its relative detection weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projector {
    pub alice: Qubit,
    pub bob: Qubit,
}

impl Projector {
    pub fn new(alice: Qubit, bob: Qubit) -> Self {
        Self { alice, bob }
    }

    pub fn ket(&self) -> Vector4<Complex64> {
        let a = self.alice.ket();
        let b = self.bob.ket();
        Vector4::new(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
    }

    pub fn matrix(&self) -> C4 {
        let k = self.ket();
        k * k.adjoint()
    }

    pub fn weight(&self) -> f64 {
        self.alice.weight() * self.bob.weight()
    }

    pub fn label(&self) -> String {
        let mut s = self.alice.label();
        s.push(',');
        s.push_str(&self.bob.label());
        s
    }
}

/// The 16 product projectors over `{e, l, +, +i}` for each qubit.
pub fn canonical_projectors() -> Vec<Projector> {
    let q = [Qubit::Early, Qubit::Late, Qubit::PLUS, Qubit::PLUS_I];
    let mut v = Vec::with_capacity(16);
    for a in q {
        for b in q {
            v.push(Projector::new(a, b));
        }
    }
    v
}

/// One tomography datum.
#[derive(Debug, Clone, PartialEq)]
pub struct TomoEntry {
    pub projector: Projector,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TomoCounts {
    pub entries: Vec<TomoEntry>,
}

impl TomoCounts {
    pub fn validate(&self) -> Result<()> {
        if self.entries.iter().any(|e| !(e.count >= 0.0)) {
            bail!(Domain, "counts must be >= 0");
        }
        if self.total() <= 0.0 {
            bail!(Degenerate, "no counts");
        }
        let p: Vec<Projector> = self.entries.iter().map(|e| e.projector).collect();
        if gram_rank(&p) < 16 {
            bail!(Degenerate, "projector set is not informationally complete");
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.count).sum()
    }

    /// Noiseless expected counts `scale * w_k * Tr(P_k rho)`, with `scale`
    /// chosen so the counts sum to `total`.
    pub fn expected(rho: &C4, projectors: &[Projector], total: f64) -> Self {
        let p: Vec<f64> = projectors
            .iter()
            .map(|pr| pr.weight() * expectation(rho, &pr.matrix()))
            .collect();
        let s: f64 = p.iter().sum();
        Self {
            entries: projectors
                .iter()
                .zip(p)
                .map(|(&projector, pk)| TomoEntry {
                    projector,
                    count: total * pk / s,
                })
                .collect(),
        }
    }
}

/// Rank of the Gram matrix of the projector set, as real vectors in the
/// 16-dimensional operator space.
pub fn gram_rank(projectors: &[Projector]) -> usize {
    let m = projectors.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(m, 16);
    for (r, p) in projectors.iter().enumerate() {
        let mm = p.matrix();
        // Hermitian basis coordinates: diagonal, Re and Im of the upper part
        let mut c = 0;
        for i in 0..4 {
            for j in i..4 {
                a[(r, c)] = mm[(i, j)].re;
                c += 1;
                if j > i {
                    a[(r, c)] = mm[(i, j)].im;
                    c += 1;
                }
            }
        }
    }
    let g = &a.transpose() * &a;
    let e = g.symmetric_eigen();
    let top = e.eigenvalues.iter().copied().fold(0.0, f64::max);
    e.eigenvalues.iter().filter(|&&v| v > 1e-10 * top.max(1e-300)).count()
}

/// Coincidence cells measured at one interferometer phase setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSetting {
    pub theta: f64,
    /// `[alice bin][bob bin]`, early/middle/late.
    pub matrix: [[f64; 3]; 3],
    pub duration_s: f64,
}

/// Build the 16-element count vector from the settings at total phase
/// pi, pi/2 and 0.
///
/// Timing-basis cells are averaged over all three settings. A middle bin
/// projects onto `+` at theta = 0 and `+i` at theta = pi/2; the middle-middle
/// cell at pi/2 is shared by `(+, +i)` and `(+i, +)`, and at pi it is read as
/// `(+i, +i)`. Counts are rescaled to the shortest duration.
pub fn assemble_counts(settings: &[PhaseSetting]) -> Result<TomoCounts> {
    let find = |theta: f64| {
        settings
            .iter()
            .find(|s| (math::rem_euclid(s.theta - theta + PI, 2.0 * PI) - PI).abs() < 1e-6)
    };
    let (Some(a), Some(b), Some(c)) = (find(PI), find(PI / 2.0), find(0.0)) else {
        bail!(Config, "need settings at theta = pi, pi/2 and 0");
    };
    for s in [a, b, c] {
        if !(s.duration_s > 0.0) {
            bail!(Config, "setting duration must be > 0");
        }
        if s.matrix.iter().flatten().any(|&v| !(v >= 0.0)) {
            bail!(Domain, "counts must be >= 0");
        }
    }
    let t = a.duration_s.min(b.duration_s).min(c.duration_s);
    let rate = |s: &PhaseSetting, x: Bin, y: Bin| s.matrix[x.index()][y.index()] * t / s.duration_s;
    let timing = |x: Bin, y: Bin| (rate(a, x, y) + rate(b, x, y) + rate(c, x, y)) / 3.0;
    let q = |x: Bin| match x {
        Bin::Early => Qubit::Early,
        Bin::Late => Qubit::Late,
        Bin::Middle => Qubit::PLUS,
    };
    let mut entries = Vec::with_capacity(16);
    let mut push = |alice, bob, count| {
        entries.push(TomoEntry {
            projector: Projector::new(alice, bob),
            count,
        })
    };
    for x in [Bin::Early, Bin::Late] {
        for y in [Bin::Early, Bin::Late] {
            push(q(x), q(y), timing(x, y));
        }
    }
    for x in [Bin::Early, Bin::Late] {
        push(q(x), Qubit::PLUS, rate(c, x, Bin::Middle));
        push(q(x), Qubit::PLUS_I, rate(b, x, Bin::Middle));
        push(Qubit::PLUS, q(x), rate(c, Bin::Middle, x));
        push(Qubit::PLUS_I, q(x), rate(b, Bin::Middle, x));
    }
    push(Qubit::PLUS, Qubit::PLUS, rate(c, Bin::Middle, Bin::Middle));
    push(Qubit::PLUS, Qubit::PLUS_I, rate(b, Bin::Middle, Bin::Middle));
    push(Qubit::PLUS_I, Qubit::PLUS, rate(b, Bin::Middle, Bin::Middle));
    push(Qubit::PLUS_I, Qubit::PLUS_I, rate(a, Bin::Middle, Bin::Middle));
    Ok(TomoCounts { entries })
}

pub fn expectation(rho: &C4, op: &C4) -> f64 {
    (rho * op).trace().re
}

pub fn trace(rho: &C4) -> f64 {
    rho.trace().re
}

fn hermitize(m: &C4) -> C4 {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Real eigenvalues and eigenvectors of a Hermitian matrix.
pub fn eigh(m: &C4) -> SymmetricEigen<Complex64, nalgebra::U4> {
    SymmetricEigen::new(hermitize(m))
}

fn map_spectrum(m: &C4, f: impl Fn(f64) -> f64) -> C4 {
    let e = eigh(m);
    let d = C4::from_diagonal(&e.eigenvalues.map(|v| Complex64::new(f(v), 0.0)));
    e.eigenvectors * d * e.eigenvectors.adjoint()
}

/// Project onto the PSD cone (clip negative eigenvalues) and renormalize.
pub fn project_psd(m: &C4) -> C4 {
    let p = map_spectrum(m, |v| v.max(0.0));
    let t = trace(&p);
    p / Complex64::new(t, 0.0)
}

pub fn trace_distance(a: &C4, b: &C4) -> f64 {
    0.5 * eigh(&(a - b)).eigenvalues.iter().map(|v| v.abs()).sum::<f64>()
}

/// Check the density-matrix invariants: Hermitian, unit trace, PSD.
pub fn validate_density(rho: &C4) -> Result<()> {
    let h = (rho - rho.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if h > 1e-12 {
        bail!(Domain, "not Hermitian ({h:e})");
    }
    if (trace(rho) - 1.0).abs() > 1e-12 {
        bail!(Domain, "trace {} != 1", trace(rho));
    }
    let min = eigh(rho).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        bail!(Domain, "negative eigenvalue {min:e}");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleOptions {
    pub max_iter: usize,
    /// Stop once the trace distance between iterates falls below this.
    pub tolerance: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub rho: C4,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood per iteration, starting with the mixed state.
    pub log_likelihood: Vec<f64>,
}

/// Maximum-likelihood reconstruction by the diluted `R rho R` iteration.
///
/// Unequal projector weights make `G = sum w_k P_k` differ from the
/// identity. The iteration runs on `sigma = G^1/2 rho G^1/2 / Tr(G rho)`,
/// for which the weighted projectors become a POVM, and maps back at the
/// end. Each step starts from plain `R rho R` and halves the dilution until
/// the likelihood does not decrease.
pub fn mle_reconstruct(counts: &TomoCounts, opts: &MleOptions) -> Result<MleResult> {
    counts.validate()?;
    let total = counts.total();
    let f: Vec<f64> = counts.entries.iter().map(|e| e.count / total).collect();
    let wp: Vec<C4> = counts
        .entries
        .iter()
        .map(|e| e.projector.matrix() * Complex64::new(e.projector.weight(), 0.0))
        .collect();
    let g = wp.iter().fold(C4::zeros(), |acc, p| acc + p);
    let gmin = eigh(&g).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(gmin > 0.0) {
        bail!(Degenerate, "projector weights do not span the state space");
    }
    let g_isqrt = map_spectrum(&g, |v| 1.0 / math::sqrt(v));
    let povm: Vec<C4> = wp.iter().map(|p| hermitize(&(g_isqrt * p * g_isqrt))).collect();

    let loglik = |s: &C4| -> f64 {
        f.iter()
            .zip(&povm)
            .filter(|(fk, _)| **fk > 0.0)
            .map(|(fk, e)| fk * math::ln(expectation(s, e).max(1e-300)))
            .sum()
    };
    let r_op = |s: &C4| -> C4 {
        f.iter().zip(&povm).fold(C4::zeros(), |acc, (fk, e)| {
            if *fk > 0.0 {
                acc + e * Complex64::new(fk / expectation(s, e).max(1e-300), 0.0)
            } else {
                acc
            }
        })
    };

    let id = C4::identity();
    // maximally mixed in the original frame
    let mut sigma = hermitize(&(g / Complex64::new(trace(&g), 0.0)));
    let mut ll = loglik(&sigma);
    let mut trace_ll = alloc::vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut eps = f64::INFINITY;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let r = r_op(&sigma);
        let mut step = eps;
        let mut next;
        loop {
            let k = if step.is_infinite() {
                r
            } else {
                (id + r * Complex64::new(step, 0.0)) / Complex64::new(1.0 + step, 0.0)
            };
            next = hermitize(&(k * sigma * k.adjoint()));
            next /= Complex64::new(trace(&next), 0.0);
            let nll = loglik(&next);
            if nll >= ll - 1e-15 * ll.abs() || step < 1e-6 {
                ll = nll;
                break;
            }
            step = if step.is_infinite() { 1.0 } else { step * 0.5 };
        }
        // let the dilution recover after a successful damped step
        eps = if step.is_infinite() { f64::INFINITY } else { step * 4.0 };
        trace_ll.push(ll);
        let d = trace_distance(&next, &sigma);
        sigma = next;
        if d < opts.tolerance {
            converged = true;
            break;
        }
    }
    let rho = g_isqrt * sigma * g_isqrt;
    let rho = project_psd(&hermitize(&rho));
    Ok(MleResult {
        rho,
        iterations,
        converged,
        log_likelihood: trace_ll,
    })
}

/// Partial transpose over the first (Alice) qubit.
pub fn partial_transpose_a(rho: &C4) -> C4 {
    let mut out = C4::zeros();
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                for d in 0..2 {
                    out[(2 * c + b, 2 * a + d)] = rho[(2 * a + b, 2 * c + d)];
                }
            }
        }
    }
    out
}

/// `log2 || rho^{T_A} ||_1`, bits.
pub fn log_negativity(rho: &C4) -> f64 {
    let n: f64 = eigh(&partial_transpose_a(rho))
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .sum();
    math::log2(n)
}

fn entropy_of(eigs: impl Iterator<Item = f64>) -> f64 {
    eigs.filter(|&v| v > 0.0).map(|v| -v * math::log2(v)).sum()
}

pub fn von_neumann_entropy(rho: &C4) -> f64 {
    entropy_of(eigh(rho).eigenvalues.iter().copied())
}

/// Reduced states `(rho_A, rho_B)` as 2x2 matrices.
pub fn reduced_states(rho: &C4) -> (nalgebra::Matrix2<Complex64>, nalgebra::Matrix2<Complex64>) {
    let mut ra = nalgebra::Matrix2::zeros();
    let mut rb = nalgebra::Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                ra[(i, j)] += rho[(2 * i + k, 2 * j + k)];
                rb[(i, j)] += rho[(2 * k + i, 2 * k + j)];
            }
        }
    }
    (ra, rb)
}

fn entropy2(m: &nalgebra::Matrix2<Complex64>) -> f64 {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    entropy_of(SymmetricEigen::new(h).eigenvalues.iter().copied())
}

/// Coherent information, the larger of the two directions, bits.
pub fn coherent_information(rho: &C4) -> f64 {
    let s = von_neumann_entropy(rho);
    let (ra, rb) = reduced_states(rho);
    (entropy2(&rb) - s).max(entropy2(&ra) - s)
}

/// Uhlmann fidelity `(Tr sqrt(sqrt(a) b sqrt(a)))^2`.
pub fn fidelity(a: &C4, b: &C4) -> f64 {
    let sa = map_spectrum(a, |v| math::sqrt(v.max(0.0)));
    let m = sa * b * sa;
    let t: f64 = eigh(&m).eigenvalues.iter().map(|v| math::sqrt(v.max(0.0))).sum();
    t * t
}

pub fn fidelity_pure(rho: &C4, psi: &Vector4<Complex64>) -> f64 {
    (psi.adjoint() * rho * psi)[(0, 0)].re
}

/// `(|ee> + |ll>)/sqrt 2`.
pub fn phi_plus() -> Vector4<Complex64> {
    let s = Complex64::new(core::f64::consts::FRAC_1_SQRT_2, 0.0);
    let z = Complex64::new(0.0, 0.0);
    Vector4::new(s, z, z, s)
}

pub fn pure(psi: &Vector4<Complex64>) -> C4 {
    psi * psi.adjoint()
}

/// `v |Phi+><Phi+| + (1 - v) I/4`.
pub fn werner(v: f64) -> C4 {
    pure(&phi_plus()) * Complex64::new(v, 0.0) + C4::identity() * Complex64::new((1.0 - v) / 4.0, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntanglementRates {
    pub c_ab: f64,
    pub e_n: f64,
    pub e_i: f64,
    /// `C_AB E_N`.
    pub c_n: f64,
    /// `C_AB max(0, E_I)`.
    pub c_i: f64,
    pub skr: f64,
}

pub fn entangled_rates(rho: &C4, c_ab: f64, visibility: f64) -> Result<EntanglementRates> {
    let e_n = log_negativity(rho);
    let e_i = coherent_information(rho);
    Ok(EntanglementRates {
        c_ab,
        e_n,
        e_i,
        c_n: c_ab * e_n,
        c_i: c_ab * e_i.max(0.0),
        skr: secret_key_rate(c_ab, visibility, DEFAULT_SIFT_Q, DEFAULT_F_EC)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_set_is_complete() {
        assert_eq!(gram_rank(&canonical_projectors()), 16);
        let three: Vec<Projector> = canonical_projectors().into_iter().take(12).collect();
        assert!(gram_rank(&three) < 16);
    }

    #[test]
    fn partial_transpose_is_involution() {
        let r = werner(0.7);
        assert!((partial_transpose_a(&partial_transpose_a(&r)) - r).norm() < 1e-15);
    }
}
