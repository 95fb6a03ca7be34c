//! Nelder–Mead simplex minimization with optional box bounds.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Convergence threshold applied to both the spread of simplex values
    /// (relative) and the spread of simplex vertices (relative).
    pub tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], bounds: Option<(&[f64], &[f64])>) {
    if let Some((lo, hi)) = bounds {
        for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
            *v = v.clamp(l, h);
        }
    }
}

/// Minimize `f` starting from `x0` with initial simplex offsets `steps`.
///
/// Points outside `bounds` are projected onto the box before evaluation.
/// Standard coefficients: reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    bounds: Option<(&[f64], &[f64])>,
    opts: NelderMeadOptions,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut eval = |x: &mut Vec<f64>| {
        project(x, bounds);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 {
        let mut x = Vec::new();
        let value = eval(&mut x);
        return Minimum {
            x,
            value,
            iterations: 0,
            converged: true,
            trace: Vec::new(),
        };
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut p = x0.to_vec();
    let v = eval(&mut p);
    simplex.push((p, v));
    for i in 0..n {
        let mut p = x0.to_vec();
        let s = if steps[i] != 0.0 { steps[i] } else { 1e-3 };
        p[i] += s;
        if let Some((_, hi)) = bounds {
            if p[i] > hi[i] {
                p[i] = x0[i] - s;
            }
        }
        let v = eval(&mut p);
        simplex.push((p, v));
    }

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let fspread = (worst - best).abs() <= opts.tol * (best.abs() + opts.tol);
        let xspread = simplex[1..].iter().all(|(p, _)| {
            p.iter()
                .zip(&simplex[0].0)
                .all(|(a, b)| (a - b).abs() <= opts.tol * (1.0 + b.abs()))
        });
        if fspread && xspread {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = alloc::vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let mut xr = along(1.0);
        let fr = eval(&mut xr);
        if fr < simplex[0].1 {
            let mut xe = along(2.0);
            let fe = eval(&mut xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (mut xc, fc) = if fr < simplex[n].1 {
                let mut xc = along(0.5);
                let fc = eval(&mut xc);
                (xc, fc)
            } else {
                let mut xc = along(-0.5);
                let fc = eval(&mut xc);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (core::mem::take(&mut xc), fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (p, v) in simplex[1..].iter_mut() {
                    for (pi, bi) in p.iter_mut().zip(&x_best) {
                        *pi = bi + 0.5 * (*pi - bi);
                    }
                    *v = eval(p);
                }
            }
        }
        let b = simplex.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        trace.push(b);
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let m = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.1, 0.1],
            None,
            NelderMeadOptions::default(),
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn bounds_are_respected() {
        let lo = [0.5];
        let hi = [2.0];
        let m = nelder_mead(
            |x| x[0] * x[0],
            &[1.5],
            &[0.2],
            Some((&lo, &hi)),
            NelderMeadOptions::default(),
        );
        assert!((m.x[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn trace_is_non_increasing() {
        let m = nelder_mead(
            |x| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(4) + 0.1 * x[2] * x[2],
            &[0.0, 0.0, 1.0],
            &[0.5, 0.5, 0.5],
            None,
            NelderMeadOptions::default(),
        );
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
