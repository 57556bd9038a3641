//! Proximal operators for the nonsmooth term `h`.
//!
//! Throughout, `prox_h^α(z) = argmin_y { ‖y − z‖² / (2α) + h(y) }`, so the ℓ1
//! prox soft-thresholds by `αλ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, PartialEq)]
pub enum ProxError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("regularization coefficient must be nonnegative, got {0}")]
    BadLambda(f64),
    #[error("numeric prox did not reach tol={tol} within {iters} sweeps (last change {last})")]
    NoConvergence { tol: f64, iters: usize, last: f64 },
}

/// Operations a regularizer must provide for the solvers and the checks.
pub trait ProxFunction {
    fn value(&self, x: &[f64]) -> f64;

    /// Exact `prox_h^α(z)`.
    fn prox(&self, z: &[f64], alpha: f64) -> Vec<f64>;

    /// The member `p ∈ ∂h(x)` minimizing `⟨p, direction⟩`.
    fn min_subgradient_along(&self, x: &[f64], direction: &[f64]) -> Vec<f64>;

    /// Whether `g ∈ ∂h(x)` up to `slack`.
    fn is_subgradient(&self, x: &[f64], g: &[f64], slack: f64) -> bool;

    /// `sup ‖∂h‖` over `R^d`.
    fn subgradient_bound(&self, d: usize) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    L1,
    Zero,
}

/// `h(x) = λ‖x‖₁` or `h ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl Regularizer {
    pub fn l1(lambda: f64) -> Self {
        Regularizer {
            kind: RegularizerKind::L1,
            lambda,
        }
    }

    pub fn zero() -> Self {
        Regularizer {
            kind: RegularizerKind::Zero,
            lambda: 0.0,
        }
    }

    /// `G_h`: `λ√d` for ℓ1, 0 otherwise.
    pub fn g_h(&self, d: usize) -> f64 {
        self.subgradient_bound(d)
    }

    fn effective_lambda(&self) -> f64 {
        match self.kind {
            RegularizerKind::L1 => self.lambda,
            RegularizerKind::Zero => 0.0,
        }
    }
}

impl ProxFunction for Regularizer {
    fn value(&self, x: &[f64]) -> f64 {
        match self.kind {
            RegularizerKind::L1 => self.lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            RegularizerKind::Zero => 0.0,
        }
    }

    fn prox(&self, z: &[f64], alpha: f64) -> Vec<f64> {
        soft_threshold(z, alpha * self.effective_lambda())
    }

    fn min_subgradient_along(&self, x: &[f64], direction: &[f64]) -> Vec<f64> {
        let lam = self.effective_lambda();
        x.iter()
            .zip(direction)
            .map(|(&xi, &di)| {
                if xi != 0.0 {
                    lam * xi.signum()
                } else if di != 0.0 {
                    -lam * di.signum()
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn is_subgradient(&self, x: &[f64], g: &[f64], slack: f64) -> bool {
        let lam = self.effective_lambda();
        x.iter().zip(g).all(|(&xi, &gi)| {
            if xi != 0.0 && lam > 0.0 {
                (gi - lam * xi.signum()).abs() <= slack
            } else {
                gi.abs() <= lam + slack
            }
        })
    }

    fn subgradient_bound(&self, d: usize) -> f64 {
        self.effective_lambda() * (d as f64).sqrt()
    }
}

fn soft_threshold(z: &[f64], t: f64) -> Vec<f64> {
    z.iter()
        .map(|&v| {
            if v > t {
                v - t
            } else if v < -t {
                v + t
            } else {
                0.0
            }
        })
        .collect()
}

/// Closed-form ℓ1 prox: componentwise soft threshold by `αλ`.
pub fn prox_l1(z: &[f64], alpha: f64, lambda: f64) -> Result<Vec<f64>, ProxError> {
    if !(alpha > 0.0) {
        return Err(ProxError::BadStep(alpha));
    }
    if !(lambda >= 0.0) {
        return Err(ProxError::BadLambda(lambda));
    }
    Ok(soft_threshold(z, alpha * lambda))
}

/// `‖y − z‖² / (2α) + h(y)`
pub fn prox_objective<H: ProxFunction + ?Sized>(h: &H, y: &[f64], z: &[f64], alpha: f64) -> f64 {
    linalg::dist(y, z).powi(2) / (2.0 * alpha) + h.value(y)
}

const NUMERIC_MAX_SWEEPS: usize = 10_000;

/// Prox by cyclic coordinate minimization using only `h.value`, starting at `z`.
/// Reference oracle for the closed forms.
pub fn prox_numeric<H: ProxFunction + ?Sized>(
    h: &H,
    z: &[f64],
    alpha: f64,
    tol: f64,
) -> Result<Vec<f64>, ProxError> {
    prox_numeric_from(h, z, alpha, tol, z)
}

/// [`prox_numeric`] from an arbitrary starting point.
pub fn prox_numeric_from<H: ProxFunction + ?Sized>(
    h: &H,
    z: &[f64],
    alpha: f64,
    tol: f64,
    start: &[f64],
) -> Result<Vec<f64>, ProxError> {
    if !(alpha > 0.0) {
        return Err(ProxError::BadStep(alpha));
    }
    let mut y = start.to_vec();
    let mut last = f64::INFINITY;
    for _ in 0..NUMERIC_MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for j in 0..y.len() {
            let old = y[j];
            let new = minimize_coordinate(h, &mut y, j, z, alpha, tol);
            y[j] = new;
            change = change.max((new - old).abs());
        }
        last = change;
        if change <= tol * 1e-2 {
            return Ok(y);
        }
    }
    Err(ProxError::NoConvergence {
        tol,
        iters: NUMERIC_MAX_SWEEPS,
        last,
    })
}

/// Bisection on the right derivative of the (strongly convex) prox objective
/// along coordinate `j`; the bracket is grown until it holds the minimizer.
fn minimize_coordinate<H: ProxFunction + ?Sized>(
    h: &H,
    y: &mut [f64],
    j: usize,
    z: &[f64],
    alpha: f64,
    tol: f64,
) -> f64 {
    let mut e = vec![0.0; y.len()];
    e[j] = 1.0;
    let right_deriv = |t: f64, y: &mut [f64]| {
        y[j] = t;
        (t - z[j]) / alpha + dir_derivative(h, y, &e)
    };
    let centre = y[j];
    let mut radius = (z[j] - centre).abs().max(1.0);
    for _ in 0..200 {
        if right_deriv(centre - radius, y) < 0.0 {
            break;
        }
        radius *= 2.0;
    }
    let mut lo = centre - radius;
    let mut hi = centre + radius;
    for _ in 0..200 {
        if right_deriv(hi, y) >= 0.0 {
            break;
        }
        lo = hi;
        hi += radius;
        radius *= 2.0;
    }
    // Invariant: right derivative < 0 at lo, >= 0 at hi.
    while hi - lo > tol * 1e-3 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if right_deriv(mid, y) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    y[j] = hi;
    hi
}

/// A point within `achieved_eps` of the prox minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct InexactProxResult {
    pub point: Vec<f64>,
    pub achieved_eps: f64,
}

/// An ε-inexact prox: starts at the exact prox and moves along a seeded random
/// unit direction by the step that makes the objective gap equal `eps_target`
/// to first order in `h`. If convexity of `h` makes the realized gap larger,
/// the step is shortened by bisection, so `achieved_eps ≤ eps_target` always.
pub fn prox_inexact<H: ProxFunction + ?Sized>(
    h: &H,
    z: &[f64],
    alpha: f64,
    eps_target: f64,
    seed: u64,
) -> Result<InexactProxResult, ProxError> {
    if !(alpha > 0.0) {
        return Err(ProxError::BadStep(alpha));
    }
    let y = h.prox(z, alpha);
    if eps_target <= 0.0 || y.is_empty() {
        return Ok(InexactProxResult {
            point: y,
            achieved_eps: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
    let n = linalg::norm(&u);
    u.iter_mut().for_each(|v| *v /= n);

    // gap(t) = t²/(2α) + t·a with a the directional derivative at y.
    let slope = linalg::dot(&u, &linalg::sub(&y, z)) / alpha + dir_derivative(h, &y, &u);
    let a = slope.max(0.0);
    let t_star = alpha * (-a + (a * a + 2.0 * eps_target / alpha).sqrt());

    let at = |t: f64| -> Vec<f64> { y.iter().zip(&u).map(|(yi, ui)| yi + t * ui).collect() };
    let mut t = t_star;
    let mut gap = epsilon_of(h, &at(t), z, alpha);
    if gap > eps_target {
        let (mut lo, mut hi) = (0.0, t_star);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if epsilon_of(h, &at(mid), z, alpha) <= eps_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        t = lo;
        gap = epsilon_of(h, &at(t), z, alpha);
    }
    Ok(InexactProxResult {
        point: at(t),
        achieved_eps: gap,
    })
}

/// One-sided derivative `h'(y; u) = max_{p ∈ ∂h(y)} ⟨p, u⟩`.
fn dir_derivative<H: ProxFunction + ?Sized>(h: &H, y: &[f64], u: &[f64]) -> f64 {
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    let p_max = h.min_subgradient_along(y, &neg);
    linalg::dot(&p_max, u)
}

/// Prox-objective gap of `candidate` against the exact prox of `z`,
/// clamped at zero.
pub fn epsilon_of<H: ProxFunction + ?Sized>(h: &H, candidate: &[f64], z: &[f64], alpha: f64) -> f64 {
    let y = h.prox(z, alpha);
    let gap = prox_objective(h, candidate, z, alpha) - prox_objective(h, &y, z, alpha);
    gap.max(0.0)
}

/// The proximal error in its linearized form
/// `‖x̄ − y‖²/(2α) + ⟨x̄ − y, (y − q̄)/α + p⟩`, `y = prox(q̄)`, with `p ∈ ∂h(x̄)`
/// chosen to minimize the inner product. Never smaller than [`epsilon_of`];
/// equal when `h` is linear on the segment between `x̄` and `y`.
pub fn linearized_epsilon<H: ProxFunction + ?Sized>(h: &H, xbar: &[f64], qbar: &[f64], alpha: f64) -> f64 {
    let y = h.prox(qbar, alpha);
    let diff = linalg::sub(xbar, &y);
    let p = h.min_subgradient_along(xbar, &diff);
    let dual: Vec<f64> = y
        .iter()
        .zip(qbar)
        .zip(&p)
        .map(|((yi, qi), pi)| (yi - qi) / alpha + pi)
        .collect();
    let eps = linalg::norm_sq(&diff) / (2.0 * alpha) + linalg::dot(&diff, &dual);
    eps.max(0.0)
}
