//! Decoherence of the two traverse states: the overlap phase, the overlap
//! modulus `e^{-a}` from the current–current double integral, its point
//! charge divergence and its regularisation by a line charge.
//!
//! Times are in units of the traverse time `T` and line positions in units
//! of the line length `σ`, with `λ = σ/R`. The exponent splits into a self
//! part `a1` (each traverse with itself) and a cross part `a2`. Both carry
//! the prefactor `e²β²/(2π)²` and principal values at the light cone.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fields::{a_dot_electron_analytic, a_electron_retarded};
use crate::geometry::{Electron, Sense, Smearing, Trajectory, Vec3};
use crate::modes::{analytic_mode, decoherence_exponent, ElectronDrive, ModeGrid};
use crate::quadrature::{
    integrate_breaks, loglog_slope, neumaier_sum, pv_integral_1d, pv_inverse_quadratic, pv_linear_over_quadratic,
    Estimate, QuadratureSpec,
};

/// `e² β² / (2π)²`.
pub fn prefactor(beta: f64, fine_structure: f64) -> f64 {
    fine_structure * beta * beta / (4.0 * PI * PI)
}

fn check_params(beta: f64, lambda: f64, fine_structure: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return domain(format!("beta must satisfy 0 < beta < 1, got {beta}"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return domain(format!("lambda must be > 0, got {lambda}"));
    }
    if !(fine_structure > 0.0 && fine_structure.is_finite()) {
        return domain(format!("fine_structure must be > 0, got {fine_structure}"));
    }
    Ok(())
}

/// Which separation is integrated first in the self part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerOrder {
    /// Principal value in the time separation at fixed line separation.
    /// This is the order in which the pole arises from the k integral, and
    /// it agrees with the mode sum.
    Time,
    /// Line separation first, with the closed forms for
    /// `P∫ dz/(z² - α²)` and `P∫ z dz/(z² - α²)`. The iterated integral is
    /// not absolutely convergent and this order gives a different, negative
    /// number.
    Line,
}

/// How the inner principal value is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerMethod {
    /// Pole subtraction with the analytic principal value of the pole term.
    ClosedForm,
    /// Symmetric excision extrapolated to zero width.
    NumericPv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A1Options {
    pub order: InnerOrder,
    pub method: InnerMethod,
    /// Keep the `(2β/π)² sin²(πτ/2)` term next to `τ²`.
    pub keep_sin2: bool,
    pub spec: QuadratureSpec,
}

impl Default for A1Options {
    fn default() -> Self {
        Self {
            order: InnerOrder::Time,
            method: InnerMethod::ClosedForm,
            keep_sin2: false,
            spec: QuadratureSpec::default().with_tolerances(1e-13, 1e-9),
        }
    }
}

/// `D(τ) = (β/π)²(c·4 sin²(πτ/2) + λ²ζ²) - τ²` and its derivative.
fn denominator(beta: f64, lz: f64, c: f64, tau: f64) -> (f64, f64) {
    let q = (beta / PI).powi(2);
    let s = (0.5 * PI * tau).sin();
    let d = q * (4.0 * c * s * s + lz * lz) - tau * tau;
    let dd = q * c * 2.0 * PI * (PI * tau).sin() - 2.0 * tau;
    (d, dd)
}

/// Root of `D` in `(0, 1)`; `D` decreases from `D(0) ≥ 0`.
fn denominator_root(beta: f64, lz: f64, c: f64) -> Option<f64> {
    if lz == 0.0 || denominator(beta, lz, c, 1.0).0 >= 0.0 {
        return None;
    }
    if c == 0.0 {
        return Some(beta * lz / PI);
    }
    // bisect to full relative precision, the root can be tiny
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Some(mid);
        }
        if denominator(beta, lz, c, mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// `sin x / x`.
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `(sinc x - sinc y) / (x - y)` without cancellation.
fn sinc_divided(x: f64, y: f64) -> f64 {
    let big = x.abs().max(y.abs());
    if big < 0.25 {
        // Σ (-1)^n/(2n+1)! (x^2n - y^2n)/(x - y)
        let (x2, y2) = (x * x, y * y);
        let mut total = 0.0;
        let mut fact = 1.0;
        let mut sign = 1.0;
        for n in 1..8 {
            fact *= (2 * n) as f64 * (2 * n + 1) as f64;
            sign = -sign;
            // Σ_k x^2k y^2(n-1-k)
            let mut sum = 0.0;
            let mut xp = 1.0;
            for k in 0..n {
                sum += xp * y2.powi(n - 1 - k);
                xp *= x2;
            }
            total += sign * sum / fact;
        }
        (x + y) * total
    } else if (x - y).abs() >= 0.1 * big {
        (sinc(x) - sinc(y)) / (x - y)
    } else if x == y {
        (x * x.cos() - x.sin()) / (x * x)
    } else {
        let d = x - y;
        (y * 2.0 * (0.5 * (x + y)).cos() * (0.5 * d).sin() - d * y.sin()) / (x * y * d)
    }
}

/// `[0, x, 4x, 16x, …, 1]`: panels for integrands varying on the scale of
/// the distance to `-x`.
fn geometric_breaks(x: f64) -> Vec<f64> {
    let mut points = vec![0.0];
    let mut p = x;
    while p < 0.5 {
        points.push(p);
        p *= 4.0;
    }
    points.push(1.0);
    points
}

fn sin2_weight(keep: bool) -> f64 {
    if keep {
        1.0
    } else {
        0.0
    }
}

/// `P ∫_0^1 (1-τ) cos(πτ) / D(τ) dτ` at line separation `lz = λζ`.
fn self_time_inner(beta: f64, lz: f64, opts: &A1Options) -> Result<Estimate<f64>> {
    let c = sin2_weight(opts.keep_sin2);
    let g = |tau: f64| (1.0 - tau) * (PI * tau).cos();
    let f = |tau: f64| g(tau) / denominator(beta, lz, c, tau).0;
    let spec = &opts.spec;
    if lz == 0.0 {
        return domain("the self part is not integrable at zero line separation");
    }
    let Some(root) = denominator_root(beta, lz, c) else {
        return crate::quadrature::integrate(f, 0.0, 1.0, spec);
    };
    match opts.method {
        InnerMethod::NumericPv => pv_integral_1d(f, root, (0.0, 1.0), spec),
        InnerMethod::ClosedForm => {
            // D(τ) = (τ*² - τ²)(1 - 4qc W(τ)), W = A(τ + τ*) S(τ - τ*),
            // A(u) = sin(πu/2)/u, S(d) = sin(πd/2)/d. Subtracting the pole
            // pair ±τ* leaves -[k]/(τ + τ*) with k = g/(1 - 4qcW) and [k]
            // its divided difference at τ*, evaluated without cancellation.
            let q4c = 4.0 * (beta / PI).powi(2) * c;
            let half = 0.5 * PI;
            let w = |tau: f64| half * half * sinc(half * (tau + root)) * sinc(half * (tau - root));
            let m0 = 1.0 / (1.0 - q4c * w(root));
            let g0 = g(root);
            let k0 = g0 * m0;
            let divided = |tau: f64| {
                let d = tau - root;
                let dg = -(PI * root).cos() - (1.0 - tau) * PI * (half * (tau + root)).sin() * sinc(half * d);
                let da = half * half * sinc_divided(half * (tau + root), PI * root);
                let ds = half * half * sinc_divided(half * d, 0.0);
                let dw = half * (da * sinc(half * d) + sinc(PI * root) * ds);
                let m = 1.0 / (1.0 - q4c * w(tau));
                dg * m + g0 * q4c * dw * m * m0
            };
            let est = integrate_breaks(|tau: f64| -divided(tau) / (tau + root), &geometric_breaks(root), spec);
            let est = crate::quadrature::checked(est, "time principal value")?;
            Ok(est.map(|v| v + k0 * root.atanh() / root))
        }
    }
}

/// `P ∫_0^1 (1-ζ) / ((βλζ/π)² - A) dζ` with `A = τ² - c (2β/π)² sin²(πτ/2)`.
fn self_line_inner(beta: f64, lambda: f64, tau: f64, opts: &A1Options) -> Result<Estimate<f64>> {
    let c = sin2_weight(opts.keep_sin2);
    let q = beta * lambda / PI;
    let s = (0.5 * PI * tau).sin();
    let big_a = tau * tau - c * (2.0 * beta / PI).powi(2) * s * s;
    let alpha = big_a.sqrt() / q;
    match opts.method {
        InnerMethod::ClosedForm => Ok(Estimate {
            value: (pv_inverse_quadratic(alpha) - pv_linear_over_quadratic(alpha)) / (q * q),
            error: 0.0,
            evaluations: 1,
            converged: true,
        }),
        InnerMethod::NumericPv => {
            let f = |z: f64| (1.0 - z) / (q * q * z * z - big_a);
            if alpha < 1.0 {
                pv_integral_1d(f, alpha, (0.0, 1.0), &opts.spec)
            } else {
                crate::quadrature::integrate(f, 0.0, 1.0, &opts.spec)
            }
        }
    }
}

/// Outer adaptive integral of an inner estimate. An inner result that
/// missed its tolerance is used with its own error estimate; the inner
/// errors are integrated separately to a loose tolerance and added.
fn nested<F>(inner: F, points: &[f64], spec: &QuadratureSpec, what: &str) -> Result<Estimate<f64>>
where
    F: Fn(f64) -> Result<Estimate<f64>>,
{
    let failure = std::cell::RefCell::new(None);
    let eval = |x: f64| match inner(x) {
        Ok(e) => (e.value, e.error),
        Err(Error::NoConvergence { estimate, error, .. }) if estimate.is_finite() && error.is_finite() => {
            (estimate, error)
        }
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            (0.0, 0.0)
        }
    };
    let est = integrate_breaks(|x: f64| eval(x).0, points, spec);
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    let loose = spec.with_tolerances(spec.target(est.value) * 1e-2, 0.25);
    let inner_err = integrate_breaks(|x: f64| eval(x).1, points, &loose);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let est = Estimate {
        error: est.error + inner_err.value.abs() + inner_err.error,
        evaluations: est.evaluations + inner_err.evaluations,
        ..est
    };
    crate::quadrature::checked(est, what)
}

/// The dimensionless self-part integral
/// `4 ∫_0^1 dζ (1-ζ) ∫_0^1 dτ (1-τ) cos(πτ) / D`, in the chosen order.
/// Signed; multiply by [`prefactor`] for `a1`.
pub fn self_integral(beta: f64, lambda: f64, opts: &A1Options) -> Result<Estimate<f64>> {
    check_params(beta, lambda, 1.0)?;
    let inner_spec = opts.spec.with_tolerances(opts.spec.abs_tol * 1e-2, opts.spec.rel_tol * 1e-2);
    let inner_opts = A1Options {
        spec: inner_spec,
        ..opts.clone()
    };
    let c = sin2_weight(opts.keep_sin2);
    let est = match opts.order {
        InnerOrder::Time => {
            // the pole leaves (0, 1) where D(1) = 0
            let mut breaks = vec![0.0, 1.0];
            let z1 = ((PI / beta).powi(2) - 4.0 * c).max(0.0).sqrt() / lambda;
            if z1 < 1.0 {
                breaks.insert(1, z1);
            }
            let f = |z: f64| Ok(self_time_inner(beta, lambda * z, &inner_opts)?.map(|v| v * (1.0 - z)));
            nested(f, &breaks, &opts.spec, "line-separation integral")?
        }
        InnerOrder::Line => {
            // |α| = 1 where τ² - c(2β/π)² sin² = (βλ/π)²
            let q = beta * lambda / PI;
            let mut breaks = vec![0.0, 1.0];
            let h = |tau: f64| {
                let s = (0.5 * PI * tau).sin();
                tau * tau - c * (2.0 * beta / PI).powi(2) * s * s - q * q
            };
            if h(1.0) > 0.0 {
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if h(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                breaks.insert(1, 0.5 * (lo + hi));
            }
            let f = |tau: f64| {
                let w = (1.0 - tau) * (PI * tau).cos();
                Ok(self_line_inner(beta, lambda, tau, &inner_opts)?.map(|v| v * w))
            };
            let what = match breaks.len() {
                3 => format!("time integral across the |alpha| = 1 crossing at tau = {:.6}", breaks[1]),
                _ => "time integral".to_string(),
            };
            nested(f, &breaks, &opts.spec, &what)?
        }
    };
    Ok(Estimate {
        value: 4.0 * est.value,
        error: 4.0 * est.error,
        ..est
    })
}

/// Signed `a1` for any evaluation order and method.
pub fn a1_smeared_with(beta: f64, lambda: f64, fine_structure: f64, opts: &A1Options) -> Result<Estimate<f64>> {
    check_params(beta, lambda, fine_structure)?;
    let p = prefactor(beta, fine_structure);
    Ok(scaled(self_integral(beta, lambda, opts)?, p))
}

/// Self part `a1` of the decoherence exponent for the line charge. Fails
/// if the result is not positive.
pub fn a1_smeared(beta: f64, lambda: f64, fine_structure: f64) -> Result<Estimate<f64>> {
    let est = a1_smeared_with(beta, lambda, fine_structure, &A1Options::default())?;
    positive(est, "a1")
}

fn scaled(est: Estimate<f64>, factor: f64) -> Estimate<f64> {
    Estimate {
        value: est.value * factor,
        error: est.error * factor.abs(),
        ..est
    }
}

fn positive(est: Estimate<f64>, name: &str) -> Result<Estimate<f64>> {
    if est.value > 0.0 {
        Ok(est)
    } else {
        Err(Error::Domain(format!(
            "{name} = {:e} is not positive; an overlap modulus cannot exceed one",
            est.value
        )))
    }
}

/// `P ∫_0^{x} dτ₋ / (S² - τ₋²) = (1/(2S)) ln|(S + x)/(S - x)|`.
fn log_kernel(s: f64, x: f64) -> f64 {
    ((s + x) / (s - x)).abs().ln() / (2.0 * s)
}

/// Cross part with the time difference done in closed form:
/// `4 ∫_0^1 dζ (1-ζ) ∫_0^1 dx cos(πx) (1/(2S)) ln|(S+x)/(S-x)|`,
/// `S = (β/π)√(4 sin²(πx/2) + λ²ζ²)`.
pub fn cross_integral(beta: f64, lambda: f64, spec: &QuadratureSpec) -> Result<Estimate<f64>> {
    if lambda == 0.0 {
        return Err(Error::Unsupported(
            "the cross part diverges logarithmically for a point charge: both traverses start (and end) at one point"
                .into(),
        ));
    }
    check_params(beta, lambda, 1.0)?;
    let inner_spec = spec.with_tolerances(spec.abs_tol * 1e-2, spec.rel_tol * 1e-2);
    let outer = |z: f64| {
        let lz = lambda * z;
        let s_of = |x: f64| (beta / PI) * (4.0 * (0.5 * PI * x).sin().powi(2) + lz * lz).sqrt();
        // the log kernel varies on the scale βλζ/π near x = 0
        let mut breaks = geometric_breaks(beta * lz / PI);
        if let Some(r) = denominator_root(beta, lz, 1.0) {
            breaks.push(r);
            breaks.sort_by(f64::total_cmp);
        }
        let est = integrate_breaks(|x: f64| (PI * x).cos() * log_kernel(s_of(x), x), &breaks, &inner_spec);
        let est = crate::quadrature::checked(est, &format!("cross-part time integral at zeta = {z}"))?;
        Ok(est.map(|v| v * (1.0 - z)))
    };
    let est = nested(outer, &[0.0, 1.0], spec, "cross-part line integral")?;
    Ok(Estimate {
        value: 4.0 * est.value,
        error: 4.0 * est.error,
        ..est
    })
}

/// Integrand of [`cross_integral`] over `(ζ, x) ∈ [0, 1]²`, for cubature
/// and sampling cross-checks.
pub fn cross_integrand(beta: f64, lambda: f64, z: f64, x: f64) -> f64 {
    let lz = lambda * z;
    let s = (beta / PI) * (4.0 * (0.5 * PI * x).sin().powi(2) + lz * lz).sqrt();
    4.0 * (1.0 - z) * (PI * x).cos() * log_kernel(s, x)
}

/// Cross part `a2` of the decoherence exponent for the line charge.
pub fn a2_smeared(beta: f64, lambda: f64, fine_structure: f64) -> Result<Estimate<f64>> {
    if lambda != 0.0 {
        check_params(beta, lambda, fine_structure)?;
    }
    let spec = QuadratureSpec::default().with_tolerances(1e-13, 1e-9);
    let p = prefactor(beta, fine_structure);
    positive(scaled(cross_integral(beta, lambda, &spec)?, p), "a2")
}

/// Point-charge exponent with the band `|τ₁ - τ₂| < ε` cut out (ε in units
/// of `T`). Both parts are included; the result is signed.
pub fn a_point_regulated(beta: f64, epsilon: f64, fine_structure: f64) -> Result<Estimate<f64>> {
    check_params(beta, 1.0, fine_structure)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return domain(format!("excision must satisfy 0 < epsilon < 1, got {epsilon}"));
    }
    let spec = QuadratureSpec::default().with_tolerances(1e-13, 1e-10);
    let self_part = crate::quadrature::integrate(
        |tau: f64| 2.0 * (1.0 - tau) * (PI * tau).cos() / denominator(beta, 0.0, 1.0, tau).0,
        epsilon,
        1.0,
        &spec,
    )?;
    let s_of = |x: f64| (2.0 * beta / PI) * (0.5 * PI * x).sin();
    let mut breaks = vec![epsilon, 1.0];
    let y = PI * epsilon / (2.0 * beta);
    if y < 1.0 {
        let x = 2.0 / PI * y.asin();
        if x > epsilon && x < 1.0 {
            breaks.insert(1, x);
        }
    }
    let cross = crate::quadrature::checked(
        integrate_breaks(
            |x: f64| {
                let s = s_of(x);
                2.0 * (PI * x).cos() * (log_kernel(s, x) - log_kernel(s, epsilon))
            },
            &breaks,
            &spec,
        ),
        "regulated cross part",
    )?;
    let p = prefactor(beta, fine_structure);
    Ok(Estimate {
        value: p * (self_part.value + cross.value),
        error: p * (self_part.error + cross.error),
        evaluations: self_part.evaluations + cross.evaluations,
        converged: true,
    })
}

/// Point-charge self part with the band `|τ₁ - τ₂| < ε` excised, computed
/// twice: reduced to one dimension through `∫∫ dτ₁dτ₂ f(τ₁-τ₂) =
/// 2∫ (1-τ)f(τ)`, and as the unreduced two-dimensional integral.
pub fn reduction_check(beta: f64, epsilon: f64) -> Result<(f64, f64)> {
    check_params(beta, 1.0, 1.0)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return domain(format!("excision must satisfy 0 < epsilon < 1, got {epsilon}"));
    }
    let spec = QuadratureSpec::default().with_tolerances(1e-14, 1e-11);
    let f = |d: f64| (PI * d).cos() / denominator(beta, 0.0, 1.0, d.abs()).0;
    let reduced = crate::quadrature::integrate(|d: f64| 2.0 * (1.0 - d) * f(d), epsilon, 1.0, &spec)?;
    let inner_spec = spec.with_tolerances(1e-15, 1e-12);
    let row = |t1: f64| {
        let mut v = 0.0;
        if t1 - epsilon > 0.0 {
            v += integrate_breaks(|t2: f64| f(t1 - t2), &[0.0, t1 - epsilon], &inner_spec).value;
        }
        if t1 + epsilon < 1.0 {
            v += integrate_breaks(|t2: f64| f(t1 - t2), &[t1 + epsilon, 1.0], &inner_spec).value;
        }
        v
    };
    let unreduced = crate::quadrature::checked(
        integrate_breaks(row, &[0.0, epsilon, 1.0 - epsilon, 1.0], &spec),
        "unreduced double integral",
    )?;
    Ok((reduced.value, unreduced.value))
}

/// Value of the overlap phase integral and its natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCheck {
    /// `-½ ∫ (Ȧ_R + Ȧ_L)·(A_R - A_L) d³x`.
    pub value: f64,
    /// `∫ |Ȧ_R| |A_R| d³x` on the same grid.
    pub scale: f64,
    pub relative: f64,
    pub grid: usize,
}

/// Evaluates the overlap phase of the two electron fields at time `t` on a
/// midpoint grid of `n³` cells covering the region the fields have reached.
///
/// The grid is symmetric under `x → (-x, y, σ - z)`, the rotation that
/// swaps the traverses (shifted by the line length so it maps the line
/// charge onto itself). Both fields are evaluated independently.
pub fn phase_c1_check(right: &Electron, left: &Electron, t: f64, n: usize) -> Result<PhaseCheck> {
    if n < 2 {
        return domain("phase grid needs at least 2 cells per axis");
    }
    if !(t > 0.0 && t.is_finite()) {
        return domain(format!("time must be > 0, got {t}"));
    }
    let sigma = right.smearing.extent().max(left.smearing.extent());
    let radius = right.trajectory.radius.max(left.trajectory.radius);
    let half = t + sigma + 1.5 * radius;
    let h = 2.0 * half / n as f64;
    let centre = Vec3::new(0.0, 0.0, 0.5 * sigma);
    let node = |i: usize| -half + h * (i as f64 + 0.5);
    let cells: Vec<Result<(f64, f64)>> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let x = centre + Vec3::new(node(idx / (n * n)), node((idx / n) % n), node(idx % n));
            let ar = a_electron_retarded(right, &x, t)?;
            let al = a_electron_retarded(left, &x, t)?;
            let adr = a_dot_electron_analytic(right, &x, t)?;
            let adl = a_dot_electron_analytic(left, &x, t)?;
            Ok((-0.5 * (adr + adl).dot(&(ar - al)), adr.norm() * ar.norm()))
        })
        .collect();
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let h3 = h * h * h;
    let value = neumaier_sum(cells.iter().map(|c| c.0)) * h3;
    let scale = neumaier_sum(cells.iter().map(|c| c.1)) * h3;
    Ok(PhaseCheck {
        value,
        scale,
        relative: if scale > 0.0 { value.abs() / scale } else { 0.0 },
        grid: n,
    })
}

/// Mirror pair of line-charge electrons on the unit circle.
pub fn traverse_pair(beta: f64, lambda: f64, fine_structure: f64, ramp_fraction: f64) -> Result<(Electron, Electron)> {
    let traj = Trajectory::with_ramp(1.0, beta, Sense::Right, ramp_fraction)?;
    let right = Electron::new(traj, Smearing::LineZ { sigma: lambda }, fine_structure.sqrt())?;
    Ok((right, right.mirrored()))
}

/// Settings for [`visibility_report`] and [`sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceOptions {
    /// Cells per axis of the overlap-phase grid.
    pub phase_grid: usize,
    /// Start-up ramp used for the overlap-phase fields.
    pub ramp_fraction: f64,
    /// Below this exponent the interference is called maximal.
    pub maximum_interference_below: f64,
}

impl Default for DecoherenceOptions {
    fn default() -> Self {
        Self {
            phase_grid: 16,
            ramp_fraction: 0.01,
            maximum_interference_below: 0.1,
        }
    }
}

/// Overlap of the two traverse states after the traverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapResult {
    pub a1: f64,
    pub a2: f64,
    pub a_total: f64,
    pub visibility: f64,
    pub overlap_phase: f64,
    pub overlap_phase_scale: f64,
    /// Excision width for a regulated point charge; `None` for the line.
    pub regulator: Option<f64>,
    pub beta: f64,
    pub lambda: f64,
    pub fine_structure: f64,
    pub err_a1: f64,
    pub err_a2: f64,
    pub maximum_interference: bool,
}

pub fn visibility_report(beta: f64, lambda: f64, fine_structure: f64, opts: &DecoherenceOptions) -> Result<OverlapResult> {
    check_params(beta, lambda, fine_structure)?;
    let a1 = a1_smeared(beta, lambda, fine_structure)?;
    let a2 = a2_smeared(beta, lambda, fine_structure)?;
    let (right, left) = traverse_pair(beta, lambda, fine_structure, opts.ramp_fraction)?;
    let phase = phase_c1_check(&right, &left, right.trajectory.traverse_time(), opts.phase_grid)?;
    let a_total = a1.value + a2.value;
    Ok(OverlapResult {
        a1: a1.value,
        a2: a2.value,
        a_total,
        visibility: (-a_total).exp(),
        overlap_phase: phase.value,
        overlap_phase_scale: phase.scale,
        regulator: None,
        beta,
        lambda,
        fine_structure,
        err_a1: a1.error,
        err_a2: a2.error,
        maximum_interference: a_total < opts.maximum_interference_below,
    })
}

/// Probabilities `½[1 ± e^{-a} cos Φ]` at the two output ports.
pub fn port_probabilities(a: f64, phase: f64) -> (f64, f64) {
    let v = (-a).exp() * phase.cos();
    (0.5 * (1.0 + v), 0.5 * (1.0 - v))
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub lambda: f64,
    pub a1: f64,
    pub a2: f64,
    pub a_total: f64,
    pub visibility: f64,
    pub phase_c1: f64,
    pub err_a1: f64,
    pub err_a2: f64,
}

impl From<&OverlapResult> for SweepRow {
    fn from(r: &OverlapResult) -> Self {
        Self {
            beta: r.beta,
            lambda: r.lambda,
            a1: r.a1,
            a2: r.a2,
            a_total: r.a_total,
            visibility: r.visibility,
            phase_c1: r.overlap_phase,
            err_a1: r.err_a1,
            err_a2: r.err_a2,
        }
    }
}

pub fn sweep(points: &[(f64, f64)], fine_structure: f64, opts: &DecoherenceOptions) -> Result<Vec<SweepRow>> {
    points
        .iter()
        .map(|&(b, l)| visibility_report(b, l, fine_structure, opts).map(|r| SweepRow::from(&r)))
        .collect()
}

pub const SWEEP_HEADER: &str = "beta,lambda,a1,a2,a_total,visibility,phase_c1,err_a1,err_a2";

/// CSV with [`SWEEP_HEADER`], LF line endings, 17 significant digits.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        let vals = [r.beta, r.lambda, r.a1, r.a2, r.a_total, r.visibility, r.phase_c1, r.err_a1, r.err_a2];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Log–log slopes of `a1` along a sweep in λ (fixed β) and in β (fixed λ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub slope_lambda: f64,
    pub slope_beta: f64,
}

pub fn scaling_summary(lambda_rows: &[SweepRow], beta_rows: &[SweepRow]) -> Result<ScalingSummary> {
    let sl: Vec<(f64, f64)> = lambda_rows.iter().map(|r| (r.lambda, r.a1)).collect();
    let sb: Vec<(f64, f64)> = beta_rows.iter().map(|r| (r.beta, r.a1)).collect();
    Ok(ScalingSummary {
        slope_lambda: loglog_slope(&sl)?,
        slope_beta: loglog_slope(&sb)?,
    })
}

/// The exponent from the current–current integral next to the mode sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeCrossCheck {
    pub a_integral: f64,
    pub a_modes: f64,
    pub relative_difference: f64,
    pub k_max_sigma: f64,
    /// False when `k_max σ < 4`: the grid does not reach the smearing scale.
    pub resolved: bool,
}

/// Spherical grid reaching `k_max_sigma / σ` on the unit circle. The
/// radial rule needs about eight nodes per unit of k to follow the
/// oscillation with period `2π/T` in k, angular 24 × 24 suffices up to
/// `k_max_sigma = 12` at `λ = 1`.
pub fn ladder_grid(k_max_sigma: f64, lambda: f64) -> Result<ModeGrid> {
    if !(k_max_sigma > 0.0 && lambda > 0.0) {
        return domain("ladder grid needs k_max_sigma > 0 and lambda > 0");
    }
    let k_max = k_max_sigma / lambda;
    ModeGrid::spherical((8.0 * k_max).ceil().max(8.0) as usize, 24, 24, k_max)
}

/// Computes `a(T)` as `a1 + a2` and as `½ Σ w |α_R - α_L|²` on `grid`.
/// The integral side keeps the `sin²` term in the self part, so the two
/// agree in the continuum.
pub fn a_modes_crosscheck(beta: f64, lambda: f64, fine_structure: f64, grid: &ModeGrid) -> Result<ModeCrossCheck> {
    let exact = A1Options {
        keep_sin2: true,
        ..A1Options::default()
    };
    let a1 = positive(a1_smeared_with(beta, lambda, fine_structure, &exact)?, "a1")?;
    let a_int = a1.value + a2_smeared(beta, lambda, fine_structure)?.value;
    let (right, left) = traverse_pair(beta, lambda, fine_structure, 0.0)?;
    let t = right.trajectory.traverse_time();
    let r = analytic_mode(&ElectronDrive::new(right), grid, t)?;
    let l = analytic_mode(&ElectronDrive::new(left), grid, t)?;
    let a_modes = decoherence_exponent(&l, &r, grid)?;
    let k_max_sigma = grid.k_max() * lambda;
    Ok(ModeCrossCheck {
        a_integral: a_int,
        a_modes,
        relative_difference: (a_modes - a_int).abs() / a_int,
        k_max_sigma,
        resolved: k_max_sigma >= 4.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::*;

    const FINE: f64 = 1.0 / 137.036;

    fn validation_spec() -> QuadratureSpec {
        QuadratureSpec::default().with_tolerances(1e-9, 1e-5)
    }

    #[test]
    fn sinc_divided_difference() {
        let direct = |x: f64, y: f64| (sinc(x) - sinc(y)) / (x - y);
        for (x, y) in [(0.1, 0.05), (0.2, -0.1), (0.3, 0.29), (1.0, 0.5), (2.0, 1.999), (0.24, 0.26)] {
            assert_relative_eq!(sinc_divided(x, y), direct(x, y), max_relative = 1e-6);
        }
        // tiny arguments, where the direct quotient is all rounding
        let (x, y) = (3e-9, 1e-9);
        assert_relative_eq!(sinc_divided(x, y), -(x + y) / 6.0, max_relative = 1e-12);
        assert_relative_eq!(sinc_divided(1.0, 1.0), 1.0f64.cos() - 1.0f64.sin(), max_relative = 1e-14);
    }

    #[test]
    fn time_inner_matches_numeric_pv() {
        for keep_sin2 in [false, true] {
            let closed = A1Options {
                keep_sin2,
                ..A1Options::default()
            };
            let numeric = A1Options {
                method: InnerMethod::NumericPv,
                ..closed.clone()
            };
            for lz in [1e-3, 0.05, 0.5, 0.999] {
                let a = self_time_inner(0.1, lz, &closed).unwrap().value;
                let b = self_time_inner(0.1, lz, &numeric).unwrap().value;
                assert_relative_eq!(a, b, max_relative = 1e-7);
            }
        }
    }

    #[test]
    fn time_inner_is_stable_at_small_separation() {
        // the inner value grows like ln(1/ζ); the pole subtraction must not
        // lose it to rounding as τ* → 0
        let opts = A1Options::default();
        let at = |z: f64| self_time_inner(0.1, z, &opts).unwrap();
        for z in [1e-12, 1e-8] {
            let e = at(z);
            assert!(e.error < 1e-8, "{e:?}");
        }
        assert_relative_eq!(at(1e-12).value - at(1e-10).value, 2.0 * 10f64.ln(), max_relative = 1e-6);
    }

    #[test]
    fn causal_self_part() {
        let est = a1_smeared(0.1, 1.0, 1.0).unwrap();
        assert_relative_eq!(est.value, 4.109853230e-3, max_relative = 1e-8);
        assert!(est.error < 1e-6 * est.value);
        let numeric = A1Options {
            method: InnerMethod::NumericPv,
            spec: validation_spec(),
            ..A1Options::default()
        };
        let other = a1_smeared_with(0.1, 1.0, 1.0, &numeric).unwrap();
        assert_relative_eq!(est.value, other.value, max_relative = 1e-4);
        // keeping sin² moves it by O(β²)
        let exact = A1Options {
            keep_sin2: true,
            ..A1Options::default()
        };
        let with_sin2 = a1_smeared_with(0.1, 1.0, 1.0, &exact).unwrap().value;
        assert!(((with_sin2 - est.value) / est.value).abs() < 0.05);
    }

    #[test]
    fn line_first_order() {
        let closed = A1Options {
            order: InnerOrder::Line,
            ..A1Options::default()
        };
        let numeric = A1Options {
            method: InnerMethod::NumericPv,
            spec: validation_spec(),
            ..closed.clone()
        };
        let a = a1_smeared_with(0.1, 1.0, 1.0, &closed).unwrap().value;
        let b = a1_smeared_with(0.1, 1.0, 1.0, &numeric).unwrap().value;
        assert_relative_eq!(a, b, max_relative = 5e-3);
        // a different, negative number: the iterated integral is not
        // absolutely convergent
        assert_relative_eq!(a, -7.442996311e-2, max_relative = 1e-7);
    }

    #[test]
    fn failure_names_the_crossing() {
        let opts = A1Options {
            order: InnerOrder::Line,
            spec: QuadratureSpec::new(1e-15, 1e-15, 3).unwrap(),
            ..A1Options::default()
        };
        let err = a1_smeared_with(0.1, 1.0, 1.0, &opts).unwrap_err().to_string();
        assert!(err.contains("tau = 0.0318"), "{err}");
    }

    #[test]
    fn cross_part() {
        let est = a2_smeared(0.1, 1.0, 1.0).unwrap();
        assert_relative_eq!(est.value, 2.182860461e-3, max_relative = 1e-8);
        let b2 = a2_smeared(0.2, 1.0, 1.0).unwrap();
        assert!(b2.value.is_finite() && b2.error < 0.01 * b2.value);
        assert!(matches!(a2_smeared(0.1, 0.0, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn cross_part_matches_sampling() {
        // ζ = u², x = v² keeps the variance finite
        let (beta, lambda) = (0.2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2_000_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..n {
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let f = 4.0 * u * v * cross_integrand(beta, lambda, u * u, v * v);
            sum += f;
            sum2 += f * f;
        }
        let mean = sum / n as f64;
        let sigma = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
        let quad = cross_integral(beta, lambda, &QuadratureSpec::default().with_tolerances(1e-12, 1e-9)).unwrap();
        assert!((mean - quad.value).abs() < 4.0 * sigma, "{mean} ± {sigma} vs {}", quad.value);
        assert!(sigma < 0.01 * quad.value);
    }

    #[test]
    fn point_charge_diverges() {
        // halving from 0.1 over four decades
        let eps: Vec<f64> = (0..14).map(|k| 0.1 * 0.5f64.powi(k)).collect();
        let a: Vec<f64> = eps.iter().map(|&e| a_point_regulated(0.1, e, FINE).unwrap().value).collect();
        assert!(a.iter().all(|v| *v < 0.0));
        assert!(a.windows(2).all(|w| w[1].abs() > w[0].abs()));
        let samples: Vec<(f64, f64)> = eps.iter().zip(&a).map(|(e, v)| (*e, v.abs())).collect();
        let slope = loglog_slope(&samples).unwrap();
        assert!((slope + 1.0).abs() < 0.2, "slope {slope}");
        // the first four alone are steeper: at ε = 0.1 the finite part
        // still cancels most of the 1/ε term
        let head = loglog_slope(&samples[..4]).unwrap();
        assert!(head < -1.2, "head slope {head}");
        // u² prefactor
        let small = a_point_regulated(1e-4, 0.05, FINE).unwrap().value;
        assert!(small.abs() < 1e-9);
    }

    #[test]
    fn reduced_and_unreduced_agree() {
        for eps in [0.2, 0.05] {
            let (r, u) = reduction_check(0.1, eps).unwrap();
            assert_relative_eq!(r, u, max_relative = 1e-6);
        }
    }

    #[test]
    fn overlap_phase_cancels() {
        let (right, left) = traverse_pair(0.1, 1.0, FINE, 0.01).unwrap();
        let t = right.trajectory.traverse_time();
        let check = phase_c1_check(&right, &left, t, 12).unwrap();
        assert!(check.scale > 0.0);
        assert!(check.relative < 1e-6, "{check:?}");
        // negative control: a wider left orbit breaks the symmetry
        let traj = Trajectory::with_ramp(1.1, 0.1, Sense::Left, 0.01).unwrap();
        let wide = Electron::new(traj, left.smearing, left.charge).unwrap();
        let broken = phase_c1_check(&right, &wide, t, 12).unwrap();
        assert!(broken.relative > 1e-4, "{broken:?}");
    }

    #[test]
    fn visibility_at_physical_coupling() {
        let opts = DecoherenceOptions {
            phase_grid: 8,
            ..DecoherenceOptions::default()
        };
        let r = visibility_report(0.1, 1.0, FINE, &opts).unwrap();
        assert!(r.a_total < 0.01 && r.visibility > 0.99 && r.maximum_interference);
        assert_relative_eq!(r.a_total, r.a1 + r.a2);
        let scaled = visibility_report(0.1, 1.0, 100.0 * FINE, &opts).unwrap();
        assert_relative_eq!(scaled.a_total, 100.0 * r.a_total, max_relative = 1e-12);
        for phase in [0.0, 0.3, 2.0, PI] {
            let (p, q) = port_probabilities(r.a_total, phase);
            assert!((p + q - 1.0).abs() <= f64::EPSILON);
        }
        assert_eq!(port_probabilities(0.0, 0.0), (1.0, 0.0));
    }

    #[test]
    fn sweep_csv() {
        let opts = DecoherenceOptions {
            phase_grid: 4,
            ..DecoherenceOptions::default()
        };
        let rows = sweep(&[(0.1, 1.0), (0.1, 2.0)], FINE, &opts).unwrap();
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 9));
    }

    #[test]
    fn scaling_slopes() {
        let row = |beta: f64, lambda: f64| SweepRow {
            beta,
            lambda,
            a1: beta * beta / lambda,
            a2: 0.0,
            a_total: 0.0,
            visibility: 1.0,
            phase_c1: 0.0,
            err_a1: 0.0,
            err_a2: 0.0,
        };
        let by_lambda: Vec<SweepRow> = [0.5, 1.0, 2.0].iter().map(|&l| row(0.1, l)).collect();
        let by_beta: Vec<SweepRow> = [0.05, 0.1, 0.2].iter().map(|&b| row(b, 1.0)).collect();
        let s = scaling_summary(&by_lambda, &by_beta).unwrap();
        assert_relative_eq!(s.slope_lambda, -1.0, max_relative = 1e-12);
        assert_relative_eq!(s.slope_beta, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn unresolved_grid_is_flagged() {
        let grid = ModeGrid::spherical_cube(6, 3.0).unwrap();
        let check = a_modes_crosscheck(0.1, 1.0, 1.0, &grid).unwrap();
        assert!(!check.resolved);
        assert!(check.a_modes > 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(a1_smeared(1.5, 1.0, FINE), Err(Error::Domain(_))));
        assert!(a1_smeared(0.1, 0.0, FINE).is_err());
        assert!(a1_smeared(0.1, 1.0, -1.0).is_err());
        assert!(a_point_regulated(0.1, 0.0, FINE).is_err());
        assert!(phase_c1_check(&traverse_pair(0.1, 1.0, FINE, 0.0).unwrap().0, &traverse_pair(0.1, 1.0, FINE, 0.0).unwrap().1, 1.0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn exponents_positive_and_linear_in_coupling(beta in 0.02f64..0.5, lambda in 0.25f64..4.0, fine in 1e-4f64..1.0) {
            let a1 = a1_smeared(beta, lambda, fine).unwrap().value;
            let a2 = a2_smeared(beta, lambda, fine).unwrap().value;
            prop_assert!(a1 > 0.0 && a2 > 0.0);
            let unit = a1_smeared(beta, lambda, 1.0).unwrap().value;
            prop_assert!((a1 - fine * unit).abs() <= 1e-14 * a1);
        }

        #[test]
        fn port_probabilities_sum_to_one(a in 0.0f64..50.0, phase in -10.0f64..10.0) {
            let (p, q) = port_probabilities(a, phase);
            prop_assert!((p + q - 1.0).abs() <= f64::EPSILON);
            prop_assert!(p >= 0.0 && q >= 0.0);
        }
    }
}
