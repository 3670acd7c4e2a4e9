//! Classical vector potentials: the static solenoid potential, the retarded
//! potential of the moving electron and its time derivative.
//!
//! Coulomb parts are not modelled; only the vector potential sourced by
//! currents appears.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Displaced, Electron, Smearing, SolenoidModel, SolenoidRepr, Vec3, Worldline};
use crate::quadrature::{integrate_breaks, retarded_time_solve, Estimate, QuadratureSpec};

/// Complete elliptic integrals `(K(m), E(m))` with parameter `m = k²`, by
/// the arithmetic-geometric mean.
pub fn ellip_ke(m: f64) -> (f64, f64) {
    let mut a = 1.0;
    let mut b = (1.0 - m).sqrt();
    let mut c2_sum = 0.5 * m;
    let mut pow = 0.5;
    for _ in 0..40 {
        let c = 0.5 * (a - b);
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
        pow *= 2.0;
        c2_sum += pow * c * c;
        if c.abs() <= 1e-17 * a {
            break;
        }
    }
    let k = PI / (2.0 * a);
    (k, k * (1.0 - c2_sum))
}

/// `(1 - m/2) K(m) - E(m)`, accurate also for small `m` where the two terms
/// cancel to `O(m²)`.
fn loop_kernel(m: f64) -> f64 {
    if m < 0.5 {
        // (2 - m)K - 2E = (π m² / 16) ₂F₁(3/2, 3/2; 3; m)
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 0..200 {
            let nf = n as f64;
            term *= (1.5 + nf) * (1.5 + nf) / ((3.0 + nf) * (1.0 + nf)) * m;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        PI * m * m / 32.0 * sum
    } else {
        let (k, e) = ellip_ke(m);
        (1.0 - 0.5 * m) * k - e
    }
}

/// Azimuthal vector potential of a circular loop of radius `a` at height
/// `z0` carrying current `current`, evaluated at cylindrical `(rho, z)`.
pub fn loop_a_phi(current: f64, a: f64, z0: f64, rho: f64, z: f64) -> Result<f64> {
    let dz = z - z0;
    if rho <= 0.0 {
        return Ok(0.0);
    }
    let dist2 = (rho - a) * (rho - a) + dz * dz;
    if dist2 <= (1e-12 * a) * (1e-12 * a) {
        return Err(Error::Singular(format!("on the loop wire at rho = {rho}, z = {z}")));
    }
    let m = 4.0 * a * rho / ((a + rho) * (a + rho) + dz * dz);
    let k = m.sqrt();
    Ok(current / (PI * k) * (a / rho).sqrt() * loop_kernel(m))
}

fn azimuthal(x: &Vec3, a_phi: f64) -> Vec3 {
    let rho = x.xy().norm();
    if rho == 0.0 {
        return Vec3::zeros();
    }
    Vec3::new(-x.y / rho, x.x / rho, 0.0) * a_phi
}

/// Azimuthal component of the solenoid potential at cylindrical `(rho, z)`.
pub fn a_solenoid_phi(model: &SolenoidModel, rho: f64, z: f64) -> Result<f64> {
    let a = model.radius;
    match model.repr {
        SolenoidRepr::IdealInfinite => {
            if rho >= a {
                Ok(model.flux / (2.0 * PI * rho))
            } else {
                Ok(model.flux * rho / (2.0 * PI * a * a))
            }
        }
        SolenoidRepr::FiniteLoops { .. } => {
            let current = model.loop_current().unwrap_or(0.0);
            let mut sum = 0.0;
            for z0 in model.loop_heights() {
                sum += loop_a_phi(current, a, z0, rho, z)?;
            }
            Ok(sum)
        }
    }
}

/// Static vector potential of the solenoid.
pub fn a_solenoid(model: &SolenoidModel, x: &Vec3) -> Result<Vec3> {
    let rho = x.xy().norm();
    Ok(azimuthal(x, a_solenoid_phi(model, rho, x.z)?))
}

/// Retarded (Liénard–Wiechert) vector potential of a point charge moving
/// on `w`: `e v / (4π r κ)` at the retarded time, `κ = 1 - n·v`.
pub fn a_point_retarded<W: Worldline + ?Sized>(w: &W, charge: f64, x: &Vec3, t: f64) -> Result<Vec3> {
    if t <= 0.0 {
        return Ok(Vec3::zeros());
    }
    let Some(tr) = retarded_time_solve(w, x, t)? else {
        return Ok(Vec3::zeros());
    };
    let k = w.kinematics(tr);
    let d = x - k.position;
    let r = d.norm();
    if r == 0.0 || r <= 1e-14 * t {
        return Err(Error::Singular(format!("field point on the charge at t = {t}")));
    }
    let kappa = 1.0 - d.dot(&k.velocity) / r;
    Ok(k.velocity * (charge / (4.0 * PI * r * kappa)))
}

/// Time derivative of [`a_point_retarded`] away from the arrival front,
/// in closed form:
/// `e/(4π) [a/(κ² r) - v (v² - n·v - r n·a)/(κ³ r²)]`.
///
/// The step in `A` across the front `|x - X(0)| = t` is not included.
pub fn a_dot_point<W: Worldline + ?Sized>(w: &W, charge: f64, x: &Vec3, t: f64) -> Result<Vec3> {
    if t <= 0.0 {
        return Ok(Vec3::zeros());
    }
    let Some(tr) = retarded_time_solve(w, x, t)? else {
        return Ok(Vec3::zeros());
    };
    let k = w.kinematics(tr);
    let d = x - k.position;
    let r = d.norm();
    if r == 0.0 || r <= 1e-14 * t {
        return Err(Error::Singular(format!("field point on the charge at t = {t}")));
    }
    let n = d / r;
    let v = k.velocity;
    let acc = k.acceleration;
    let nv = n.dot(&v);
    let kappa = 1.0 - nv;
    let pre = charge / (4.0 * PI);
    Ok((acc / (kappa * kappa * r) - v * ((v.norm_squared() - nv - r * n.dot(&acc)) / (kappa.powi(3) * r * r))) * pre)
}

fn line_spec(charge: f64, scale: f64) -> QuadratureSpec {
    QuadratureSpec {
        abs_tol: 1e-13 * charge.abs().max(1e-300) / scale,
        rel_tol: 1e-10,
        max_subdivisions: 200,
        ..QuadratureSpec::default()
    }
}

/// Break points in the line coordinate `z' ∈ [0, sigma]`: where the arrival
/// front of each line element crosses `x`, and the closest approach.
fn line_breaks(electron: &Electron, sigma: f64, x: &Vec3, t: f64) -> Vec<f64> {
    let x0 = electron.trajectory.position(0.0);
    let perp2 = (x - x0).xy().norm_squared();
    let mut pts = vec![0.0, sigma];
    if t * t > perp2 {
        let h = (t * t - perp2).sqrt();
        pts.push(x.z - h);
        pts.push(x.z + h);
    }
    pts.push(x.z);
    let mut pts: Vec<f64> = pts.into_iter().filter(|&p| (0.0..=sigma).contains(&p)).collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

fn over_line<F>(electron: &Electron, x: &Vec3, t: f64, element: F) -> Result<Estimate<Vec3>>
where
    F: Fn(&Displaced<'_, crate::geometry::Trajectory>, &Vec3) -> Result<Vec3>,
{
    match electron.smearing {
        Smearing::Point => element(
            &Displaced {
                base: &electron.trajectory,
                offset: Vec3::zeros(),
            },
            x,
        )
        .map(|value| Estimate {
            value,
            error: 0.0,
            evaluations: 1,
            converged: true,
        }),
        Smearing::LineZ { sigma } => {
            let breaks = line_breaks(electron, sigma, x, t);
            let failure = std::cell::RefCell::new(None);
            let est = integrate_breaks(
                |zp: f64| {
                    let w = Displaced {
                        base: &electron.trajectory,
                        offset: Vec3::new(0.0, 0.0, zp),
                    };
                    match element(&w, x) {
                        Ok(v) => v / sigma,
                        Err(e) => {
                            failure.borrow_mut().get_or_insert(e);
                            Vec3::zeros()
                        }
                    }
                },
                &breaks,
                &line_spec(electron.charge, electron.trajectory.radius),
            );
            if let Some(e) = failure.into_inner() {
                return Err(e);
            }
            Ok(est)
        }
    }
}

/// Retarded vector potential of the electron: each element of the charge
/// profile is retarded separately and the results are averaged over the
/// profile.
pub fn a_electron_retarded(electron: &Electron, x: &Vec3, t: f64) -> Result<Vec3> {
    if t < 0.0 {
        return Err(Error::Domain(format!("field requested at t = {t} < 0")));
    }
    over_line(electron, x, t, |w, x| a_point_retarded(w, electron.charge, x, t)).map(|e| e.value)
}

/// Closed-form time derivative of the electron potential (regular part,
/// without the step across the arrival front).
pub fn a_dot_electron_analytic(electron: &Electron, x: &Vec3, t: f64) -> Result<Vec3> {
    if t < 0.0 {
        return Err(Error::Domain(format!("field requested at t = {t} < 0")));
    }
    over_line(electron, x, t, |w, x| a_dot_point(w, electron.charge, x, t)).map(|e| e.value)
}

/// Central finite difference of [`a_electron_retarded`] in time, with the
/// step halved until two successive Richardson-corrected estimates agree.
pub fn a_dot_electron(electron: &Electron, x: &Vec3, t: f64) -> Result<Estimate<Vec3>> {
    if t < 0.0 {
        return Err(Error::Domain(format!("field requested at t = {t} < 0")));
    }
    if t == 0.0 {
        return Ok(Estimate {
            value: Vec3::zeros(),
            error: 0.0,
            evaluations: 0,
            converged: true,
        });
    }
    let x0 = electron.trajectory.position(0.0);
    let front = (x - x0).norm();
    let scale = electron.trajectory.radius;
    let mut h = (0.05 * scale).min(0.5 * t);
    let mut evaluations = 0;
    let fd = |h: f64| -> Result<Vec3> {
        let ap = a_electron_retarded(electron, x, t + h)?;
        let am = a_electron_retarded(electron, x, (t - h).max(0.0))?;
        Ok((ap - am) / (2.0 * h))
    };
    let mut prev = fd(h)?;
    let mut prev_rich: Option<Vec3> = None;
    for _ in 0..30 {
        h *= 0.5;
        let cur = fd(h)?;
        evaluations += 4;
        let rich = (cur * 4.0 - prev) / 3.0;
        if let Some(pr) = prev_rich {
            let err = (rich - pr).norm();
            let straddles = electron.smearing == Smearing::Point && ((t + 2.0 * h) - front).abs() < 4.0 * h;
            if err <= 1e-7 * rich.norm().max(1e-14 * electron.charge.abs() / (scale * scale)) && !straddles {
                return Ok(Estimate {
                    value: rich,
                    error: err,
                    evaluations,
                    converged: true,
                });
            }
        }
        prev_rich = Some(rich);
        prev = cur;
        if h < 1e-7 * scale {
            break;
        }
    }
    Err(Error::NoConvergence {
        what: format!("time derivative near the arrival front at distance {front:e} from the start point"),
        estimate: prev.norm(),
        error: f64::NAN,
    })
}

/// All classical potentials at one spacetime point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub a_el: Vec3,
    pub a_sol: Vec3,
    pub a_cl: Vec3,
    pub a_dot_el: Vec3,
    pub at: (Vec3, f64),
}

pub fn field_sample(electron: &Electron, model: &SolenoidModel, x: &Vec3, t: f64) -> Result<FieldSample> {
    let a_el = a_electron_retarded(electron, x, t)?;
    let a_sol = a_solenoid(model, x)?;
    Ok(FieldSample {
        a_el,
        a_sol,
        a_cl: a_el + a_sol,
        a_dot_el: a_dot_electron_analytic(electron, x, t)?,
        at: (*x, t),
    })
}
