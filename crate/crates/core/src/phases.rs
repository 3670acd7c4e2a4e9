//! Phase integrals for one traverse: the electron moving in the solenoid
//! potential, the solenoid in the retarded electron potential, the
//! radiated-field term, and the bookkeeping built from them.
//!
//! All phases are for a charge `e` in natural units; `phi_ab = e Φ_flux`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fields::{a_dot_point, a_point_retarded, a_solenoid, a_solenoid_phi};
use crate::geometry::{Displaced, Electron, SolenoidModel, SolenoidRepr, Trajectory, Vec3, Worldline};
use crate::quadrature::{
    checked, integrate_breaks, integrate_breaks_par, neumaier_sum, smoothstep_panels, Estimate, QuadratureSpec,
};

/// Gauss–Legendre nodes used to average over a line charge.
pub const LINE_NODES: usize = 8;

/// A path for the plain A-B line integral `e ∫ A_sol · dl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Path {
    /// Circle in the plane `z = center.z`, counterclockwise.
    Circle { center: Vec3, radius: f64 },
    /// Arc of a circle about the z axis from angle `from` to `to`.
    Arc { radius: f64, z: f64, from: f64, to: f64 },
    /// Straight segments through the vertices; closed if the last vertex
    /// equals the first.
    Polygon { vertices: Vec<Vec3> },
}

impl Path {
    pub fn is_closed(&self) -> bool {
        match self {
            Path::Circle { .. } => true,
            Path::Arc { from, to, .. } => ((to - from).abs() - 2.0 * PI).abs() < 1e-14,
            Path::Polygon { vertices } => vertices.len() > 2 && vertices.first() == vertices.last(),
        }
    }
}

fn inside_body(model: &SolenoidModel, z: f64) -> bool {
    z.abs() <= model.half_length()
}

fn segment_axis_distance(p: &Vec3, q: &Vec3) -> f64 {
    let d = (q - p).xy();
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 {
        (-(p.xy().dot(&d)) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.xy() + d * s).norm()
}

/// `e ∫ A_sol · dl` along `path`.
pub fn phi_ab_path(model: &SolenoidModel, charge: f64, path: &Path, spec: &QuadratureSpec) -> Result<f64> {
    let a = model.radius;
    let clash = || Error::Domain("path crosses the solenoid body".into());
    let value = match path {
        Path::Circle { center, radius } => {
            let c = center.xy().norm();
            if inside_body(model, center.z) && (c - radius).abs() <= a {
                return Err(clash());
            }
            let f = |p: f64| {
                let (s, co) = p.sin_cos();
                let x = center + Vec3::new(radius * co, radius * s, 0.0);
                let dl = Vec3::new(-radius * s, radius * co, 0.0);
                a_solenoid(model, &x).map(|v| v.dot(&dl)).unwrap_or(f64::NAN)
            };
            checked(integrate_breaks(f, &[0.0, PI, 2.0 * PI], spec), "circle line integral")?.value
        }
        Path::Arc { radius, z, from, to } => {
            if inside_body(model, *z) && *radius <= a {
                return Err(clash());
            }
            // A_sol is azimuthal, so the integrand is constant on the arc
            a_solenoid_phi(model, *radius, *z)? * radius * (to - from)
        }
        Path::Polygon { vertices } => {
            let mut total = 0.0;
            for w in vertices.windows(2) {
                let (p, q) = (w[0], w[1]);
                let crosses = inside_body(model, p.z) || inside_body(model, q.z);
                if crosses && segment_axis_distance(&p, &q) <= a {
                    return Err(clash());
                }
                let d = q - p;
                let f = |s: f64| a_solenoid(model, &(p + d * s)).map(|v| v.dot(&d)).unwrap_or(f64::NAN);
                total += checked(integrate_breaks(f, &[0.0, 1.0], spec), "segment line integral")?.value;
            }
            total
        }
    };
    if !value.is_finite() {
        return Err(Error::Singular("line integral hit the winding".into()));
    }
    Ok(charge * value)
}

/// `e ∮ A_sol · dl` around a closed path.
pub fn phi_ab_loop(model: &SolenoidModel, charge: f64, path: &Path, spec: &QuadratureSpec) -> Result<f64> {
    if !path.is_closed() {
        return domain("phi_ab_loop needs a closed path");
    }
    phi_ab_path(model, charge, path, spec)
}

fn elements(electron: &Electron) -> Vec<(f64, f64)> {
    electron.smearing.elements(LINE_NODES)
}

fn phase_scale(electron: &Electron, model: &SolenoidModel) -> f64 {
    (electron.charge * model.flux).abs().max(f64::MIN_POSITIVE)
}

fn element_spec(spec: &QuadratureSpec, scale: f64) -> QuadratureSpec {
    spec.with_tolerances(spec.abs_tol.max(1e-3 * spec.rel_tol) * scale, spec.rel_tol)
}

/// `Φ21 = ½ e ∫_0^T u_el · A_sol(x_el) dt`.
pub fn phi21(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec) -> Result<Estimate<f64>> {
    let traj = &electron.trajectory;
    let tt = traj.traverse_time();
    let mut breaks = vec![0.0, tt];
    if traj.ramp_fraction > 0.0 {
        breaks.insert(1, traj.ramp_fraction * tt);
    }
    let spec = element_spec(spec, phase_scale(electron, model));
    let mut value = 0.0;
    let mut error = 0.0;
    let mut evaluations = 0;
    for (zo, w) in elements(electron) {
        let f = |t: f64| {
            let k = traj.kinematics(t);
            let x = k.position + Vec3::new(0.0, 0.0, zo);
            a_solenoid(model, &x).map(|a| a.dot(&k.velocity)).unwrap_or(f64::NAN)
        };
        let e = checked(integrate_breaks(f, &breaks, &spec), "phi21 path integral")?;
        value += w * e.value;
        error += w * e.error;
        evaluations += e.evaluations;
    }
    let pre = 0.5 * electron.charge;
    Ok(Estimate {
        value: pre * value,
        error: pre.abs() * error,
        evaluations,
        converged: true,
    })
}

fn finite_loops(model: &SolenoidModel) -> Result<(f64, Vec<f64>)> {
    match model.repr {
        SolenoidRepr::FiniteLoops { .. } => Ok((model.loop_current().unwrap_or(0.0), model.loop_heights())),
        SolenoidRepr::IdealInfinite => Err(Error::Unsupported(
            "solenoid-side integrals need the compact FiniteLoops winding".into(),
        )),
    }
}

/// Trapezoid rule for a smooth periodic integrand over `[0, 2π)`, doubling
/// the node count until successive values agree.
pub fn periodic_trapezoid<F: Fn(f64) -> f64>(f: F, n0: usize, abs_tol: f64, rel_tol: f64, max_nodes: usize) -> Estimate<f64> {
    let mut n = n0.max(4);
    let mut sum = neumaier_sum((0..n).map(|j| f(2.0 * PI * j as f64 / n as f64)));
    let mut evaluations = n;
    let mut value = 2.0 * PI * sum / n as f64;
    loop {
        let odd = neumaier_sum((0..n).map(|j| f(2.0 * PI * (j as f64 + 0.5) / n as f64)));
        evaluations += n;
        sum += odd;
        n *= 2;
        let next = 2.0 * PI * sum / n as f64;
        let err = (next - value).abs();
        value = next;
        let ok = err <= abs_tol.max(rel_tol * value.abs());
        if ok || 2 * n > max_nodes {
            return Estimate {
                value,
                error: err,
                evaluations,
                converged: ok,
            };
        }
    }
}

/// `Φ22 = ½ ∫_0^T dt ∫ d³x A_el · J_sol`, as time-integrated line integrals
/// of the retarded electron potential around every loop of the winding.
pub fn phi22(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec) -> Result<Estimate<f64>> {
    let (current, heights) = finite_loops(model)?;
    let traj = &electron.trajectory;
    let tt = traj.traverse_time();
    let ramp_end = traj.ramp_fraction * tt;
    let a = model.radius;
    let r0 = traj.radius;
    let scale = phase_scale(electron, model);
    let n_loops = heights.len() as f64;
    // tolerance on one loop's ∮∫ A·dl dt, in units where the sum is ~ e Φ
    let loop_abs = spec.abs_tol.max(1e-3 * spec.rel_tol) * scale / (n_loops * current.abs().max(f64::MIN_POSITIVE));
    let time_spec = spec.with_tolerances(1e-2 * loop_abs / (2.0 * PI * a), spec.rel_tol * 1e-1);

    let per_element = |zo: f64| -> Result<Estimate<f64>> {
        let w = Displaced {
            base: traj,
            offset: Vec3::new(0.0, 0.0, zo),
        };
        let start = w.position(0.0);
        let symmetric = zo == 0.0;
        let jobs: Vec<(f64, f64)> = if symmetric {
            heights.iter().filter(|&&z| z >= 0.0).map(|&z| (z, if z > 0.0 { 2.0 } else { 1.0 })).collect()
        } else {
            heights.iter().map(|&z| (z, 1.0)).collect()
        };
        let results: Vec<Result<Estimate<f64>>> = jobs
            .par_iter()
            .map(|&(zk, mult)| {
                let failure = std::cell::RefCell::new(None::<Error>);
                let around = |psi: f64| {
                    let (s, c) = psi.sin_cos();
                    let x = Vec3::new(a * c, a * s, zk);
                    let tangent = Vec3::new(-s, c, 0.0);
                    let t_arr = (x - start).norm();
                    if t_arr >= tt {
                        return 0.0;
                    }
                    let mut breaks = vec![t_arr, tt];
                    if ramp_end > 0.0 {
                        let tb = ramp_end + (x - w.position(ramp_end)).norm();
                        if tb > t_arr && tb < tt {
                            breaks.insert(1, tb);
                        }
                    }
                    let g = |t: f64| match a_point_retarded(&w, electron.charge, &x, t) {
                        Ok(v) => v.dot(&tangent),
                        Err(e) => {
                            failure.borrow_mut().get_or_insert(e);
                            0.0
                        }
                    };
                    let est = integrate_breaks(g, &breaks, &time_spec);
                    if !est.converged {
                        failure.borrow_mut().get_or_insert(Error::NoConvergence {
                            what: "phi22 time integral".into(),
                            estimate: est.value,
                            error: est.error,
                        });
                    }
                    a * est.value
                };
                // part of the loop may lie beyond the light cone of the start
                // point; the edge is a kink in psi, so split there
                let dz = zk - zo;
                let s_edge = (tt * tt - a * a - r0 * r0 - dz * dz) / (2.0 * a * r0);
                let est = if s_edge > -1.0 && s_edge < 1.0 {
                    let (p1, p2) = (s_edge.asin(), PI - s_edge.asin());
                    let gspec = spec.with_tolerances(1e-1 * loop_abs, spec.rel_tol);
                    integrate_breaks(around, &[p2 - 2.0 * PI, -0.5 * PI, p1, 0.5 * PI, p2], &gspec)
                } else {
                    periodic_trapezoid(around, 32, 1e-1 * loop_abs, spec.rel_tol, 1 << 14)
                };
                if let Some(e) = failure.into_inner() {
                    return Err(e);
                }
                if !est.converged {
                    return Err(Error::NoConvergence {
                        what: format!("phi22 loop integral at z = {zk}"),
                        estimate: est.value,
                        error: est.error,
                    });
                }
                Ok(est.map(|v| v * mult))
            })
            .collect();
        let mut vals = Vec::with_capacity(results.len());
        let mut error = 0.0;
        let mut evaluations = 0;
        for r in results {
            let e = r?;
            vals.push(e.value);
            error += e.error;
            evaluations += e.evaluations;
        }
        Ok(Estimate {
            value: neumaier_sum(vals),
            error,
            evaluations,
            converged: true,
        })
    };

    let mut value = 0.0;
    let mut error = 0.0;
    let mut evaluations = 0;
    for (zo, wgt) in elements(electron) {
        let e = per_element(zo)?;
        value += wgt * e.value;
        error += wgt * e.error;
        evaluations += e.evaluations;
    }
    Ok(Estimate {
        value: 0.5 * current * value,
        error: 0.5 * current.abs() * error,
        evaluations,
        converged: true,
    })
}

/// Parts of the radiated-field phase `Φ1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phi1Estimate {
    pub value: f64,
    /// `½ ∫ Ȧ_el · A_sol` over the interior of the causal ball.
    pub volume: f64,
    /// `½ ∫` over the arrival front of the step in `A_el` (impulsive start only).
    pub shell: f64,
    pub error: f64,
    /// Field outside the causal ball is exactly zero, so nothing is truncated.
    pub tail_estimate: f64,
    pub evaluations: usize,
}

/// `Φ1 = ½ ∫ d³x Ȧ_el(x, T) · A_sol(x)`.
///
/// The support of `Ȧ_el(·, T)` is the ball of radius `T` around the start
/// point, so the volume is exact. With an impulsive start `A_el` steps up on
/// the sphere `|x - x_el(0)| = T`; that step contributes the shell term.
/// The integral is done in cylindrical coordinates about the solenoid
/// axis so the solenoid potential is evaluated once per `(rho, z)`.
pub fn phi1(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec) -> Result<Phi1Estimate> {
    let mut out = Phi1Estimate {
        value: 0.0,
        volume: 0.0,
        shell: 0.0,
        error: 0.0,
        tail_estimate: 0.0,
        evaluations: 0,
    };
    for (zo, w) in elements(electron) {
        let p = phi1_point(electron, model, zo, spec)?;
        out.volume += w * p.volume;
        out.shell += w * p.shell;
        out.error += w * p.error;
        out.evaluations += p.evaluations;
    }
    out.value = out.volume + out.shell;
    Ok(out)
}

struct Ball<'a> {
    w: Displaced<'a, Trajectory>,
    charge: f64,
    /// start point, at `(0, -R, zo)`
    center: Vec3,
    radius_orbit: f64,
    tt: f64,
    v0: Vec3,
    /// sphere reached at `T` by signals from the end of the ramp, as
    /// (angle of its center on the orbit, radius); the field has a kink there
    ramp_front: Option<(f64, f64)>,
}

impl Ball<'_> {
    fn front_z_breaks(&self, rho: f64, out: &mut Vec<f64>) {
        if let Some((_, rf)) = self.ramp_front {
            for d in [rho - self.radius_orbit, rho + self.radius_orbit] {
                let h = rf * rf - d * d;
                if h > 0.0 {
                    out.push(self.center.z - h.sqrt());
                    out.push(self.center.z + h.sqrt());
                }
            }
        }
    }

    fn front_psi_breaks(&self, rho: f64, z: f64, lo: f64, hi: f64, out: &mut Vec<f64>) {
        if let Some((phi_c, rf)) = self.ramp_front {
            let dz = z - self.center.z;
            let r = self.radius_orbit;
            let c = (rho * rho + r * r + dz * dz - rf * rf) / (2.0 * rho * r);
            if c.abs() < 1.0 {
                for base in [phi_c + c.acos(), phi_c - c.acos()] {
                    for k in -1..=2 {
                        let p = base + 2.0 * PI * k as f64;
                        if p > lo && p < hi {
                            out.push(p);
                        }
                    }
                }
            }
        }
    }

    fn s_star(&self, rho: f64, z: f64) -> f64 {
        let dz = z - self.center.z;
        let r2 = self.radius_orbit * self.radius_orbit;
        (self.tt * self.tt - rho * rho - r2 - dz * dz) / (2.0 * rho * self.radius_orbit)
    }

    fn point(rho: f64, z: f64, psi: f64) -> (Vec3, Vec3) {
        let (s, c) = psi.sin_cos();
        (Vec3::new(rho * c, rho * s, z), Vec3::new(-s, c, 0.0))
    }

    /// Step in `A_el` across the front: the field just behind it.
    fn shell_azimuthal(&self, rho: f64, z: f64) -> f64 {
        if self.v0 == Vec3::zeros() {
            return 0.0;
        }
        let s = self.s_star(rho, z);
        if !(s > -1.0 && s < 1.0) {
            return 0.0;
        }
        let jac = self.tt / (rho * self.radius_orbit * (1.0 - s * s).sqrt());
        let mut sum = 0.0;
        for psi in [PI - s.asin(), 2.0 * PI + s.asin()] {
            let (x, tangent) = Self::point(rho, z, psi);
            let n = (x - self.center) / self.tt;
            let kappa = 1.0 - n.dot(&self.v0);
            let a_in = self.v0 * (self.charge / (4.0 * PI * self.tt * kappa));
            sum += jac * a_in.dot(&tangent);
        }
        sum
    }
}

fn phi1_point(electron: &Electron, model: &SolenoidModel, zo: f64, spec: &QuadratureSpec) -> Result<Phi1Estimate> {
    let traj = &electron.trajectory;
    let r = traj.radius;
    let tt = traj.traverse_time();
    let w = Displaced {
        base: traj,
        offset: Vec3::new(0.0, 0.0, zo),
    };
    let ball = Ball {
        w,
        charge: electron.charge,
        center: w.position(0.0),
        radius_orbit: r,
        tt,
        v0: if traj.ramp_fraction > 0.0 {
            Vec3::zeros()
        } else {
            traj.kinematics(f64::MIN_POSITIVE).velocity
        },
        ramp_front: (traj.ramp_fraction > 0.0).then(|| {
            let tr = traj.ramp_fraction * tt;
            (traj.angle(tr), tt - tr)
        }),
    };
    let a = model.radius;
    let scale = phase_scale(electron, model);
    let target = spec.abs_tol.max(1e-3 * spec.rel_tol) * scale;
    let rho_max = tt + r;
    let loop_heights = model.loop_heights();
    let spacing = match model.repr {
        SolenoidRepr::FiniteLoops { n_loops, length } => length / n_loops as f64,
        SolenoidRepr::IdealInfinite => 0.0,
    };
    let half_len = model.half_length();

    let failure = std::sync::Mutex::new(None::<Error>);
    let record = |e: Error| {
        let mut slot = failure.lock().expect("poisoned");
        slot.get_or_insert(e);
    };

    let mid_abs = 0.1 * target / rho_max;
    // azimuthal integral and, if it did not converge, its error estimate
    let inner = |rho: f64, z: f64, weight: f64| -> (f64, f64) {
        let s = ball.s_star(rho, z);
        if s <= -1.0 {
            return (0.0, 0.0);
        }
        let (lo, hi) = if s >= 1.0 {
            (-0.5 * PI, 1.5 * PI)
        } else {
            (PI - s.asin(), 2.0 * PI + s.asin())
        };
        let mut breaks = vec![lo, hi];
        for extra in [0.5 * PI, 1.5 * PI] {
            if extra > lo && extra < hi {
                breaks.push(extra);
            }
        }
        ball.front_psi_breaks(rho, z, lo, hi, &mut breaks);
        breaks.sort_by(f64::total_cmp);
        let ispec = spec.with_tolerances(0.1 * mid_abs / weight.max(f64::MIN_POSITIVE), spec.rel_tol);
        let g = |psi: f64| {
            let (x, tangent) = Ball::point(rho, z, psi);
            match a_dot_point(&ball.w, ball.charge, &x, tt) {
                Ok(v) => v.dot(&tangent),
                Err(e) => {
                    record(e);
                    0.0
                }
            }
        };
        let est = integrate_breaks(g, &breaks, &ispec);
        // Close to the final electron position the integrand is a nearly
        // cancelling 1/r² spike. Misses there are carried as an error density
        // and only fail the integral if they add up.
        (est.value, if est.converged { 0.0 } else { est.error })
    };

    // (volume, shell) integrand at fixed rho, integrated over z
    let column = |rho: f64| -> Vector3<f64> {
        let dz_far = tt * tt - (rho - r) * (rho - r);
        if dz_far <= 0.0 {
            return Vector3::zeros();
        }
        let zmax = dz_far.sqrt();
        let (zlo, zhi) = (zo - zmax, zo + zmax);
        let mut breaks = vec![zlo, zhi, zo];
        let dz_near = tt * tt - (rho + r) * (rho + r);
        if dz_near > 0.0 {
            breaks.push(zo - dz_near.sqrt());
            breaks.push(zo + dz_near.sqrt());
        }
        ball.front_z_breaks(rho, &mut breaks);
        if half_len.is_finite() {
            breaks.push(-half_len);
            breaks.push(half_len);
            if (rho - a).abs() < spacing {
                breaks.extend(loop_heights.iter().copied());
            }
        }
        let mut breaks: Vec<f64> = breaks.into_iter().filter(|&z| z >= zlo && z <= zhi).collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let mspec = spec.with_tolerances(mid_abs, spec.rel_tol);
        let (taus, g) = smoothstep_panels(
            |z: f64| match a_solenoid_phi(model, rho, z) {
                Ok(ap) => {
                    let (vol, miss) = inner(rho, z, rho * ap.abs() * (zhi - zlo));
                    Vector3::new(vol * ap, ball.shell_azimuthal(rho, z) * ap, miss * ap.abs()) * rho
                }
                Err(e) => {
                    record(e);
                    Vector3::zeros()
                }
            },
            &breaks,
        );
        let est = integrate_breaks(g, &taus, &mspec);
        if !est.converged && est.error * rho_max > target {
            record(Error::NoConvergence {
                what: format!("phi1 column at rho = {rho}"),
                estimate: est.value.norm(),
                error: est.error,
            });
        }
        est.value
    };

    let mut rho_breaks = vec![0.0, a, r, 2.0 * r, rho_max];
    if tt > r {
        rho_breaks.push(tt - r);
    }
    rho_breaks.push(tt);
    if let Some((_, rf)) = ball.ramp_front {
        rho_breaks.extend([(rf - r).abs(), rf, rf + r]);
    }
    let mut rho_breaks: Vec<f64> = rho_breaks.into_iter().filter(|&p| p >= 0.0 && p <= rho_max).collect();
    rho_breaks.sort_by(f64::total_cmp);
    rho_breaks.dedup();

    let ospec = spec.with_tolerances(target, spec.rel_tol);
    let (taus, g) = smoothstep_panels(column, &rho_breaks);
    let est = integrate_breaks_par(g, &taus, &ospec);
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    if !est.converged {
        return Err(Error::NoConvergence {
            what: "phi1 volume integral".into(),
            estimate: est.value.norm(),
            error: est.error,
        });
    }
    let missed = 0.5 * est.value.z;
    if missed > target {
        return Err(Error::NoConvergence {
            what: "phi1 azimuthal integrals near the orbit".into(),
            estimate: 0.5 * (est.value.x + est.value.y),
            error: missed,
        });
    }
    Ok(Phi1Estimate {
        value: 0.5 * (est.value.x + est.value.y),
        volume: 0.5 * est.value.x,
        shell: 0.5 * est.value.y,
        error: 0.5 * est.error + missed,
        tail_estimate: 0.0,
        evaluations: est.evaluations,
    })
}

/// Residual of `Φ1 + Φ22 = Φ21` from independently computed sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub relative: f64,
}

pub fn identity_from(phi1: f64, phi22: f64, phi21: f64) -> IdentityCheck {
    let lhs = phi1 + phi22;
    let residual = (lhs - phi21).abs();
    IdentityCheck {
        lhs,
        rhs: phi21,
        residual,
        relative: if phi21 != 0.0 { residual / phi21.abs() } else { residual },
    }
}

pub fn phase_identity(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec) -> Result<IdentityCheck> {
    let p1 = phi1(electron, model, spec)?;
    let p22 = phi22(electron, model, spec)?;
    let p21 = phi21(electron, model, spec)?;
    Ok(identity_from(p1.value, p22.value, p21.value))
}

/// Traverse-difference phase of the separable Hamiltonian in which the
/// electron feels `A_sol` and the solenoid feels `A_el`, both as external
/// fields: `(2Φ21 + 2Φ22)_R - (2Φ21 + 2Φ22)_L = 4(Φ21 + Φ22)`.
pub fn naive_from(phi21: f64, phi22: f64) -> f64 {
    4.0 * (phi21 + phi22)
}

pub fn naive_double_count(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec) -> Result<f64> {
    let p21 = phi21(electron, model, spec)?.value;
    let p22 = phi22(electron, model, spec)?.value;
    Ok(naive_from(p21, p22))
}

/// The c-number phases of the product ansatz over `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtraPhaseLedger {
    /// `-∫∫ A_cl · J_el`, self term dropped: `-2Φ21`.
    pub extra_el: f64,
    /// `-∫∫ A_cl · J_sol`, self term dropped: `-2Φ22`.
    pub extra_sol: f64,
    /// Field phase `Φ1 + Φ21 + Φ22` plus both extra phases.
    pub corrected_a_phase: f64,
    /// Electron phase `2Φ21` + solenoid phase `2Φ22` + corrected field phase.
    pub grand_total: f64,
}

pub fn extra_phase_ledger_from(phi1: f64, phi21: f64, phi22: f64) -> ExtraPhaseLedger {
    let extra_el = -2.0 * phi21;
    let extra_sol = -2.0 * phi22;
    let field = phi1 + phi21 + phi22;
    let corrected = field + extra_el + extra_sol;
    ExtraPhaseLedger {
        extra_el,
        extra_sol,
        corrected_a_phase: corrected,
        grand_total: 2.0 * phi21 + 2.0 * phi22 + corrected,
    }
}

pub fn extra_phase_ledger(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec) -> Result<ExtraPhaseLedger> {
    let p1 = phi1(electron, model, spec)?;
    let p21 = phi21(electron, model, spec)?;
    let p22 = phi22(electron, model, spec)?;
    Ok(extra_phase_ledger_from(p1.value, p21.value, p22.value))
}

/// Detection probabilities `½[1 ± e^{-a} cos Φ]` on the two sides.
pub fn interference_probability(phase: f64, a: f64) -> Result<(f64, f64)> {
    if !(a >= 0.0) {
        return domain(format!("decoherence exponent must be >= 0, got {a}"));
    }
    let v = (-a).exp() * phase.cos();
    Ok((0.5 * (1.0 + v), 0.5 * (1.0 - v)))
}

/// Every phase quantity for one traverse pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phi_ab: f64,
    pub phi21: f64,
    pub phi22: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub phi_total_right: f64,
    pub phi_total_left: f64,
    pub naive_total: f64,
    pub extra_phase_el: f64,
    pub extra_phase_sol: f64,
    pub corrected_a_phase: f64,
    pub grand_total: f64,
    pub phi1_volume: f64,
    pub phi1_shell: f64,
    pub errors: BTreeMap<String, f64>,
    pub identity_residuals: BTreeMap<String, f64>,
}

/// Builds the report for the right traverse of `electron`. With
/// `full_left` the left traverse is computed from scratch instead of by
/// sign flip.
pub fn phase_report(electron: &Electron, model: &SolenoidModel, spec: &QuadratureSpec, full_left: bool) -> Result<PhaseReport> {
    let phi_ab = electron.charge * model.flux;
    let p21 = phi21(electron, model, spec)?;
    let p22 = phi22(electron, model, spec)?;
    let p1 = phi1(electron, model, spec)?;
    let right = p1.value + p21.value + p22.value;
    let left = if full_left {
        let el = electron.mirrored();
        phi21(&el, model, spec)?.value + phi22(&el, model, spec)?.value + phi1(&el, model, spec)?.value
    } else {
        -right
    };
    let ledger = extra_phase_ledger_from(p1.value, p21.value, p22.value);
    let id = identity_from(p1.value, p22.value, p21.value);
    let mut residuals = BTreeMap::new();
    residuals.insert("phase_identity".to_string(), id.relative);
    residuals.insert("total_vs_half_ab".to_string(), (right - 0.5 * phi_ab).abs() / (0.5 * phi_ab.abs()).max(f64::MIN_POSITIVE));
    residuals.insert("left_plus_right".to_string(), (left + right).abs() / right.abs().max(f64::MIN_POSITIVE));
    residuals.insert("reciprocity_phi22_phi21".to_string(), (p22.value - p21.value).abs() / p21.value.abs().max(f64::MIN_POSITIVE));
    let mut errors = BTreeMap::new();
    errors.insert("phi21".to_string(), p21.error);
    errors.insert("phi22".to_string(), p22.error);
    errors.insert("phi1".to_string(), p1.error);
    Ok(PhaseReport {
        phi_ab,
        phi21: p21.value,
        phi22: p22.value,
        phi1: p1.value,
        phi2: p21.value + p22.value,
        phi_total_right: right,
        phi_total_left: left,
        naive_total: naive_from(p21.value, p22.value),
        extra_phase_el: ledger.extra_el,
        extra_phase_sol: ledger.extra_sol,
        corrected_a_phase: ledger.corrected_a_phase,
        grand_total: ledger.grand_total,
        phi1_volume: p1.volume,
        phi1_shell: p1.shell,
        errors,
        identity_residuals: residuals,
    })
}
