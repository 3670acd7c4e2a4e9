//! Electron traverses, smeared electron current, solenoid current model and
//! the dimensionless parameter groups.
//!
//! Natural units throughout: `c = ħ = 1`, Heaviside–Lorentz field
//! normalisation (`∇²A = -J` in the static limit), so a charge `e` has
//! `e² = fine_structure`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::quadrature::gauss_legendre;

pub type Vec3 = Vector3<f64>;

/// Coupling and the two dimensionless ratios that control the overlap
/// amplitude: `beta = u/c` and `lambda = sigma/R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Couplings {
    pub fine_structure: f64,
    pub beta: f64,
    pub lambda: f64,
}

pub const FINE_STRUCTURE: f64 = 1.0 / 137.036;

impl Couplings {
    pub fn new(fine_structure: f64, beta: f64, lambda: f64) -> Result<Self> {
        if !(fine_structure > 0.0 && fine_structure.is_finite()) {
            return domain(format!("fine_structure must be > 0, got {fine_structure}"));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return domain(format!("beta must satisfy 0 < beta < 1, got {beta}"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return domain(format!("lambda must be > 0, got {lambda}"));
        }
        Ok(Self {
            fine_structure,
            beta,
            lambda,
        })
    }

    /// Electron charge in natural Heaviside–Lorentz units.
    pub fn charge(&self) -> f64 {
        self.fine_structure.sqrt()
    }
}

/// Direction of the half-circle traverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    /// Counterclockwise, from `phi = -pi/2` to `phi = pi/2`.
    Right,
    /// Clockwise, from `phi = 3pi/2` to `phi = pi/2`.
    Left,
}

impl Sense {
    fn start_angle(self) -> f64 {
        match self {
            Sense::Right => -PI / 2.0,
            Sense::Left => 1.5 * PI,
        }
    }

    fn direction(self) -> f64 {
        match self {
            Sense::Right => 1.0,
            Sense::Left => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Sense::Right => Sense::Left,
            Sense::Left => Sense::Right,
        }
    }
}

/// Position, velocity and acceleration of a source at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

/// A source world line that is at rest for `t < 0` and moves for `t >= 0`.
pub trait Worldline {
    fn kinematics(&self, t: f64) -> Kinematics;

    fn position(&self, t: f64) -> Vec3 {
        self.kinematics(t).position
    }

    /// Upper bound on the speed, used to bracket retarded times.
    fn max_speed(&self) -> f64;
}

/// Half-circle traverse of radius `R` at speed `u` in the `z = 0` plane.
///
/// With `ramp_fraction = eta > 0` the speed rises from rest along a
/// smoothstep over `[0, eta T]` and the plateau speed is raised to
/// `u / (1 - eta/2)` so the traverse still ends at `phi = pi/2` at
/// `T = pi R / u`. For `t > T` the motion continues along the circle at the
/// plateau speed; field evaluations at `t <= T` never look at that part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub radius: f64,
    pub speed: f64,
    pub sense: Sense,
    pub ramp_fraction: f64,
}

impl Trajectory {
    pub fn new(radius: f64, speed: f64, sense: Sense) -> Result<Self> {
        Self::with_ramp(radius, speed, sense, 0.0)
    }

    pub fn with_ramp(radius: f64, speed: f64, sense: Sense, ramp_fraction: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return domain(format!("radius must be > 0, got {radius}"));
        }
        if !(speed > 0.0 && speed < 1.0) {
            return domain(format!("speed must satisfy 0 < u < 1, got {speed}"));
        }
        if !(0.0..0.5).contains(&ramp_fraction) {
            return domain(format!("ramp fraction must lie in [0, 0.5), got {ramp_fraction}"));
        }
        let traj = Self {
            radius,
            speed,
            sense,
            ramp_fraction,
        };
        if traj.plateau_speed() >= 1.0 {
            return domain("ramped plateau speed reaches c");
        }
        Ok(traj)
    }

    pub fn mirrored(&self) -> Self {
        Self {
            sense: self.sense.flipped(),
            ..*self
        }
    }

    pub fn traverse_time(&self) -> f64 {
        PI * self.radius / self.speed
    }

    pub fn plateau_speed(&self) -> f64 {
        self.speed / (1.0 - 0.5 * self.ramp_fraction)
    }

    fn ramp_time(&self) -> f64 {
        self.ramp_fraction * self.traverse_time()
    }

    /// (arc length travelled, speed, tangential acceleration) at time `t`.
    fn arc(&self, t: f64) -> (f64, f64, f64) {
        if t <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let up = self.plateau_speed();
        let tr = self.ramp_time();
        if tr > 0.0 && t < tr {
            let x = t / tr;
            let s = up * tr * (x * x * x - 0.5 * x * x * x * x);
            let v = up * (3.0 * x * x - 2.0 * x * x * x);
            let a = up * (6.0 * x - 6.0 * x * x) / tr;
            (s, v, a)
        } else {
            (up * (0.5 * tr + t - tr), up, 0.0)
        }
    }

    /// Polar angle of the electron at time `t`.
    pub fn angle(&self, t: f64) -> f64 {
        self.sense.start_angle() + self.sense.direction() * self.arc(t).0 / self.radius
    }

    /// Position and velocity on `[0, T]`. At `t = 0` an impulsive start
    /// reports the velocity just after the kick.
    pub fn position_velocity(&self, t: f64) -> Result<(Vec3, Vec3)> {
        let tt = self.traverse_time();
        if !(t >= -1e-12 * tt && t <= tt * (1.0 + 1e-12)) {
            return domain(format!("t = {t} outside the traverse [0, {tt}]"));
        }
        let k = self.kinematics(t.max(f64::MIN_POSITIVE));
        Ok((k.position, k.velocity))
    }
}

impl Worldline for Trajectory {
    fn kinematics(&self, t: f64) -> Kinematics {
        let (s, v, at) = self.arc(t);
        let dir = self.sense.direction();
        let phi = self.sense.start_angle() + dir * s / self.radius;
        let (sin, cos) = phi.sin_cos();
        let radial = Vec3::new(cos, sin, 0.0);
        let tangent = Vec3::new(-sin, cos, 0.0) * dir;
        Kinematics {
            position: radial * self.radius,
            velocity: tangent * v,
            acceleration: tangent * at - radial * (v * v / self.radius),
        }
    }

    fn max_speed(&self) -> f64 {
        self.plateau_speed()
    }
}

/// A world line rigidly displaced by a constant offset.
#[derive(Debug, Clone, Copy)]
pub struct Displaced<'a, W: Worldline> {
    pub base: &'a W,
    pub offset: Vec3,
}

impl<W: Worldline> Worldline for Displaced<'_, W> {
    fn kinematics(&self, t: f64) -> Kinematics {
        let mut k = self.base.kinematics(t);
        k.position += self.offset;
        k
    }

    fn max_speed(&self) -> f64 {
        self.base.max_speed()
    }
}

/// Charge profile of the electron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Smearing {
    Point,
    /// Uniform line charge along `z' ∈ [0, sigma]` riding on the trajectory.
    LineZ { sigma: f64 },
}

impl Smearing {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Smearing::Point => Ok(()),
            Smearing::LineZ { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            Smearing::LineZ { sigma } => domain(format!("line smearing needs sigma > 0, got {sigma}")),
        }
    }

    pub fn extent(&self) -> f64 {
        match *self {
            Smearing::Point => 0.0,
            Smearing::LineZ { sigma } => sigma,
        }
    }

    /// Quadrature over the charge profile: `(z offset, weight)` pairs whose
    /// weights sum to one. `Point` has a single element.
    pub fn elements(&self, n: usize) -> Vec<(f64, f64)> {
        match *self {
            Smearing::Point => vec![(0.0, 1.0)],
            Smearing::LineZ { sigma } => {
                let (x, w) = gauss_legendre(n.max(1));
                x.iter()
                    .zip(&w)
                    .map(|(&xi, &wi)| (0.5 * sigma * (xi + 1.0), 0.5 * wi))
                    .collect()
            }
        }
    }
}

/// A classical electron: trajectory, charge profile and charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Electron {
    pub trajectory: Trajectory,
    pub smearing: Smearing,
    pub charge: f64,
}

impl Electron {
    pub fn new(trajectory: Trajectory, smearing: Smearing, charge: f64) -> Result<Self> {
        smearing.validate()?;
        if !charge.is_finite() {
            return domain("charge must be finite");
        }
        Ok(Self {
            trajectory,
            smearing,
            charge,
        })
    }

    pub fn mirrored(&self) -> Self {
        Self {
            trajectory: self.trajectory.mirrored(),
            ..*self
        }
    }
}

/// A current element `e u w` located at `position`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceElement {
    pub position: Vec3,
    pub current: Vec3,
}

/// Discretised current of the electron at time `t` (sums to `e u(t)`).
pub fn source_elements(electron: &Electron, t: f64, n: usize) -> Vec<SourceElement> {
    let k = electron.trajectory.kinematics(t);
    electron
        .smearing
        .elements(n)
        .into_iter()
        .map(|(z, w)| SourceElement {
            position: k.position + Vec3::new(0.0, 0.0, z),
            current: k.velocity * (electron.charge * w),
        })
        .collect()
}

/// Pointwise current density. Both profiles are distributions supported on
/// a point or a segment: off the support the density is zero, on it the
/// call reports a singular point.
pub fn current_density(electron: &Electron, x: &Vec3, t: f64) -> Result<Vec3> {
    let (pos, _) = electron.trajectory.position_velocity(t)?;
    let scale = electron.trajectory.radius;
    let d = x - pos;
    let on_support = match electron.smearing {
        Smearing::Point => d.norm() <= 1e-12 * scale,
        Smearing::LineZ { sigma } => {
            d.xy().norm() <= 1e-12 * scale && d.z >= -1e-12 * scale && d.z <= sigma * (1.0 + 1e-12)
        }
    };
    if on_support {
        return Err(Error::Singular(format!("current density evaluated on its support at t = {t}")));
    }
    Ok(Vec3::zeros())
}

/// Rotation by 180° about the y axis: `(x, y, z) -> (-x, y, -z)`.
/// Applies equally to points and vectors.
pub fn mirror_map(x: &Vec3) -> Vec3 {
    Vec3::new(-x.x, x.y, -x.z)
}

/// How the solenoid current is represented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SolenoidRepr {
    /// Infinitely long, tightly wound; analytic vector potential.
    IdealInfinite,
    /// `n_loops` equal circular loops spread uniformly over `|z| < length/2`.
    FiniteLoops { n_loops: usize, length: f64 },
}

/// Solenoid along the z axis carrying `flux` through its cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolenoidModel {
    pub radius: f64,
    pub flux: f64,
    pub repr: SolenoidRepr,
}

impl SolenoidModel {
    pub fn new(radius: f64, flux: f64, repr: SolenoidRepr) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return domain(format!("solenoid radius must be > 0, got {radius}"));
        }
        if !flux.is_finite() {
            return domain("flux must be finite");
        }
        if let SolenoidRepr::FiniteLoops { n_loops, length } = repr {
            if n_loops == 0 || !(length > 0.0 && length.is_finite()) {
                return domain("finite solenoid needs n_loops > 0 and length > 0");
            }
        }
        Ok(Self { radius, flux, repr })
    }

    pub fn ideal(radius: f64, flux: f64) -> Result<Self> {
        Self::new(radius, flux, SolenoidRepr::IdealInfinite)
    }

    pub fn finite(radius: f64, flux: f64, n_loops: usize, length: f64) -> Result<Self> {
        Self::new(radius, flux, SolenoidRepr::FiniteLoops { n_loops, length })
    }

    pub fn with_flux(&self, flux: f64) -> Self {
        Self { flux, ..*self }
    }

    /// Current in each loop such that the interior field of the equivalent
    /// infinite winding, `B = N I / L`, carries `flux` through `pi a²`.
    pub fn loop_current(&self) -> Option<f64> {
        match self.repr {
            SolenoidRepr::IdealInfinite => None,
            SolenoidRepr::FiniteLoops { n_loops, length } => {
                Some(self.flux * length / (n_loops as f64 * PI * self.radius * self.radius))
            }
        }
    }

    /// Loop heights, symmetric about `z = 0`.
    pub fn loop_heights(&self) -> Vec<f64> {
        match self.repr {
            SolenoidRepr::IdealInfinite => Vec::new(),
            SolenoidRepr::FiniteLoops { n_loops, length } => (0..n_loops)
                .map(|k| -0.5 * length + (k as f64 + 0.5) * length / n_loops as f64)
                .collect(),
        }
    }

    /// Half-length of the winding (infinite for the ideal solenoid).
    pub fn half_length(&self) -> f64 {
        match self.repr {
            SolenoidRepr::IdealInfinite => f64::INFINITY,
            SolenoidRepr::FiniteLoops { length, .. } => 0.5 * length,
        }
    }

    /// Checks that an electron orbiting at `orbit_radius` stays outside.
    pub fn check_orbit(&self, orbit_radius: f64) -> Result<()> {
        if self.radius >= orbit_radius {
            return domain(format!(
                "solenoid radius {} must be smaller than the orbit radius {orbit_radius}",
                self.radius
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn right(u: f64) -> Trajectory {
        Trajectory::new(1.0, u, Sense::Right).unwrap()
    }

    #[test]
    fn right_traverse_endpoints() {
        let traj = right(0.2);
        let (x0, v0) = traj.position_velocity(0.0).unwrap();
        assert_abs_diff_eq!((x0 - Vec3::new(0.0, -1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((v0 - Vec3::new(0.2, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        // the worldline itself is at rest up to t = 0
        assert_eq!(traj.kinematics(0.0).velocity, Vec3::zeros());
        let (x1, _) = traj.position_velocity(traj.traverse_time()).unwrap();
        assert_abs_diff_eq!((x1 - Vec3::new(0.0, 1.0, 0.0)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn left_traverse_starts_moving_in_minus_x() {
        let traj = right(0.2).mirrored();
        let k = traj.kinematics(1e-9);
        assert_abs_diff_eq!((k.position - Vec3::new(0.0, -1.0, 0.0)).norm(), 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!((k.velocity - Vec3::new(-0.2, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-8);
        let (x1, _) = traj.position_velocity(traj.traverse_time()).unwrap();
        assert_abs_diff_eq!((x1 - Vec3::new(0.0, 1.0, 0.0)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn traverse_time_and_radius() {
        for &u in &[0.01, 0.3, 0.9] {
            let traj = Trajectory::new(2.5, u, Sense::Left).unwrap();
            assert_eq!(traj.traverse_time(), PI * 2.5 / u);
            for i in 0..=40 {
                let t = traj.traverse_time() * i as f64 / 40.0;
                let (x, v) = traj.position_velocity(t).unwrap();
                assert_abs_diff_eq!(x.norm(), 2.5, epsilon = 1e-12);
                if t > 0.0 {
                    assert_abs_diff_eq!(v.norm(), u, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn outside_traverse_is_domain_error() {
        let traj = right(0.1);
        assert!(matches!(traj.position_velocity(-1.0), Err(Error::Domain(_))));
        assert!(traj.position_velocity(traj.traverse_time() * 1.01).is_err());
    }

    #[test]
    fn ramped_traverse_still_ends_on_axis() {
        let traj = Trajectory::with_ramp(1.0, 0.1, Sense::Right, 0.05).unwrap();
        let (x1, v1) = traj.position_velocity(traj.traverse_time()).unwrap();
        assert_abs_diff_eq!((x1 - Vec3::new(0.0, 1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v1.norm(), traj.plateau_speed(), epsilon = 1e-14);
        let k = traj.kinematics(0.0);
        assert_eq!(k.velocity.norm(), 0.0);
        // velocity is the derivative of position
        let t = 0.3 * traj.ramp_time();
        let h = 1e-5;
        let fd = (traj.position(t + h) - traj.position(t - h)) / (2.0 * h);
        assert_abs_diff_eq!((fd - traj.kinematics(t).velocity).norm(), 0.0, epsilon = 1e-9);
        let fd_a = (traj.kinematics(t + h).velocity - traj.kinematics(t - h).velocity) / (2.0 * h);
        assert_abs_diff_eq!((fd_a - traj.kinematics(t).acceleration).norm(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn mirror_is_an_involution() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(mirror_map(&x), Vec3::new(-1.0, 2.0, -3.0));
        assert_eq!(mirror_map(&mirror_map(&x)), x);
    }

    #[test]
    fn mirror_maps_right_onto_left() {
        let r = right(0.3);
        let l = r.mirrored();
        let tt = r.traverse_time();
        for &f in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let t = f * tt;
            let kr = r.kinematics(t + 1e-300);
            let kl = l.kinematics(t + 1e-300);
            assert_abs_diff_eq!((mirror_map(&kr.position) - kl.position).norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!((mirror_map(&kr.velocity) - kl.velocity).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn point_current_vanishes_off_support() {
        let e = Electron::new(right(0.1), Smearing::Point, 1.0).unwrap();
        let (x, _) = e.trajectory.position_velocity(3.0).unwrap();
        let j = current_density(&e, &(x + Vec3::new(0.1, 0.0, 0.0)), 3.0).unwrap();
        assert_eq!(j, Vec3::zeros());
        assert!(matches!(current_density(&e, &x, 3.0), Err(Error::Singular(_))));
    }

    #[test]
    fn line_current_integrates_to_e_u() {
        let e = Electron::new(right(0.1), Smearing::LineZ { sigma: 0.7 }, 0.3).unwrap();
        let t = 4.2;
        let total: Vec3 = source_elements(&e, t, 9).iter().map(|s| s.current).sum();
        let (_, v) = e.trajectory.position_velocity(t).unwrap();
        assert_abs_diff_eq!((total - v * 0.3).norm(), 0.0, epsilon = 1e-15);
        for s in source_elements(&e, t, 9) {
            assert!(s.position.z >= 0.0 && s.position.z <= 0.7);
        }
    }

    #[test]
    fn mirrored_currents_map_onto_each_other() {
        let er = Electron::new(right(0.25), Smearing::LineZ { sigma: 0.4 }, 1.0).unwrap();
        let el = er.mirrored();
        let tt = er.trajectory.traverse_time();
        for i in 1..=8 {
            let t = tt * i as f64 / 8.0;
            let jr = source_elements(&er, t, 5);
            let jl = source_elements(&el, t, 5);
            for (a, b) in jr.iter().zip(&jl) {
                // the line extends to +z for both traverses, so only the
                // in-plane part and the current map under the rotation
                let pa = mirror_map(&a.position);
                assert_abs_diff_eq!((pa.xy() - b.position.xy()).norm(), 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!((mirror_map(&a.current) - b.current).norm(), 0.0, epsilon = 1e-12);
            }
        }
        // off-support grid samples are zero for both traverses
        for i in 0..5 {
            let x = Vec3::new(0.3 * i as f64 - 0.6, 0.2, 0.1 * i as f64);
            let t = tt / 3.0;
            assert_eq!(current_density(&er, &x, t).unwrap(), Vec3::zeros());
            assert_eq!(current_density(&el, &mirror_map(&x), t).unwrap(), Vec3::zeros());
        }
    }

    #[test]
    fn loop_current_reproduces_flux() {
        let s = SolenoidModel::finite(0.25, 2.0, 200, 20.0).unwrap();
        let i = s.loop_current().unwrap();
        // B = N I / L inside an ideal winding
        assert_abs_diff_eq!(200.0 * i / 20.0 * PI * 0.0625, 2.0, epsilon = 1e-12);
        let z = s.loop_heights();
        assert_eq!(z.len(), 200);
        assert_abs_diff_eq!(z[0], -z[199], epsilon = 1e-12);
    }

    #[test]
    fn couplings_validation() {
        assert!(Couplings::new(FINE_STRUCTURE, 1.5, 1.0).is_err());
        assert!(Couplings::new(FINE_STRUCTURE, 0.1, 0.0).is_err());
        assert!(Couplings::new(-1.0, 0.1, 1.0).is_err());
        let c = Couplings::new(FINE_STRUCTURE, 0.1, 1.0).unwrap();
        assert_abs_diff_eq!(c.charge().powi(2), FINE_STRUCTURE, epsilon = 1e-16);
    }

    proptest! {
        #[test]
        fn orbit_stays_on_the_circle(radius in 0.1f64..10.0, u in 0.001f64..0.999, frac in 0.0f64..=1.0, left in any::<bool>()) {
            let sense = if left { Sense::Left } else { Sense::Right };
            let traj = Trajectory::new(radius, u, sense).unwrap();
            prop_assert_eq!(traj.traverse_time(), PI * radius / u);
            let (x, _) = traj.position_velocity(frac * traj.traverse_time()).unwrap();
            prop_assert!((x.norm() - radius).abs() < 1e-12 * radius.max(1.0));
        }

        #[test]
        fn left_orbit_is_the_mirror_image(u in 0.01f64..0.8, frac in 0.0f64..=1.0, eta in 0.0f64..0.3) {
            let r = Trajectory::with_ramp(1.0, u, Sense::Right, eta).unwrap();
            let l = r.mirrored();
            let t = frac * r.traverse_time();
            prop_assert!((mirror_map(&r.position(t)) - l.position(t)).norm() < 1e-12);
        }
    }
}
