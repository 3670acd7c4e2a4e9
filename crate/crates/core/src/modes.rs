//! Mode-space picture of the radiation field: every Fourier mode of every
//! component is a driven oscillator whose state stays coherent.
//!
//! Conventions: `Ã(k) = (2π)^{-3/2} ∫ d³x A(x) e^{-ik·x}`,
//! `α = √(ω/2) Ã + i Ȧ̃ / √(2ω)`, so that a real field has
//! `Ã(k) = (α(k) + α*(-k)) / √(2ω)`. The amplitudes obey
//! `i α̇ = ω α - J̃ / √(2ω)` and the normalisation phase `c` obeys
//! `i ċ = -Σ w J̃*·α / √(2ω)`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{Electron, Smearing, Vec3, Worldline};
use crate::quadrature::{gauss_legendre, neumaier_sum, neumaier_sum_complex, NeumaierSum};

/// One complex amplitude per field component.
pub type Amp = [Complex64; 3];

/// Number of independent field components carried per mode.
pub const POLARIZATIONS: usize = 3;

const ZERO: Amp = [Complex64::new(0.0, 0.0); 3];

/// Largest `ω dt` accepted by [`evolve_mode`].
pub const MAX_OMEGA_DT: f64 = 0.5;

/// Real-space lattice dual to an antiperiodic momentum lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    /// Points per axis (even).
    pub n: usize,
    /// Momentum spacing; the box length is `2π / dk`.
    pub dk: f64,
}

impl Lattice {
    pub fn box_length(&self) -> f64 {
        2.0 * PI / self.dk
    }

    /// Real-space spacing `h = L / n`.
    pub fn spacing(&self) -> f64 {
        self.box_length() / self.n as f64
    }

    fn momentum(&self, m: usize) -> f64 {
        self.dk * (m as f64 - (self.n / 2) as f64 + 0.5)
    }

    fn position(&self, j: usize) -> f64 {
        self.spacing() * (j as f64 - (self.n / 2) as f64)
    }
}

/// Quadrature nodes in k-space, symmetric under `k → -k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGrid {
    pub k_points: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub omega: Vec<f64>,
    partner: Vec<usize>,
    lattice: Option<Lattice>,
}

impl ModeGrid {
    /// Antiperiodic Cartesian lattice `k = dk (m + ½)`, `n³` points with
    /// weight `dk³`. It pairs with a real-space lattice through an exact
    /// discrete transform.
    pub fn lattice(n: usize, dk: f64) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return domain(format!("lattice size must be even and >= 2, got {n}"));
        }
        if !(dk > 0.0 && dk.is_finite()) {
            return domain(format!("momentum spacing must be > 0, got {dk}"));
        }
        let lat = Lattice { n, dk };
        let mut k_points = Vec::with_capacity(n * n * n);
        let mut partner = Vec::with_capacity(n * n * n);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    k_points.push(Vec3::new(lat.momentum(a), lat.momentum(b), lat.momentum(c)));
                    partner.push(((n - 1 - a) * n + (n - 1 - b)) * n + (n - 1 - c));
                }
            }
        }
        let weights = vec![dk * dk * dk; k_points.len()];
        Self::assemble(k_points, weights, partner, Some(lat))
    }

    /// Product grid in spherical coordinates: Gauss–Legendre in `|k|` on
    /// `[0, k_max]` and in `cos θ`, uniform in azimuth.
    pub fn spherical(n_radial: usize, n_polar: usize, n_azimuth: usize, k_max: f64) -> Result<Self> {
        if n_radial == 0 || n_polar == 0 || n_azimuth < 2 || n_azimuth % 2 != 0 {
            return domain("spherical grid needs n_radial, n_polar >= 1 and an even n_azimuth");
        }
        if !(k_max > 0.0 && k_max.is_finite()) {
            return domain(format!("k_max must be > 0, got {k_max}"));
        }
        let (xr, wr) = gauss_legendre(n_radial);
        let (xc, wc) = gauss_legendre(n_polar);
        let dphi = 2.0 * PI / n_azimuth as f64;
        let mut k_points = Vec::new();
        let mut weights = Vec::new();
        let mut partner = Vec::new();
        for (r, (&x, &w)) in xr.iter().zip(&wr).enumerate() {
            let k = 0.5 * k_max * (x + 1.0);
            let wk = 0.5 * k_max * w * k * k;
            for (p, (&c, &wcp)) in xc.iter().zip(&wc).enumerate() {
                let s = (1.0 - c * c).sqrt();
                for a in 0..n_azimuth {
                    let phi = dphi * (a as f64 + 0.5);
                    k_points.push(Vec3::new(k * s * phi.cos(), k * s * phi.sin(), k * c));
                    weights.push(wk * wcp * dphi);
                    let a2 = (a + n_azimuth / 2) % n_azimuth;
                    partner.push((r * n_polar + (n_polar - 1 - p)) * n_azimuth + a2);
                }
            }
        }
        Self::assemble(k_points, weights, partner, None)
    }

    /// `n × n × n` spherical grid.
    pub fn spherical_cube(n: usize, k_max: f64) -> Result<Self> {
        Self::spherical(n, n, n, k_max)
    }

    fn assemble(k_points: Vec<Vec3>, weights: Vec<f64>, partner: Vec<usize>, lattice: Option<Lattice>) -> Result<Self> {
        let omega: Vec<f64> = k_points.iter().map(|k| k.norm()).collect();
        if omega.iter().any(|&w| !(w > 0.0)) || weights.iter().any(|&w| !(w > 0.0)) {
            return domain("mode grid contains k = 0 or a nonpositive weight");
        }
        for (i, &j) in partner.iter().enumerate() {
            let scale = omega[i].max(1.0);
            if (k_points[i] + k_points[j]).norm() > 1e-12 * scale || weights[i] != weights[j] {
                return Err(Error::Mismatch(format!("grid not symmetric under k -> -k at node {i}")));
            }
        }
        Ok(Self {
            k_points,
            weights,
            omega,
            partner,
            lattice,
        })
    }

    pub fn len(&self) -> usize {
        self.k_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_points.is_empty()
    }

    /// Index of the node at `-k`.
    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    pub fn k_max(&self) -> f64 {
        self.omega.iter().copied().fold(0.0, f64::max)
    }

    pub fn lattice_info(&self) -> Option<Lattice> {
        self.lattice
    }
}

/// Coherent state of all modes together with its normalisation phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    pub alpha: Vec<Amp>,
    pub c_phase: Complex64,
    pub time: f64,
    /// Width deformation of the initial Gaussian. Only the coherent choice
    /// `0` is implemented.
    pub initial_f: f64,
}

impl ModeState {
    pub fn vacuum(grid: &ModeGrid) -> Self {
        Self {
            alpha: vec![ZERO; grid.len()],
            c_phase: Complex64::new(0.0, 0.0),
            time: 0.0,
            initial_f: 0.0,
        }
    }

    /// Vacuum with a squeezed initial width. Rejected unless `f = 0`.
    pub fn squeezed(grid: &ModeGrid, f: f64) -> Result<Self> {
        let state = Self {
            initial_f: f,
            ..Self::vacuum(grid)
        };
        state.check_coherent()?;
        Ok(state)
    }

    fn check_coherent(&self) -> Result<()> {
        if self.initial_f != 0.0 {
            return Err(Error::Unsupported(format!(
                "squeezed initial state f = {} (only f = 0 is implemented)",
                self.initial_f
            )));
        }
        Ok(())
    }

    fn check(&self, grid: &ModeGrid) -> Result<()> {
        if self.alpha.len() != grid.len() {
            return Err(Error::Mismatch(format!(
                "state has {} modes, grid has {}",
                self.alpha.len(),
                grid.len()
            )));
        }
        self.check_coherent()
    }

    /// Amplitude difference `self - other` with zero phase.
    pub fn minus(&self, other: &ModeState) -> Result<ModeState> {
        if self.alpha.len() != other.alpha.len() {
            return Err(Error::Mismatch("states live on different grids".into()));
        }
        let alpha = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect();
        Ok(ModeState {
            alpha,
            c_phase: Complex64::new(0.0, 0.0),
            time: self.time,
            initial_f: 0.0,
        })
    }
}

/// Fourier-transformed classical current `J̃(k, t)` seen by mode `index`.
pub trait Drive: Sync {
    fn current(&self, index: usize, k: &Vec3, t: f64) -> Amp;

    /// Times where the drive or its low derivatives jump.
    fn breaks(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Bound on the source speed; sets how fast `e^{-ik·x(t)}` turns.
    fn speed_bound(&self) -> f64 {
        0.0
    }

    /// The current vanishes after this time.
    fn active_until(&self) -> f64 {
        f64::INFINITY
    }
}

/// No current.
pub struct NoDrive;

impl Drive for NoDrive {
    fn current(&self, _: usize, _: &Vec3, _: f64) -> Amp {
        ZERO
    }
}

/// Time-independent current, one value per mode.
pub struct ConstantDrive(pub Vec<Amp>);

impl Drive for ConstantDrive {
    fn current(&self, index: usize, _: &Vec3, _: f64) -> Amp {
        self.0[index]
    }
}

/// Current of an electron on its traverse, switched off after `t_off`.
#[derive(Debug, Clone, Copy)]
pub struct ElectronDrive {
    pub electron: Electron,
    pub t_off: f64,
}

impl ElectronDrive {
    /// Drive that stops when the traverse ends.
    pub fn new(electron: Electron) -> Self {
        Self {
            t_off: electron.trajectory.traverse_time(),
            electron,
        }
    }
}

/// Fourier weight of the charge profile, `(1/σ) ∫_0^σ e^{-ik_z z} dz`.
pub fn form_factor(smearing: &Smearing, kz: f64) -> Complex64 {
    match *smearing {
        Smearing::Point => Complex64::new(1.0, 0.0),
        Smearing::LineZ { sigma } => {
            let x = 0.5 * kz * sigma;
            let sinc = if x.abs() < 1e-4 { 1.0 - x * x / 6.0 } else { x.sin() / x };
            Complex64::from_polar(sinc, -x)
        }
    }
}

impl Drive for ElectronDrive {
    fn current(&self, _: usize, k: &Vec3, t: f64) -> Amp {
        // tolerate rounding in step times that land on the switch-off
        if t < 0.0 || t > self.t_off * (1.0 + 1e-12) {
            return ZERO;
        }
        // just after an impulsive start the electron already moves
        let kin = self.electron.trajectory.kinematics(t.max(f64::MIN_POSITIVE));
        let phase = Complex64::from_polar(1.0, -k.dot(&kin.position)) * form_factor(&self.electron.smearing, k.z);
        let s = self.electron.charge * (2.0 * PI).powf(-1.5);
        let v = kin.velocity * s;
        [phase * v.x, phase * v.y, phase * v.z]
    }

    fn breaks(&self) -> Vec<f64> {
        let traj = &self.electron.trajectory;
        let mut b = vec![self.t_off];
        let tr = traj.ramp_fraction * traj.traverse_time();
        if tr > 0.0 && tr < self.t_off {
            b.push(tr);
        }
        b
    }

    fn speed_bound(&self) -> f64 {
        self.electron.trajectory.max_speed()
    }

    fn active_until(&self) -> f64 {
        self.t_off
    }
}

fn dot_conj(a: &Amp, b: &Amp) -> Complex64 {
    a[0].conj() * b[0] + a[1].conj() * b[1] + a[2].conj() * b[2]
}

fn scale(a: &Amp, s: Complex64) -> Amp {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: &Amp, b: &Amp) -> Amp {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Advances `steps` steps of size `dt` with classical RK4 applied in the
/// interaction picture `α e^{iωt}`, so free evolution is exact. Jumps of
/// the drive should fall on step boundaries.
pub fn evolve_mode<D: Drive>(state: &ModeState, grid: &ModeGrid, drive: &D, dt: f64, steps: usize) -> Result<ModeState> {
    state.check(grid)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return domain(format!("time step must be > 0, got {dt}"));
    }
    let (worst, wmax) = grid
        .omega
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc });
    if wmax * dt > MAX_OMEGA_DT {
        let k = grid.k_points[worst];
        return domain(format!(
            "step too large: omega dt = {:.3} > {MAX_OMEGA_DT} at mode {worst} (k = [{:.4}, {:.4}, {:.4}])",
            wmax * dt,
            k.x,
            k.y,
            k.z
        ));
    }
    let mut alpha = state.alpha.clone();
    let mut c = state.c_phase;
    let mut t = state.time;
    let i = Complex64::i();
    for n in 0..steps {
        let t1 = state.time + (n + 1) as f64 * dt;
        let th = 0.5 * (t + t1);
        // per mode: new amplitude and the four stage contributions to ċ
        let out: Vec<(Amp, [Complex64; 4])> = (0..grid.len())
            .into_par_iter()
            .map(|m| {
                let w = grid.omega[m];
                let k = &grid.k_points[m];
                let norm = 1.0 / (2.0 * w).sqrt();
                let beta0 = scale(&alpha[m], Complex64::from_polar(1.0, w * t));
                let j0 = drive.current(m, k, t);
                let jh = drive.current(m, k, th);
                let j1 = drive.current(m, k, t1);
                let g = |j: &Amp, s: f64| scale(j, i * Complex64::from_polar(norm, w * s));
                let (g0, gh, g1) = (g(&j0, t), g(&jh, th), g(&j1, t1));
                let stage = |beta: &Amp, j: &Amp, s: f64| {
                    let a = scale(beta, Complex64::from_polar(1.0, -w * s));
                    i * dot_conj(j, &a) * (norm * grid.weights[m])
                };
                let b2 = add(&beta0, &scale(&g0, Complex64::from(0.5 * dt)));
                let b3 = add(&beta0, &scale(&gh, Complex64::from(0.5 * dt)));
                let b4 = add(&beta0, &scale(&gh, Complex64::from(dt)));
                let kc = [stage(&beta0, &j0, t), stage(&b2, &jh, th), stage(&b3, &jh, th), stage(&b4, &j1, t1)];
                let mut beta1 = beta0;
                for p in 0..3 {
                    beta1[p] += (g0[p] + gh[p] * 4.0 + g1[p]) * (dt / 6.0);
                }
                (scale(&beta1, Complex64::from_polar(1.0, -w * t1)), kc)
            })
            .collect();
        let mut ks = [Complex64::new(0.0, 0.0); 4];
        for (s, ksum) in ks.iter_mut().enumerate() {
            *ksum = neumaier_sum_complex(out.iter().map(|o| o.1[s]));
        }
        c += (ks[0] + ks[1] * 2.0 + ks[2] * 2.0 + ks[3]) * (dt / 6.0);
        for (a, o) in alpha.iter_mut().zip(&out) {
            *a = o.0;
        }
        t = t1;
    }
    Ok(ModeState {
        alpha,
        c_phase: c,
        time: t,
        initial_f: 0.0,
    })
}

const PANEL_ORDER: usize = 16;

struct PanelRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `cumulative[j][l] = ∫_{-1}^{x_j} L_l(s) ds` for the Lagrange basis on the nodes.
    cumulative: Vec<Vec<f64>>,
}

fn panel_rule() -> &'static PanelRule {
    static RULE: OnceLock<PanelRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_legendre(PANEL_ORDER);
        let n = x.len();
        let lagrange = |l: usize, s: f64| {
            (0..n)
                .filter(|&m| m != l)
                .fold(1.0, |p, m| p * (s - x[m]) / (x[l] - x[m]))
        };
        let cumulative = (0..n)
            .map(|j| {
                let half = 0.5 * (x[j] + 1.0);
                (0..n)
                    .map(|l| half * (0..n).map(|m| w[m] * lagrange(l, -1.0 + half * (x[m] + 1.0))).sum::<f64>())
                    .collect()
            })
            .collect();
        PanelRule {
            nodes: x,
            weights: w,
            cumulative,
        }
    })
}

/// Panels covering `[0, end]`, split at `breaks`, each short enough that a
/// phase turning at `rate` advances by at most 2 rad.
fn time_panels(end: f64, rate: f64, breaks: &[f64]) -> Vec<(f64, f64)> {
    let mut pts = vec![0.0, end];
    pts.extend(breaks.iter().copied().filter(|&b| b > 0.0 && b < end));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut panels = Vec::new();
    for w in pts.windows(2) {
        let n = ((w[1] - w[0]) * rate / 2.0).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / n as f64;
        for p in 0..n {
            panels.push((w[0] + p as f64 * h, if p + 1 == n { w[1] } else { w[0] + (p + 1) as f64 * h }));
        }
    }
    panels
}

/// Direct quadrature of the driven solution for one mode:
/// `G(t) = ∫_0^t e^{iωs} J̃(s) ds` so that `α = (i/√(2ω)) e^{-iωt} G`, and
/// `∫_0^t Re(J̃*·α) / √(2ω)`, the growth of `Im c`.
fn mode_quadrature(j: impl Fn(f64) -> Amp, w: f64, end: f64, rate: f64, breaks: &[f64]) -> (Amp, f64) {
    let rule = panel_rule();
    let norm = 1.0 / (2.0 * w).sqrt();
    let mut g_acc = ZERO;
    let mut imc = NeumaierSum::default();
    let mut js = [ZERO; PANEL_ORDER];
    let mut gs = [ZERO; PANEL_ORDER];
    for (a, b) in time_panels(end, rate, breaks) {
        let half = 0.5 * (b - a);
        for l in 0..PANEL_ORDER {
            let t = a + half * (rule.nodes[l] + 1.0);
            js[l] = j(t);
            gs[l] = scale(&js[l], Complex64::from_polar(1.0, w * t));
        }
        for jn in 0..PANEL_ORDER {
            let t = a + half * (rule.nodes[jn] + 1.0);
            let mut g = g_acc;
            for l in 0..PANEL_ORDER {
                let s = rule.cumulative[jn][l] * half;
                for p in 0..3 {
                    g[p] += gs[l][p] * s;
                }
            }
            let alpha = scale(&g, Complex64::new(0.0, norm) * Complex64::from_polar(1.0, -w * t));
            imc.add(half * rule.weights[jn] * dot_conj(&js[jn], &alpha).re * norm);
        }
        for l in 0..PANEL_ORDER {
            let s = rule.weights[l] * half;
            for p in 0..3 {
                g_acc[p] += gs[l][p] * s;
            }
        }
    }
    (g_acc, imc.total())
}

/// Coherent state at time `t` from direct time quadrature of the drive,
/// mode by mode. `Re c = -½ Σ w|α|²` and `Im c = ½ ∫∫ A·J` follow from the
/// closed-form solution of the phase equation.
pub fn analytic_mode<D: Drive>(drive: &D, grid: &ModeGrid, t: f64) -> Result<ModeState> {
    if !(t >= 0.0 && t.is_finite()) {
        return domain(format!("time must be >= 0, got {t}"));
    }
    let breaks = drive.breaks();
    let end = t.min(drive.active_until());
    let v = drive.speed_bound();
    let out: Vec<(Amp, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|m| {
            let w = grid.omega[m];
            let k = grid.k_points[m];
            let (g, imc) = mode_quadrature(|s| drive.current(m, &k, s), w, end, w * (1.0 + v), &breaks);
            let alpha = scale(&g, Complex64::new(0.0, 1.0 / (2.0 * w).sqrt()) * Complex64::from_polar(1.0, -w * t));
            (alpha, imc * grid.weights[m])
        })
        .collect();
    let alpha: Vec<Amp> = out.iter().map(|o| o.0).collect();
    let imc = neumaier_sum(out.iter().map(|o| o.1));
    let mut state = ModeState {
        alpha,
        c_phase: Complex64::new(0.0, imc),
        time: t,
        initial_f: 0.0,
    };
    let n = photon_number(&state, grid)?;
    state.c_phase.re = -0.5 * n;
    if !state.c_phase.is_finite() {
        return Err(Error::NoConvergence {
            what: "mode time quadrature".into(),
            estimate: f64::NAN,
            error: f64::INFINITY,
        });
    }
    Ok(state)
}

/// `Σ w Σ_i |α_i|²`.
pub fn photon_number(state: &ModeState, grid: &ModeGrid) -> Result<f64> {
    state.check(grid)?;
    Ok(neumaier_sum(
        state
            .alpha
            .iter()
            .zip(&grid.weights)
            .map(|(a, w)| w * (a[0].norm_sqr() + a[1].norm_sqr() + a[2].norm_sqr())),
    ))
}

/// Exponent `a = ½ Σ w |α_R - α_L|²` of the overlap modulus.
pub fn decoherence_exponent(left: &ModeState, right: &ModeState, grid: &ModeGrid) -> Result<f64> {
    Ok(0.5 * photon_number(&right.minus(left)?, grid)?)
}

/// `⟨L|R⟩ = exp(Σ w α_L*·α_R + c_L* + c_R)` for normalised coherent states.
pub fn overlap_coherent(left: &ModeState, right: &ModeState, grid: &ModeGrid) -> Result<Complex64> {
    left.check(grid)?;
    right.check(grid)?;
    let s = neumaier_sum_complex(
        left.alpha
            .iter()
            .zip(&right.alpha)
            .zip(&grid.weights)
            .map(|((l, r), w)| dot_conj(l, r) * w),
    );
    Ok((s + left.c_phase.conj() + right.c_phase).exp())
}

/// Real field and its time derivative on the lattice, one 3-vector per site
/// in row-major `(x, y, z)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub a: Vec<[f64; 3]>,
    pub a_dot: Vec<[f64; 3]>,
}

fn lattice_of(grid: &ModeGrid) -> Result<Lattice> {
    grid.lattice
        .ok_or_else(|| Error::Mismatch("real-space fields need a lattice mode grid".into()))
}

/// Separable 3D transform `out(p) = Σ_q data(q) Π_axes e^{sign i k_{p} x_{q}}`
/// with momentum index on one side and position index on the other.
fn transform(lat: &Lattice, data: &[Complex64], to_position: bool) -> Vec<Complex64> {
    let n = lat.n;
    let sign = if to_position { 1.0 } else { -1.0 };
    // kernel[p][q] for p the output index
    let kernel: Vec<Vec<Complex64>> = (0..n)
        .map(|p| {
            (0..n)
                .map(|q| {
                    let (k, x) = if to_position {
                        (lat.momentum(q), lat.position(p))
                    } else {
                        (lat.momentum(p), lat.position(q))
                    };
                    Complex64::from_polar(1.0, sign * k * x)
                })
                .collect()
        })
        .collect();
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let stride = n.pow(2 - axis as u32);
        let mut next = vec![Complex64::new(0.0, 0.0); cur.len()];
        for idx in 0..cur.len() {
            let p = (idx / stride) % n;
            let base = idx - p * stride;
            let mut s = Complex64::new(0.0, 0.0);
            for q in 0..n {
                s += kernel[p][q] * cur[base + q * stride];
            }
            next[idx] = s;
        }
        cur = next;
    }
    cur
}

/// Classical field of a state: `Ã = (α(k) + α*(-k))/√(2ω)`,
/// `Ȧ̃ = -iω (α(k) - α*(-k))/√(2ω)`, transformed to the lattice.
pub fn fields_from_state(state: &ModeState, grid: &ModeGrid) -> Result<FieldConfig> {
    state.check(grid)?;
    let lat = lattice_of(grid)?;
    let norm = (2.0 * PI).powf(-1.5) * lat.dk.powi(3);
    let mut a = vec![[0.0; 3]; grid.len()];
    let mut a_dot = vec![[0.0; 3]; grid.len()];
    for p in 0..3 {
        let mut at = Vec::with_capacity(grid.len());
        let mut adt = Vec::with_capacity(grid.len());
        for m in 0..grid.len() {
            let w = grid.omega[m];
            let s = 1.0 / (2.0 * w).sqrt();
            let x = state.alpha[m][p];
            let y = state.alpha[grid.partner[m]][p].conj();
            at.push((x + y) * s);
            adt.push((x - y) * Complex64::new(0.0, -w * s));
        }
        let ax = transform(&lat, &at, true);
        let adx = transform(&lat, &adt, true);
        let scale_of = ax.iter().chain(&adx).map(|z| z.norm()).fold(0.0, f64::max);
        for j in 0..grid.len() {
            if ax[j].im.abs().max(adx[j].im.abs()) > 1e-9 * scale_of.max(f64::MIN_POSITIVE) {
                return Err(Error::Mismatch("transform pair produced a complex field".into()));
            }
            a[j][p] = ax[j].re * norm;
            a_dot[j][p] = adx[j].re * norm;
        }
    }
    Ok(FieldConfig { a, a_dot })
}

/// Coherent state of a real lattice field. `c` gets the normalising real
/// part `-½ Σ w|α|²` and the given imaginary part.
pub fn state_from_fields(fields: &FieldConfig, grid: &ModeGrid, im_c: f64) -> Result<ModeState> {
    let lat = lattice_of(grid)?;
    if fields.a.len() != grid.len() || fields.a_dot.len() != grid.len() {
        return Err(Error::Mismatch("field lattice does not match the mode grid".into()));
    }
    let h = lat.spacing();
    let norm = (2.0 * PI).powf(-1.5) * h.powi(3);
    let mut alpha = vec![ZERO; grid.len()];
    for p in 0..3 {
        let ax: Vec<Complex64> = fields.a.iter().map(|v| Complex64::from(v[p])).collect();
        let adx: Vec<Complex64> = fields.a_dot.iter().map(|v| Complex64::from(v[p])).collect();
        let at = transform(&lat, &ax, false);
        let adt = transform(&lat, &adx, false);
        for m in 0..grid.len() {
            let w = grid.omega[m];
            alpha[m][p] = at[m] * ((0.5 * w).sqrt() * norm) + adt[m] * Complex64::new(0.0, norm / (2.0 * w).sqrt());
        }
    }
    let mut state = ModeState {
        alpha,
        c_phase: Complex64::new(0.0, im_c),
        time: 0.0,
        initial_f: 0.0,
    };
    state.c_phase.re = -0.5 * photon_number(&state, grid)?;
    Ok(state)
}

/// Real-space kernel `K(d) = Σ Δk³ f(ω) e^{ik·h d} / (2π)³` tabulated for
/// lattice displacements `d ∈ (-n, n)³`.
fn kernel_table(grid: &ModeGrid, lat: &Lattice, f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    let n = lat.n as i64;
    let span = (2 * n - 1) as usize;
    let h = lat.spacing();
    let dk3 = lat.dk.powi(3);
    (0..span * span * span)
        .into_par_iter()
        .map(|idx| {
            let d = [
                (idx / (span * span)) as i64 - (n - 1),
                ((idx / span) % span) as i64 - (n - 1),
                (idx % span) as i64 - (n - 1),
            ];
            let r = Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64) * h;
            let s = neumaier_sum(
                grid.k_points
                    .iter()
                    .zip(&grid.omega)
                    .map(|(k, &w)| f(w) * k.dot(&r).cos()),
            );
            s * dk3 / (2.0 * PI).powi(3)
        })
        .collect()
}

fn quadratic_form(lat: &Lattice, table: &[f64], u: &[[f64; 3]]) -> f64 {
    let n = lat.n;
    let span = 2 * n - 1;
    let h6 = lat.spacing().powi(6);
    let site = |j: usize| [j / (n * n), (j / n) % n, j % n];
    let rows: Vec<f64> = (0..u.len())
        .into_par_iter()
        .map(|j| {
            let a = site(j);
            let mut acc = NeumaierSum::default();
            for (l, ul) in u.iter().enumerate() {
                let b = site(l);
                let idx = ((a[0] + n - 1 - b[0]) * span + (a[1] + n - 1 - b[1])) * span + (a[2] + n - 1 - b[2]);
                acc.add(table[idx] * (u[j][0] * ul[0] + u[j][1] * ul[1] + u[j][2] * ul[2]));
            }
            acc.total()
        })
        .collect();
    neumaier_sum(rows) * h6
}

/// Both evaluations of `⟨L|R⟩`: the coherent-state form and the Gaussian
/// functional form on the dual real-space lattice, with the width kernel
/// `B = ω/2` and its inverse `2/ω` applied as real-space convolutions.
pub fn overlap_gaussian_check(left: &ModeState, right: &ModeState, grid: &ModeGrid) -> Result<(Complex64, Complex64)> {
    let lhs = overlap_coherent(left, right, grid)?;
    let lat = lattice_of(grid)?;
    let fl = fields_from_state(left, grid)?;
    let fr = fields_from_state(right, grid)?;
    let diff = |p: &[[f64; 3]], q: &[[f64; 3]]| -> Vec<[f64; 3]> {
        p.iter().zip(q).map(|(x, y)| [x[0] - y[0], x[1] - y[1], x[2] - y[2]]).collect()
    };
    let da = diff(&fr.a, &fl.a);
    let dad = diff(&fr.a_dot, &fl.a_dot);
    let b = kernel_table(grid, &lat, |w| 0.5 * w);
    let b_inv = kernel_table(grid, &lat, |w| 2.0 / w);
    let width = -0.5 * quadratic_form(&lat, &b, &da) - 0.125 * quadratic_form(&lat, &b_inv, &dad);
    let h3 = lat.spacing().powi(3);
    let dot = |x: &[f64; 3], y: &[f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let cross = neumaier_sum((0..grid.len()).map(|j| {
        let s = [fr.a_dot[j][0] + fl.a_dot[j][0], fr.a_dot[j][1] + fl.a_dot[j][1], fr.a_dot[j][2] + fl.a_dot[j][2]];
        -0.5 * dot(&s, &da[j]) + 0.5 * (dot(&fr.a_dot[j], &fr.a[j]) - dot(&fl.a_dot[j], &fl.a[j]))
    })) * h3;
    let phase = cross + right.c_phase.im - left.c_phase.im;
    Ok((lhs, Complex64::new(width, phase).exp()))
}

/// Width kernel of the stationary vacuum Gaussian.
pub fn stationary_width(omega: f64) -> f64 {
    0.5 * omega
}

/// Largest residual `|2B² - ω²/2|` of the per-mode stationarity condition.
pub fn riccati_stationarity(grid: &ModeGrid, width: impl Fn(f64) -> f64) -> f64 {
    grid.omega
        .iter()
        .map(|&w| {
            let b = width(w);
            (2.0 * b * b - 0.5 * w * w).abs()
        })
        .fold(0.0, f64::max)
}

/// Residuals of the relations tying the shift `b`, the classical field and
/// the amplitudes, each relative to the largest term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRelation {
    /// `i b̃ = 2B Ã + i Ȧ̃` with `b̃ = ∫ e^{-iω(t-s)} J̃(s) ds`.
    pub b_residual: f64,
    /// `α = √(ω/2) Ã + i Ȧ̃/√(2ω)` against [`analytic_mode`].
    pub alpha_residual: f64,
}

/// Computes `b̃`, and the retarded `Ã = ∫ J̃ sin(ω(t-s))/ω`,
/// `Ȧ̃ = ∫ J̃ cos(ω(t-s))` by three separate quadratures and checks them
/// against each other and against the amplitudes of `state`.
pub fn shift_relation<D: Drive>(drive: &D, grid: &ModeGrid, state: &ModeState) -> Result<ShiftRelation> {
    state.check(grid)?;
    let t = state.time;
    let breaks = drive.breaks();
    let v = drive.speed_bound();
    let rule = panel_rule();
    let per_mode: Vec<(f64, f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|m| {
            let w = grid.omega[m];
            let k = grid.k_points[m];
            let mut b = ZERO;
            let mut a = ZERO;
            let mut ad = ZERO;
            for (p0, p1) in time_panels(t.min(drive.active_until()), w * (1.0 + v), &breaks) {
                let half = 0.5 * (p1 - p0);
                for l in 0..PANEL_ORDER {
                    let s = p0 + half * (rule.nodes[l] + 1.0);
                    let j = drive.current(m, &k, s);
                    let q = half * rule.weights[l];
                    let d = w * (t - s);
                    for c in 0..3 {
                        b[c] += j[c] * Complex64::from_polar(q, -d);
                        a[c] += j[c] * (q * d.sin() / w);
                        ad[c] += j[c] * (q * d.cos());
                    }
                }
            }
            let i = Complex64::i();
            let mut rb: f64 = 0.0;
            let mut ra: f64 = 0.0;
            let mut size: f64 = 0.0;
            for c in 0..3 {
                let lhs = i * b[c];
                let rhs = a[c] * (2.0 * stationary_width(w)) + i * ad[c];
                rb = rb.max((lhs - rhs).norm());
                let alpha = a[c] * (0.5 * w).sqrt() + i * ad[c] / (2.0 * w).sqrt();
                ra = ra.max(((alpha - state.alpha[m][c]) * (2.0 * w).sqrt()).norm());
                size = size.max(b[c].norm());
            }
            (rb, ra, size)
        })
        .collect();
    let size = per_mode.iter().map(|p| p.2).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok(ShiftRelation {
        b_residual: per_mode.iter().map(|p| p.0).fold(0.0, f64::max) / size,
        alpha_residual: per_mode.iter().map(|p| p.1).fold(0.0, f64::max) / size,
    })
}

/// One line of a snapshot: mode, component, amplitude, weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub k: [f64; 3],
    pub component: u32,
    pub alpha: [f64; 2],
    pub weight: f64,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"ABTMODE1";

pub fn snapshot_rows(state: &ModeState, grid: &ModeGrid) -> Result<Vec<SnapshotRow>> {
    state.check(grid)?;
    let mut rows = Vec::with_capacity(3 * grid.len());
    for (m, a) in state.alpha.iter().enumerate() {
        let k = grid.k_points[m];
        for (c, z) in a.iter().enumerate() {
            rows.push(SnapshotRow {
                k: [k.x, k.y, k.z],
                component: c as u32,
                alpha: [z.re, z.im],
                weight: grid.weights[m],
            });
        }
    }
    Ok(rows)
}

/// Whitespace-separated table, columns `kx ky kz i re_alpha im_alpha weight`.
pub fn write_snapshot_text<W: Write>(rows: &[SnapshotRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "# kx ky kz i re_alpha im_alpha weight")?;
    for r in rows {
        writeln!(
            out,
            "{:e} {:e} {:e} {} {:e} {:e} {:e}",
            r.k[0], r.k[1], r.k[2], r.component, r.alpha[0], r.alpha[1], r.weight
        )?;
    }
    Ok(())
}

/// Binary layout, all little-endian: the 8 magic bytes `ABTMODE1`, a `u64`
/// row count, then per row `kx, ky, kz` (f64), `i` (u32),
/// `re_alpha, im_alpha, weight` (f64).
pub fn write_snapshot_binary<W: Write>(rows: &[SnapshotRow], mut out: W) -> std::io::Result<()> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&(rows.len() as u64).to_le_bytes())?;
    for r in rows {
        for x in r.k {
            out.write_all(&x.to_le_bytes())?;
        }
        out.write_all(&r.component.to_le_bytes())?;
        for x in [r.alpha[0], r.alpha[1], r.weight] {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot_binary<R: Read>(mut input: R) -> std::io::Result<Vec<SnapshotRow>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(bad("not a mode snapshot"));
    }
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut f = |input: &mut R| -> std::io::Result<f64> {
        input.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut rows = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let k = [f(&mut input)?, f(&mut input)?, f(&mut input)?];
        input.read_exact(&mut b4)?;
        let component = u32::from_le_bytes(b4);
        let alpha = [f(&mut input)?, f(&mut input)?];
        let weight = f(&mut input)?;
        rows.push(SnapshotRow {
            k,
            component,
            alpha,
            weight,
        });
    }
    Ok(rows)
}

/// Drive with a fixed random current per mode, for closed-form checks.
pub fn random_constant_drive(grid: &ModeGrid, seed: u64) -> ConstantDrive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConstantDrive(
        (0..grid.len())
            .map(|_| [0; 3].map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
            .collect(),
    )
}

/// Amplitudes and normalisation phase at `t` for a constant drive from
/// the vacuum at 0.
pub fn constant_drive_closed_form(grid: &ModeGrid, drive: &ConstantDrive, t: f64) -> (Vec<Amp>, Complex64) {
    let i = Complex64::i();
    let mut c = Complex64::new(0.0, 0.0);
    let alpha = (0..grid.len())
        .map(|m| {
            let w = grid.omega[m];
            let j = drive.0[m];
            let e = Complex64::from_polar(1.0, -w * t);
            let j2: f64 = j.iter().map(|z| z.norm_sqr()).sum();
            c += i * grid.weights[m] * j2 / (2.0 * w * w) * (t - (1.0 - e) / (i * w));
            j.map(|z| z * (1.0 - e) / (w * (2.0 * w).sqrt()))
        })
        .collect();
    (alpha, c)
}

/// Largest component difference between two amplitude sets.
pub fn max_amplitude_difference(a: &[Amp], b: &[Amp]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(move |p| (x[p] - y[p]).norm()))
        .fold(0.0, f64::max)
}

fn max_amplitude(a: &[Amp]) -> f64 {
    a.iter().flat_map(|x| x.iter().map(|z| z.norm())).fold(0.0, f64::max)
}

/// Maximum error of the integrator against the closed form for a random
/// constant drive, over amplitudes and the normalisation phase.
pub fn constant_drive_error(grid: &ModeGrid, seed: u64, t: f64, steps: usize) -> Result<f64> {
    let drive = random_constant_drive(grid, seed);
    let (exact, c_exact) = constant_drive_closed_form(grid, &drive, t);
    let ode = evolve_mode(&ModeState::vacuum(grid), grid, &drive, t / steps as f64, steps)?;
    Ok(max_amplitude_difference(&ode.alpha, &exact).max((ode.c_phase - c_exact).norm()))
}

/// Integrator against quadrature for an electron drive over one traverse:
/// largest amplitude error relative to the largest amplitude.
pub fn traverse_drive_error(electron: &Electron, grid: &ModeGrid, steps: usize) -> Result<f64> {
    let drive = ElectronDrive::new(*electron);
    let t = electron.trajectory.traverse_time();
    let ode = evolve_mode(&ModeState::vacuum(grid), grid, &drive, t / steps as f64, steps)?;
    let direct = analytic_mode(&drive, grid, t)?;
    Ok(max_amplitude_difference(&ode.alpha, &direct.alpha) / max_amplitude(&direct.alpha))
}

/// A sum of three Gaussian bumps with random centres, widths and
/// component amplitudes for both the field and its rate.
pub fn random_smooth_fields(grid: &ModeGrid, rng: &mut ChaCha8Rng) -> Result<FieldConfig> {
    let lat = grid
        .lattice_info()
        .ok_or_else(|| Error::Mismatch("random fields need a lattice grid".into()))?;
    let n = lat.n;
    let bumps: Vec<(Vec3, [f64; 6], f64)> = (0..3)
        .map(|_| {
            let c = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let amp = [0; 6].map(|_| rng.gen_range(-0.3..0.3));
            (c, amp, rng.gen_range(1.0..2.0))
        })
        .collect();
    let mut f = FieldConfig {
        a: vec![[0.0; 3]; n * n * n],
        a_dot: vec![[0.0; 3]; n * n * n],
    };
    for j in 0..n * n * n {
        let x = Vec3::new(lat.position(j / (n * n)), lat.position((j / n) % n), lat.position(j % n));
        for (c, amp, width) in &bumps {
            let g = (-(x - c).norm_squared() / (width * width)).exp();
            for p in 0..3 {
                f.a[j][p] += amp[p] * g;
                f.a_dot[j][p] += amp[p + 3] * g;
            }
        }
    }
    Ok(f)
}

/// Largest relative difference between the amplitude form and the
/// field-space form of the overlap over `configs` random pairs.
pub fn overlap_identity_random(grid: &ModeGrid, configs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let fl = random_smooth_fields(grid, &mut rng)?;
        let fr = random_smooth_fields(grid, &mut rng)?;
        let l = state_from_fields(&fl, grid, rng.gen_range(-1.0..1.0))?;
        let r = state_from_fields(&fr, grid, rng.gen_range(-1.0..1.0))?;
        let (lhs, rhs) = overlap_gaussian_check(&l, &r, grid)?;
        worst = worst.max((lhs - rhs).norm() / lhs.norm());
    }
    Ok(worst)
}

/// The same comparison for the two traverse states of `electron` and its
/// mirror image, evolved by the integrator.
pub fn overlap_identity_traverse(electron: &Electron, grid: &ModeGrid, steps: usize) -> Result<f64> {
    let t = electron.trajectory.traverse_time();
    let evolve = |e: Electron| evolve_mode(&ModeState::vacuum(grid), grid, &ElectronDrive::new(e), t / steps as f64, steps);
    let l = evolve(electron.mirrored())?;
    let r = evolve(*electron)?;
    let (lhs, rhs) = overlap_gaussian_check(&l, &r, grid)?;
    Ok((lhs - rhs).norm() / lhs.norm())
}

/// Relative change of the photon number over `steps` free steps after the
/// traverse.
pub fn photon_number_drift(electron: &Electron, grid: &ModeGrid, dt: f64, steps: usize) -> Result<f64> {
    let t = electron.trajectory.traverse_time();
    let s = analytic_mode(&ElectronDrive::new(*electron), grid, t)?;
    let n0 = photon_number(&s, grid)?;
    let later = evolve_mode(&s, grid, &NoDrive, dt, steps)?;
    Ok(((photon_number(&later, grid)? - n0) / n0).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Sense, Trajectory, FINE_STRUCTURE};
    use proptest::prelude::*;

    fn electron(beta: f64, sense: Sense, sigma: f64) -> Electron {
        let traj = Trajectory::new(1.0, beta, sense).unwrap();
        Electron::new(traj, Smearing::LineZ { sigma }, FINE_STRUCTURE.sqrt()).unwrap()
    }

    fn max_diff(a: &[Amp], b: &[Amp]) -> f64 {
        max_amplitude_difference(a, b)
    }

    fn max_abs(a: &[Amp]) -> f64 {
        max_amplitude(a)
    }

    #[test]
    fn grids_are_symmetric() {
        let lat = ModeGrid::lattice(4, 0.5).unwrap();
        assert_eq!(lat.len(), 64);
        assert!(lat.omega.iter().all(|&w| w > 0.0));
        let sph = ModeGrid::spherical(5, 6, 8, 3.0).unwrap();
        for g in [&lat, &sph] {
            for i in 0..g.len() {
                assert!((g.k_points[i] + g.k_points[g.partner(i)]).norm() < 1e-12);
            }
        }
        // spherical weights integrate the ball volume exactly
        let vol: f64 = sph.weights.iter().sum();
        assert!((vol - 4.0 * PI * 27.0 / 3.0).abs() < 1e-10);
        assert!(ModeGrid::lattice(3, 0.5).is_err());
        assert!(ModeGrid::spherical(4, 4, 5, 1.0).is_err());
    }

    #[test]
    fn vacuum_stays_vacuum() {
        let grid = ModeGrid::lattice(2, 1.0).unwrap();
        let s = evolve_mode(&ModeState::vacuum(&grid), &grid, &NoDrive, 0.1, 50).unwrap();
        assert_eq!(max_abs(&s.alpha), 0.0);
        assert_eq!(s.c_phase, Complex64::new(0.0, 0.0));
        assert_eq!(photon_number(&s, &grid).unwrap(), 0.0);
    }

    #[test]
    fn photon_number_of_single_mode() {
        let grid = ModeGrid::spherical(1, 1, 2, 1.0).unwrap();
        let mut s = ModeState::vacuum(&grid);
        s.alpha[0][1] = Complex64::new(0.0, 2.0);
        let w = grid.weights[0];
        assert!((photon_number(&s, &grid).unwrap() - 4.0 * w).abs() < 1e-15);
    }

    fn constant_drive(grid: &ModeGrid) -> ConstantDrive {
        random_constant_drive(grid, 7)
    }

    #[test]
    fn constant_drive_matches_closed_form() {
        let grid = ModeGrid::lattice(2, 1.3).unwrap();
        let drive = constant_drive(&grid);
        let t = 5.0;
        let (exact, c_exact) = constant_drive_closed_form(&grid, &drive, t);
        let ode = evolve_mode(&ModeState::vacuum(&grid), &grid, &drive, t / 500.0, 500).unwrap();
        assert!(max_diff(&ode.alpha, &exact) < 1e-8, "{}", max_diff(&ode.alpha, &exact));
        assert!((ode.c_phase - c_exact).norm() < 1e-8);
        let direct = analytic_mode(&drive, &grid, t).unwrap();
        assert!(max_diff(&direct.alpha, &exact) < 1e-12);
        assert!((direct.c_phase - c_exact).norm() < 1e-12);
        assert!(constant_drive_error(&grid, 7, t, 500).unwrap() < 1e-8);
    }

    #[test]
    fn normalisation_phase_tracks_photon_number() {
        let grid = ModeGrid::lattice(2, 0.7).unwrap();
        let drive = constant_drive(&grid);
        let s = evolve_mode(&ModeState::vacuum(&grid), &grid, &drive, 0.01, 300).unwrap();
        let n = photon_number(&s, &grid).unwrap();
        assert!((s.c_phase.re + 0.5 * n).abs() < 1e-10 * n);
    }

    #[test]
    fn traverse_drive_integrator_matches_quadrature() {
        let e = electron(0.1, Sense::Right, 1.0);
        let grid = ModeGrid::spherical_cube(16, 6.0).unwrap();
        let drive = ElectronDrive::new(e);
        let tt = e.trajectory.traverse_time();
        let steps = 3000;
        let ode = evolve_mode(&ModeState::vacuum(&grid), &grid, &drive, tt / steps as f64, steps).unwrap();
        let direct = analytic_mode(&drive, &grid, tt).unwrap();
        let err = max_diff(&ode.alpha, &direct.alpha) / max_abs(&direct.alpha);
        assert!(err < 1e-6, "relative mode error {err:e}");
        let n = photon_number(&direct, &grid).unwrap();
        assert!((ode.c_phase - direct.c_phase).norm() < 1e-6 * n, "{} {}", ode.c_phase, direct.c_phase);
        let coarse = ModeGrid::spherical_cube(6, 6.0).unwrap();
        assert!(traverse_drive_error(&e, &coarse, 3000).unwrap() < 1e-6);
    }

    #[test]
    fn nothing_radiated_at_start() {
        let grid = ModeGrid::lattice(4, 0.8).unwrap();
        let s = analytic_mode(&ElectronDrive::new(electron(0.3, Sense::Left, 0.5)), &grid, 0.0).unwrap();
        assert_eq!(max_abs(&s.alpha), 0.0);
    }

    #[test]
    fn real_current_has_hermitian_transform() {
        let grid = ModeGrid::spherical(3, 4, 6, 4.0).unwrap();
        let drive = ElectronDrive::new(electron(0.4, Sense::Right, 0.7));
        for t in [0.5, 3.0, 7.0] {
            for m in 0..grid.len() {
                let p = grid.partner(m);
                let a = drive.current(m, &grid.k_points[m], t);
                let b = drive.current(p, &grid.k_points[p], t);
                for c in 0..3 {
                    assert!((a[c] - b[c].conj()).norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn photon_number_conserved_after_drive() {
        let e = electron(0.1, Sense::Right, 1.0);
        let grid = ModeGrid::spherical_cube(8, 6.0).unwrap();
        assert!(photon_number_drift(&e, &grid, 0.05, 10_000).unwrap() < 1e-10);
        // half a traverse later, straight from the quadrature
        let tt = e.trajectory.traverse_time();
        let n0 = photon_number(&analytic_mode(&ElectronDrive::new(e), &grid, tt).unwrap(), &grid).unwrap();
        let direct = analytic_mode(&ElectronDrive::new(e), &grid, 1.5 * tt).unwrap();
        assert!(((photon_number(&direct, &grid).unwrap() - n0) / n0).abs() < 1e-10);
    }

    #[test]
    fn coherent_overlap_modulus() {
        let grid = ModeGrid::spherical_cube(8, 6.0).unwrap();
        let er = electron(0.1, Sense::Right, 1.0);
        let tt = er.trajectory.traverse_time();
        let r = analytic_mode(&ElectronDrive::new(er), &grid, tt).unwrap();
        let l = analytic_mode(&ElectronDrive::new(er.mirrored()), &grid, tt).unwrap();
        let a = decoherence_exponent(&l, &r, &grid).unwrap();
        let o = overlap_coherent(&l, &r, &grid).unwrap();
        assert!(a > 0.0);
        assert!((o.norm() - (-a).exp()).abs() < 1e-10);
        let same = overlap_coherent(&r, &r, &grid).unwrap();
        assert!((same.norm() - 1.0).abs() < 1e-12);
    }

    fn smooth_fields(grid: &ModeGrid, rng: &mut ChaCha8Rng) -> FieldConfig {
        random_smooth_fields(grid, rng).unwrap()
    }

    #[test]
    fn field_transform_round_trip() {
        let grid = ModeGrid::lattice(6, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = smooth_fields(&grid, &mut rng);
        let s = state_from_fields(&f, &grid, 0.25).unwrap();
        let back = fields_from_state(&s, &grid).unwrap();
        for (x, y) in f.a.iter().chain(&f.a_dot).zip(back.a.iter().chain(&back.a_dot)) {
            for p in 0..3 {
                assert!((x[p] - y[p]).abs() < 1e-12);
            }
        }
        let sph = ModeGrid::spherical(2, 2, 2, 1.0).unwrap();
        assert!(matches!(fields_from_state(&ModeState::vacuum(&sph), &sph), Err(Error::Mismatch(_))));
    }

    #[test]
    fn overlap_forms_agree_on_random_fields() {
        let grid = ModeGrid::lattice(8, 2.0 * PI / 8.0).unwrap();
        let worst = overlap_identity_random(&grid, 50, 11).unwrap();
        assert!(worst < 1e-8, "{worst:e}");
    }

    #[test]
    fn identical_configurations_give_equal_pure_phase() {
        let grid = ModeGrid::lattice(4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = smooth_fields(&grid, &mut rng);
        let l = state_from_fields(&f, &grid, 0.3).unwrap();
        let r = state_from_fields(&f, &grid, 0.8).unwrap();
        let (lhs, rhs) = overlap_gaussian_check(&l, &r, &grid).unwrap();
        assert!((lhs.norm() - 1.0).abs() < 1e-12);
        assert!((lhs.arg() - 0.5).abs() < 1e-12 && (rhs.arg() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overlap_forms_agree_on_traverse_states() {
        let grid = ModeGrid::lattice(8, 0.6).unwrap();
        let worst = overlap_identity_traverse(&electron(0.1, Sense::Right, 1.0), &grid, 4000).unwrap();
        assert!(worst < 1e-6, "{worst:e}");
    }

    #[test]
    fn stationary_kernel() {
        let grid = ModeGrid::lattice(4, 0.5).unwrap();
        assert_eq!(riccati_stationarity(&grid, stationary_width), 0.0);
        let wmax = grid.k_max();
        let r = riccati_stationarity(&grid, |w| w);
        assert!((r - 1.5 * wmax * wmax).abs() < 1e-12);
    }

    #[test]
    fn shift_field_and_amplitude_relations() {
        let grid = ModeGrid::spherical(6, 6, 8, 5.0).unwrap();
        let e = electron(0.3, Sense::Right, 0.5);
        let drive = ElectronDrive::new(e);
        let t = 0.8 * e.trajectory.traverse_time();
        let s = analytic_mode(&drive, &grid, t).unwrap();
        let rel = shift_relation(&drive, &grid, &s).unwrap();
        assert!(rel.b_residual < 1e-8 && rel.alpha_residual < 1e-8, "{rel:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = ModeGrid::lattice(4, 0.5).unwrap();
        assert!(matches!(ModeState::squeezed(&grid, 0.1), Err(Error::Unsupported(_))));
        assert!(ModeState::squeezed(&grid, 0.0).is_ok());
        let mut s = ModeState::vacuum(&grid);
        s.initial_f = 0.2;
        assert!(matches!(evolve_mode(&s, &grid, &NoDrive, 0.1, 1), Err(Error::Unsupported(_))));
        let other = ModeGrid::lattice(2, 0.5).unwrap();
        assert!(matches!(
            overlap_coherent(&ModeState::vacuum(&other), &ModeState::vacuum(&grid), &grid),
            Err(Error::Mismatch(_))
        ));
        match evolve_mode(&ModeState::vacuum(&grid), &grid, &NoDrive, 1.0, 1) {
            Err(Error::Domain(msg)) => assert!(msg.contains("at mode")),
            other => panic!("expected a step-size error, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let grid = ModeGrid::lattice(2, 1.0).unwrap();
        let drive = constant_drive(&grid);
        let s = analytic_mode(&drive, &grid, 1.0).unwrap();
        let rows = snapshot_rows(&s, &grid).unwrap();
        assert_eq!(rows.len(), 3 * grid.len());
        let mut bin = Vec::new();
        write_snapshot_binary(&rows, &mut bin).unwrap();
        assert_eq!(bin.len(), 16 + rows.len() * 52);
        assert_eq!(read_snapshot_binary(bin.as_slice()).unwrap(), rows);
        let mut txt = Vec::new();
        write_snapshot_text(&rows, &mut txt).unwrap();
        let txt = String::from_utf8(txt).unwrap();
        assert!(txt.starts_with("# kx ky kz i re_alpha im_alpha weight\n"));
        assert_eq!(txt.lines().count(), rows.len() + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn overlap_modulus_is_the_exponent(a in 0u64..1000, b in 0u64..1000, t in 0.5f64..8.0) {
            let grid = ModeGrid::lattice(2, 1.3).unwrap();
            let l = analytic_mode(&random_constant_drive(&grid, a), &grid, t).unwrap();
            let r = analytic_mode(&random_constant_drive(&grid, b), &grid, t).unwrap();
            let x = decoherence_exponent(&l, &r, &grid).unwrap();
            let o = overlap_coherent(&l, &r, &grid).unwrap();
            prop_assert!((o.norm() - (-x).exp()).abs() < 1e-10);
        }

        #[test]
        fn free_evolution_keeps_photon_number(seed in 0u64..1000, t in 0.5f64..5.0, steps in 10usize..400) {
            let grid = ModeGrid::lattice(2, 1.3).unwrap();
            let s = analytic_mode(&random_constant_drive(&grid, seed), &grid, t).unwrap();
            let n0 = photon_number(&s, &grid).unwrap();
            let later = evolve_mode(&s, &grid, &NoDrive, 0.05, steps).unwrap();
            prop_assert!(((photon_number(&later, &grid).unwrap() - n0) / n0).abs() < 1e-12);
        }

        #[test]
        fn electron_currents_stay_hermitian(u in 0.05f64..0.9, sigma in 0.1f64..2.0, t in 0.1f64..10.0) {
            let grid = ModeGrid::spherical(3, 4, 6, 4.0).unwrap();
            let drive = ElectronDrive::new(electron(u, Sense::Left, sigma));
            for m in 0..grid.len() {
                let p = grid.partner(m);
                let a = drive.current(m, &grid.k_points[m], t);
                let b = drive.current(p, &grid.k_points[p], t);
                for c in 0..3 {
                    prop_assert!((a[c] - b[c].conj()).norm() < 1e-15);
                }
            }
        }
    }
}
