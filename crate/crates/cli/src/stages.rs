//! The four computation stages behind the subcommands.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use abtroika::decoherence::{
    a_modes_crosscheck, a_point_regulated, ladder_grid, phase_c1_check, port_probabilities, reduction_check, scaling_summary, sweep,
    traverse_pair, visibility_report, write_sweep_csv, DecoherenceOptions, SweepRow,
};
use abtroika::error::Result;
use abtroika::geometry::{Electron, Sense, SolenoidModel, Smearing, Trajectory};
use abtroika::modes::{
    constant_drive_error, overlap_identity_random, overlap_identity_traverse, photon_number_drift, traverse_drive_error, ModeGrid,
};
use abtroika::phases::{phase_report, phi21, phi_ab_path, Path as Route};
use abtroika::quadrature::{loglog_slope, pv_oracle_check};

use crate::config::RunConfig;
use crate::report::{Bound, Check, DivergenceStudy, IdealPhases, PhaseEntry, ReportBundle};

/// Records checks for one stage.
pub struct Recorder<'a> {
    pub bundle: &'a mut ReportBundle,
    pub config: &'a RunConfig,
    pub stage: &'static str,
}

impl Recorder<'_> {
    fn record(&mut self, name: &str, value: f64, tolerance: f64, bound: Bound) {
        let pass = match bound {
            Bound::Upper => value <= tolerance,
            Bound::Lower => value >= tolerance,
        };
        let check = Check {
            value,
            tolerance,
            bound,
            pass,
            enabled: !self.config.disabled_checks.iter().any(|d| d == name),
            stage: self.stage.to_string(),
        };
        self.bundle.checks.insert(name.to_string(), check);
    }

    fn upper(&mut self, name: &str, value: f64, tolerance: f64) {
        self.record(name, value, tolerance, Bound::Upper);
    }

    fn lower(&mut self, name: &str, value: f64, tolerance: f64) {
        self.record(name, value, tolerance, Bound::Lower);
    }
}

fn point_electron(c: &RunConfig, beta: f64) -> Result<Electron> {
    let traj = Trajectory::with_ramp(c.radius, beta, Sense::Right, c.ramp_fraction)?;
    Electron::new(traj, Smearing::Point, c.fine_structure.sqrt())
}

fn line_electron(c: &RunConfig) -> Result<Electron> {
    let traj = Trajectory::new(1.0, c.beta, Sense::Right)?;
    Electron::new(traj, Smearing::LineZ { sigma: c.lambda }, c.fine_structure.sqrt())
}

fn relative(x: f64, reference: f64) -> f64 {
    (x - reference).abs() / reference.abs()
}

pub fn phases(r: &mut Recorder) -> Result<()> {
    let c = r.config;
    let spec = c.quadrature();
    let ideal = SolenoidModel::ideal(c.solenoid_radius * c.radius, c.flux)?;
    let e = c.fine_structure.sqrt();
    let phi_ab = e * c.flux;
    let arc = Route::Arc {
        radius: c.radius,
        z: 0.0,
        from: -0.5 * PI,
        to: 0.5 * PI,
    };
    let half = phi_ab_path(&ideal, e, &arc, &spec)?;
    let p21_ideal = phi21(&point_electron(c, c.beta)?, &ideal, &spec)?.value;
    r.upper("ab_half_circle_ideal", relative(half, 0.5 * phi_ab), c.tol_ab_ideal);
    r.upper("ab_phi21_ideal", relative(2.0 * p21_ideal, 0.5 * phi_ab), c.tol_ab_ideal);
    r.bundle.ideal_phases = Some(IdealPhases {
        phi_ab,
        half_circle: half,
        phi21: p21_ideal,
    });

    let model = c.solenoid_model()?;
    if model.loop_current().is_none() {
        // an analytic winding has no solenoid-side phases
        return Ok(());
    }
    let mut betas = c.phase_betas.clone();
    betas.sort_by(f64::total_cmp);
    let (mut ab, mut identity, mut extra, mut grand) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &beta in &betas {
        let el = point_electron(c, beta)?;
        let report = phase_report(&el, &model, &c.volume_quadrature(), c.full_left)?;
        ab = ab.max(relative(2.0 * report.phi21, 0.5 * phi_ab));
        // the identity tolerance opens up with speed
        let tol = if beta <= 0.1 { c.tol_identity_slow } else { c.tol_identity_fast };
        identity = identity.max(report.identity_residuals["phase_identity"] / tol);
        extra = extra.max(relative(report.extra_phase_el, report.extra_phase_sol));
        grand = grand.max(relative(report.grand_total, 0.5 * phi_ab));
        r.bundle.phase_reports.push(PhaseEntry { beta, report });
    }
    if let Some(slow) = r.bundle.phase_reports.first() {
        let rep = &slow.report;
        let recip = rep.identity_residuals["reciprocity_phi22_phi21"];
        let naive = (rep.naive_total / rep.phi_ab - 2.0).abs();
        r.upper("reciprocity", recip, c.tol_reciprocity);
        r.upper("naive_double_count", naive, c.tol_naive);
    }
    if !betas.is_empty() {
        r.upper("ab_phi21_finite", ab, c.tol_ab_finite);
        // worst residual in units of its own tolerance
        r.upper("phase_identity", identity, 1.0);
        r.upper("extra_phase_balance", extra, c.tol_extra_phase);
        r.upper("grand_total", grand, c.tol_grand_total);
    }
    Ok(())
}

fn write_rows(dir: &Path, name: &str, rows: &[SweepRow]) -> std::io::Result<()> {
    write_sweep_csv(rows, BufWriter::new(File::create(dir.join(name))?))
}

pub fn decoherence(r: &mut Recorder, out: &Path) -> anyhow::Result<()> {
    let c = r.config;
    let opts = DecoherenceOptions {
        phase_grid: c.phase_grid,
        ramp_fraction: c.phase_ramp_fraction,
        ..DecoherenceOptions::default()
    };
    let result = visibility_report(c.beta, c.lambda, c.fine_structure, &opts)?;
    r.upper("a_total", result.a_total, c.max_a_total);
    r.lower("visibility", result.visibility, c.min_visibility);
    let sum_error = [0.0, 0.5, 1.0, 2.0, PI]
        .iter()
        .map(|&phi| {
            let (p, q) = port_probabilities(result.a_total, phi);
            (p + q - 1.0).abs()
        })
        .fold(0.0, f64::max);
    r.upper("probability_sum", sum_error, c.tol_probability_sum);
    let phase_scale = result.overlap_phase_scale;
    r.upper("phase_c1", result.overlap_phase.abs() / phase_scale, c.tol_phase_c1);

    // a wider left orbit breaks the mirror symmetry the cancellation needs
    let (right, left) = traverse_pair(c.beta, c.lambda, c.fine_structure, c.phase_ramp_fraction)?;
    let wide = Electron::new(Trajectory::with_ramp(1.1, c.beta, Sense::Left, c.phase_ramp_fraction)?, left.smearing, left.charge)?;
    let control = phase_c1_check(&right, &wide, right.trajectory.traverse_time(), c.phase_grid)?;
    r.lower("phase_c1_control", control.relative, c.min_phase_control);
    r.bundle.phase_control = Some(control.relative);
    r.bundle.overlap_result = Some(result);

    let pv = pv_oracle_check(c.pv_samples, c.seed, &c.quadrature())?;
    r.upper("pv_oracles", pv.max_inside.max(pv.max_outside), c.tol_pv);
    r.bundle.pv_oracles = Some(pv);

    let lambda_points: Vec<(f64, f64)> = c.sweep_lambda.iter().map(|&l| (c.beta, l)).collect();
    let beta_points: Vec<(f64, f64)> = c.sweep_beta.iter().map(|&b| (b, c.lambda)).collect();
    let lambda_rows = sweep(&lambda_points, c.fine_structure, &opts)?;
    let beta_rows = sweep(&beta_points, c.fine_structure, &opts)?;
    write_rows(out, "sweep_lambda.csv", &lambda_rows)?;
    write_rows(out, "sweep_beta.csv", &beta_rows)?;
    if !lambda_rows.is_empty() && !beta_rows.is_empty() {
        let s = scaling_summary(&lambda_rows, &beta_rows)?;
        r.upper("scaling_lambda", (s.slope_lambda + 1.0).abs(), c.tol_slope);
        r.upper("scaling_beta", (s.slope_beta - 1.0).abs(), c.tol_slope);
        r.bundle.scaling = Some(s);
    }
    let rows: Vec<&SweepRow> = lambda_rows.iter().chain(&beta_rows).collect();
    if !rows.is_empty() {
        // decades outside β² for the a2/a1 ratio; the band is one decade wide either way
        let band = rows.iter().map(|w| (w.a2 / w.a1 / (w.beta * w.beta)).log10().abs()).fold(0.0, f64::max);
        r.upper("a2_ratio_band", band, 1.0);
        let err = rows.iter().map(|w| w.err_a2 / w.a2).fold(0.0, f64::max);
        r.upper("a2_error", err, c.tol_a2_error);
    }
    r.bundle.sweep_lambda = lambda_rows;
    r.bundle.sweep_beta = beta_rows;
    Ok(())
}

pub fn modes(r: &mut Recorder) -> Result<()> {
    let c = r.config;
    let el = line_electron(c)?;
    let mut residuals = Vec::new();
    let small = ModeGrid::lattice(c.constant_drive_grid, 1.3)?;
    residuals.push(("constant_drive", constant_drive_error(&small, c.seed, 5.0, c.constant_drive_steps)?, c.tol_constant_drive));
    let drive = ModeGrid::spherical_cube(c.drive_grid, c.drive_k_max)?;
    residuals.push(("traverse_drive", traverse_drive_error(&el, &drive, c.drive_steps)?, c.tol_traverse_drive));
    let lattice = ModeGrid::lattice(c.overlap_grid, 2.0 * PI / c.overlap_grid as f64)?;
    residuals.push(("overlap_random", overlap_identity_random(&lattice, c.overlap_configs, c.seed)?, c.tol_overlap_random));
    let near = ModeGrid::lattice(c.overlap_grid, c.overlap_traverse_dk)?;
    residuals.push(("overlap_traverse", overlap_identity_traverse(&el, &near, c.overlap_steps)?, c.tol_overlap_traverse));
    let drift = ModeGrid::spherical_cube(c.drift_grid, c.drive_k_max)?;
    residuals.push(("photon_drift", photon_number_drift(&el, &drift, c.drift_dt, c.drift_steps)?, c.tol_photon_drift));
    for (name, value, tol) in residuals {
        r.bundle.mode_checks.insert(name.to_string(), value);
        r.upper(name, value, tol);
    }

    for &k in &c.crosscheck_k_max_sigma {
        let grid = ladder_grid(k, c.lambda)?;
        r.bundle.crosscheck.push(a_modes_crosscheck(c.beta, c.lambda, c.fine_structure, &grid)?);
    }
    if let Some(last) = r.bundle.crosscheck.last() {
        let last = last.relative_difference;
        let stalls = r.bundle.crosscheck.windows(2).filter(|w| w[1].relative_difference >= w[0].relative_difference).count();
        r.upper("crosscheck", last, c.tol_crosscheck);
        r.upper("crosscheck_monotone", stalls as f64, 0.0);
    }
    Ok(())
}

pub fn divergence(r: &mut Recorder, out: &Path) -> anyhow::Result<()> {
    let c = r.config;
    let epsilon: Vec<f64> = (0..c.epsilon_halvings).map(|k| c.epsilon_start * 0.5f64.powi(k as i32)).collect();
    let estimates = epsilon
        .iter()
        .map(|&e| a_point_regulated(c.beta, e, c.fine_structure))
        .collect::<Result<Vec<_>>>()?;
    let a: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let error: Vec<f64> = estimates.iter().map(|e| e.error).collect();
    let samples: Vec<(f64, f64)> = epsilon.iter().zip(&a).map(|(e, v)| (*e, v.abs())).collect();
    let slope = loglog_slope(&samples)?;
    let stalls = a.windows(2).filter(|w| w[1].abs() <= w[0].abs()).count();
    r.upper("divergence_monotone", stalls as f64, 0.0);
    r.upper("divergence_slope", (slope + 1.0).abs(), c.tol_slope);
    let (reduced, unreduced) = reduction_check(c.beta, c.reduction_epsilon)?;
    r.upper("reduction", relative(reduced, unreduced), c.tol_reduction);

    let mut csv = BufWriter::new(File::create(out.join("sweep_epsilon.csv"))?);
    use std::io::Write;
    writeln!(csv, "epsilon,a,err_a")?;
    for i in 0..epsilon.len() {
        writeln!(csv, "{:.16e},{:.16e},{:.16e}", epsilon[i], a[i], error[i])?;
    }
    csv.flush()?;
    r.bundle.divergence = Some(DivergenceStudy {
        beta: c.beta,
        epsilon,
        a,
        error,
        slope,
        reduced,
        unreduced,
    });
    Ok(())
}
