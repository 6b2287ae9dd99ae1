//! Projected-gradient design of the permittivity (and optionally `τ`) field.
//!
//! The objective is built from transmittances `T_i = ℰ_i / incident flux` at a
//! list of `(ω, κ)` points; gradients come from the discrete adjoint. Every
//! iterate is clamped into the admissible envelope.

use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::Incident;
use crate::error::{Error, Result};
use crate::io::{csv_line, fmt_f64};
use crate::modes::{check_nonresonance, omega_j_auto, Certificate, EigenMethod};
use crate::scatter::{relative_balance, Scatterer, SolveOptions};
use crate::sensitivity::{energy_gradient, GradientPath};
use crate::structure::{check_admissible, AdmissibleEnvelope, CoefficientField};

/// Steps below this are treated as a failed line search.
pub const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Objective {
    /// Mean transmittance over the frequency list, maximized.
    Maximize,
    /// Mean transmittance, minimized.
    Minimize,
    /// `Σ w_i (T_i − target_i)²`, minimized.
    MatchSpectrum { targets: Vec<f64>, weights: Vec<f64> },
}

impl Objective {
    fn maximizes(&self) -> bool {
        matches!(self, Objective::Maximize)
    }

    /// Objective value and `∂J/∂T_i`.
    fn evaluate(&self, t: &[f64]) -> (f64, Vec<f64>) {
        let n = t.len() as f64;
        match self {
            Objective::Maximize | Objective::Minimize => (t.iter().sum::<f64>() / n, vec![1.0 / n; t.len()]),
            Objective::MatchSpectrum { targets, weights } => {
                let mut j = 0.0;
                let mut d = vec![0.0; t.len()];
                for i in 0..t.len() {
                    let r = t[i] - targets[i];
                    j += weights[i] * r * r;
                    d[i] = 2.0 * weights[i] * r;
                }
                (j, d)
            }
        }
    }
}

/// When to run the non-resonance certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Certification {
    None,
    /// Certify the envelope once, at every design frequency, before iterating.
    Envelope,
    /// Additionally certify each accepted iterate as a single structure.
    EveryIterate,
}

#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub objective: Objective,
    /// `(ω, κ)` points the objective is evaluated at.
    pub frequencies: Vec<(f64, f64)>,
    pub incident: Incident,
    pub design_region: Vec<bool>,
    pub envelope: AdmissibleEnvelope,
    /// Initial step; the densities are gradients per cell value.
    pub step: f64,
    pub max_iters: usize,
    /// Stop once the projected gradient norm falls below this.
    pub tolerance: f64,
    pub optimize_tau: bool,
    pub certification: Certification,
    pub eigen_method: EigenMethod,
}

impl DesignProblem {
    pub fn validate(&self, n_cells: usize) -> Result<()> {
        let mut errs = vec![];
        if self.frequencies.is_empty() {
            errs.push("no design frequencies".to_string());
        }
        if self.design_region.len() != n_cells {
            return Err(Error::GridMismatch {
                expected: n_cells,
                actual: self.design_region.len(),
            });
        }
        if !self.design_region.iter().any(|&m| m) {
            errs.push("design region is empty".into());
        }
        if self.envelope.n_cells() != n_cells {
            return Err(Error::GridMismatch {
                expected: n_cells,
                actual: self.envelope.n_cells(),
            });
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            errs.push(format!("step must be positive, got {}", self.step));
        }
        if !(self.tolerance >= 0.0) {
            errs.push(format!("tolerance must be nonnegative, got {}", self.tolerance));
        }
        if let Objective::MatchSpectrum { targets, weights } = &self.objective {
            if targets.len() != self.frequencies.len() || weights.len() != self.frequencies.len() {
                errs.push("spectrum targets and weights need one entry per frequency".into());
            }
            if weights.iter().any(|w| !(*w >= 0.0)) {
                errs.push("spectrum weights must be nonnegative".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(errs.join("; ")))
        }
    }
}

/// Cellwise clamp into the envelope.
pub fn project(field: &CoefficientField, envelope: &AdmissibleEnvelope) -> CoefficientField {
    envelope.project(field)
}

/// A certificate for `ω` against the envelope, choosing the band index `j` with
/// `ω_j(stiff) < ω`.
pub fn certify_frequency(
    scatterer: &Scatterer,
    envelope: &AdmissibleEnvelope,
    omega: f64,
    kappa: f64,
    method: EigenMethod,
) -> Result<Certificate> {
    const MAX_BAND: usize = 64;
    let stiff = scatterer.with_field(envelope.stiff_corner(&scatterer.geom));
    let mut last = None;
    for j in 0..MAX_BAND {
        if j > 0 && omega_j_auto(&stiff, kappa, j, method)? >= omega {
            break;
        }
        match check_nonresonance(scatterer, envelope, kappa, (omega, omega), j, method) {
            Ok(c) => return Ok(c),
            Err(e @ Error::NotCertified { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(Error::NotCertified {
        lower: omega,
        upper: omega,
        range_lo: omega,
        range_hi: omega,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub objective: f64,
    /// Accepted step (0 for the initial design).
    pub step: f64,
    pub grad_norm: f64,
    pub balance_defect_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    /// Gradient norm below tolerance.
    Converged,
    /// Backtracking reached the minimum step without improvement.
    LineSearchFailed,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct DesignOutcome {
    pub field: CoefficientField,
    pub history: Vec<HistoryRow>,
    pub termination: Termination,
    pub certificates: Vec<Certificate>,
}

struct Evaluation {
    objective: f64,
    /// `∂J/∂ε_c`, `∂J/∂τ_c` per cell.
    d_eps: Vec<f64>,
    d_tau: Vec<f64>,
    balance: f64,
}

fn evaluate(
    problem: &DesignProblem,
    scatterer: &Scatterer,
    with_gradient: bool,
    opts: &SolveOptions,
) -> Result<Evaluation> {
    let n = scatterer.geom.n_cells();
    let area = scatterer.geom.cell_area();
    let per: Vec<_> = problem
        .frequencies
        .par_iter()
        .map(|&(omega, kappa)| -> Result<_> {
            let ctx = scatterer.context(omega, kappa)?;
            if with_gradient {
                let (p, g) = energy_gradient(scatterer, &ctx, &problem.incident, GradientPath::Discrete, opts)?;
                Ok((p.energy_transmitted / p.incident_flux, relative_balance(&p).abs(), Some((g, p.incident_flux))))
            } else {
                let p = scatterer.solve(&ctx, &problem.incident, opts)?;
                Ok((p.energy_transmitted / p.incident_flux, relative_balance(&p).abs(), None))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let t: Vec<f64> = per.iter().map(|r| r.0).collect();
    let (objective, dj) = problem.objective.evaluate(&t);
    let mut d_eps = vec![0.0; n];
    let mut d_tau = vec![0.0; n];
    for (i, (_, _, g)) in per.iter().enumerate() {
        if let Some((g, flux)) = g {
            let s = dj[i] * area / flux;
            for c in 0..n {
                d_eps[c] += s * g.g_eps[c];
                d_tau[c] += s * g.g_tau[c];
            }
        }
    }
    let balance = per.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(Evaluation {
        objective,
        d_eps,
        d_tau,
        balance,
    })
}

/// Runs projected gradient ascent (or descent) with step halving.
///
/// The first trial step of each iteration is twice the last accepted one.
pub fn run(
    problem: &DesignProblem,
    scatterer: &Scatterer,
    initial: &CoefficientField,
    opts: &SolveOptions,
) -> Result<DesignOutcome> {
    let geom = scatterer.geom;
    problem.validate(geom.n_cells())?;
    initial.matches(&geom)?;
    let report = check_admissible(initial, &problem.envelope)?;
    if !report.admissible {
        return Err(Error::Inadmissible {
            count: report.violations.len(),
        });
    }
    let mut certificates = vec![];
    if problem.certification != Certification::None {
        let base = scatterer.with_field(initial.clone());
        for &(omega, kappa) in &problem.frequencies {
            certificates.push(certify_frequency(&base, &problem.envelope, omega, kappa, problem.eigen_method)?);
        }
    }

    let sign = if problem.objective.maximizes() { 1.0 } else { -1.0 };
    let better = |new: f64, old: f64| sign * (new - old) > 0.0;
    let mask = &problem.design_region;
    let masked_norm = |e: &Evaluation| -> f64 {
        let mut s = 0.0;
        for c in 0..mask.len() {
            if mask[c] {
                s += e.d_eps[c] * e.d_eps[c];
                if problem.optimize_tau {
                    s += e.d_tau[c] * e.d_tau[c];
                }
            }
        }
        s.sqrt()
    };

    let mut field = initial.clone();
    let mut current = evaluate(problem, &scatterer.with_field(field.clone()), true, opts)?;
    let mut history = vec![HistoryRow {
        iter: 0,
        objective: current.objective,
        step: 0.0,
        grad_norm: masked_norm(&current),
        balance_defect_max: current.balance,
    }];
    let mut step = problem.step / 2.0;
    for iter in 1..=problem.max_iters {
        let gnorm = masked_norm(&current);
        if gnorm <= problem.tolerance {
            return Ok(DesignOutcome {
                field,
                history,
                termination: Termination::Converged,
                certificates,
            });
        }
        let mut trial_step = 2.0 * step;
        let accepted = loop {
            if trial_step < MIN_STEP {
                break None;
            }
            let mut trial = field.clone();
            for c in 0..mask.len() {
                if mask[c] {
                    trial.eps[c] += sign * trial_step * current.d_eps[c];
                    if problem.optimize_tau {
                        trial.tau[c] += sign * trial_step * current.d_tau[c];
                    }
                }
            }
            let trial = project(&trial, &problem.envelope);
            let value = evaluate(problem, &scatterer.with_field(trial.clone()), false, opts)?;
            if better(value.objective, current.objective) {
                break Some(trial);
            }
            trial_step *= 0.5;
        };
        let Some(next) = accepted else {
            return Ok(DesignOutcome {
                field,
                history,
                termination: Termination::LineSearchFailed,
                certificates,
            });
        };
        let report = check_admissible(&next, &problem.envelope)?;
        if !report.admissible {
            return Err(Error::Aborted {
                iter,
                reason: format!("iterate leaves the envelope at {} cells", report.violations.len()),
                field: Box::new(next),
            });
        }
        let sc = scatterer.with_field(next.clone());
        if problem.certification == Certification::EveryIterate {
            let single = AdmissibleEnvelope::degenerate(&next);
            for &(omega, kappa) in &problem.frequencies {
                if let Err(e) = certify_frequency(&sc, &single, omega, kappa, problem.eigen_method) {
                    return Err(Error::Aborted {
                        iter,
                        reason: e.to_string(),
                        field: Box::new(next),
                    });
                }
            }
        }
        field = next;
        step = trial_step;
        current = evaluate(problem, &sc, true, opts)?;
        history.push(HistoryRow {
            iter,
            objective: current.objective,
            step,
            grad_norm: masked_norm(&current),
            balance_defect_max: current.balance,
        });
        log::debug!("iter {iter}: objective {} step {step:e}", current.objective);
    }
    Ok(DesignOutcome {
        field,
        history,
        termination: Termination::MaxIterations,
        certificates,
    })
}

pub const HISTORY_COLUMNS: &str = "iter,objective,step,grad_norm,balance_defect_max";

pub fn history_to_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("# slabscat-optimize v1\n");
    out.push_str(HISTORY_COLUMNS);
    out.push('\n');
    for r in history {
        out.push_str(&csv_line(vec![
            r.iter.to_string(),
            fmt_f64(r.objective),
            fmt_f64(r.step),
            fmt_f64(r.grad_norm),
            fmt_f64(r.balance_defect_max),
        ]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::CellGeometry;

    fn slab(nx: usize, nz: usize, eps: f64, d: f64) -> Scatterer {
        let g = CellGeometry::new(0.0, d, nx, nz).unwrap();
        Scatterer::new(g, CoefficientField::uniform(&g, eps, 1.0), 1.0, 1.0).unwrap()
    }

    fn problem(s: &Scatterer, objective: Objective, freqs: Vec<(f64, f64)>, rel: f64) -> DesignProblem {
        let n = s.geom.n_cells();
        DesignProblem {
            objective,
            frequencies: freqs,
            incident: Incident::from_left(0),
            design_region: vec![true; n],
            envelope: AdmissibleEnvelope::relative_band(&s.field, &vec![true; n], rel).unwrap(),
            step: 1.0,
            max_iters: 5,
            tolerance: 1e-6,
            optimize_tau: false,
            certification: Certification::None,
            eigen_method: EigenMethod::Auto,
        }
    }

    #[test]
    fn projection_is_an_idempotent_clamp() {
        let s = slab(8, 4, 2.0, 1.0);
        let env = AdmissibleEnvelope::relative_band(&s.field, &vec![true; 32], 0.1).unwrap();
        assert_eq!(project(&s.field, &env), s.field);
        let high = CoefficientField::uniform(&s.geom, 5.0, 3.0);
        let p = project(&high, &env);
        assert!(p.eps.iter().all(|&e| (e - 2.2).abs() < 1e-15));
        assert!(p.tau.iter().all(|&t| (t - 1.1).abs() < 1e-15));
        assert_eq!(project(&p, &env), p);
    }

    #[test]
    fn objective_values_and_derivatives() {
        let (j, d) = Objective::Maximize.evaluate(&[0.2, 0.4]);
        assert!((j - 0.3).abs() < 1e-15 && d == vec![0.5, 0.5]);
        let m = Objective::MatchSpectrum {
            targets: vec![0.5, 0.5],
            weights: vec![1.0, 2.0],
        };
        let (j, d) = m.evaluate(&[0.2, 0.6]);
        assert!((j - (0.09 + 0.02)).abs() < 1e-15);
        assert!((d[0] + 0.6).abs() < 1e-15 && (d[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_design_region_is_rejected() {
        let s = slab(8, 4, 2.0, 1.0);
        let mut p = problem(&s, Objective::Maximize, vec![(1.0, 0.0)], 0.1);
        p.design_region = vec![false; 32];
        assert!(matches!(run(&p, &s, &s.field, &SolveOptions::fast()), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn single_cell_region_improves_monotonically() {
        let s = slab(8, 8, 2.0, 1.0);
        let mut p = problem(&s, Objective::Minimize, vec![(1.3, 0.1)], 0.5);
        p.design_region = vec![false; 64];
        p.design_region[27] = true;
        p.step = 50.0;
        let out = run(&p, &s, &s.field, &SolveOptions::fast()).unwrap();
        assert!(out.history.len() >= 2);
        for w in out.history.windows(2) {
            assert!(w[1].objective < w[0].objective);
        }
        // nothing outside the design region moved
        for c in 0..64 {
            if c != 27 {
                assert_eq!(out.field.eps[c], 2.0);
            }
        }
    }

    #[test]
    fn history_csv_layout() {
        let rows = [HistoryRow {
            iter: 0,
            objective: 0.5,
            step: 0.0,
            grad_norm: 1.0,
            balance_defect_max: 0.0,
        }];
        let csv = history_to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# slabscat-optimize v1");
        assert_eq!(lines[1], HISTORY_COLUMNS);
        assert!(lines[2].starts_with("0,5.0000000000000000e-1,0.0000000000000000e0,"));
    }
}
