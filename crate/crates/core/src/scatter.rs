//! Forward scattering solves, diffraction amplitudes and energy accounting.
//!
//! Outside the slab the total field is
//!
//! ```text
//! x₃ ≤ z₋:  u = Σ a_m^inc e^{ i(η_m x₃ + (m+κ)x₁)} + Σ a_m e^{i(−η_m x₃ + (m+κ)x₁)}
//! x₃ ≥ z₊:  u = Σ b_m^inc e^{i(−η_m x₃ + (m+κ)x₁)} + Σ b_m e^{ i(η_m x₃ + (m+κ)x₁)}
//! ```
//!
//! and the transmitted energy is `ℰ = τ₀ Σ_{propagating} η_m |b_m|²`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::{
    assemble, incident_rhs, volume_source_rhs, DiscreteSystem, Incident, Mesh,
};
use crate::error::{Error, Result};
use crate::harmonics::{BlochContext, HarmonicClass, Side, TraceVector, PERIOD};
use crate::io::{csv_line, fmt_f64};
use crate::linalg::{condition_estimate, solve_refined, BlockLu, BlockTridiag};
use crate::structure::{CellGeometry, CoefficientField, SourceTerm};

type C = Complex64;

/// Condition estimates above this value are reported as resonance proximity.
pub const CONDITION_WARNING: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Maximum accepted relative residual `‖Au − f‖/‖f‖`.
    pub tolerance: f64,
    pub refinement_steps: usize,
    /// Compute the 1-norm condition estimate (costs one extra factorization).
    pub estimate_condition: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            refinement_steps: 2,
            estimate_condition: true,
        }
    }
}

impl SolveOptions {
    /// Options for inner solves (gradients, finite differences): no condition estimate.
    pub fn fast() -> Self {
        Self {
            estimate_condition: false,
            ..Self::default()
        }
    }
}

/// A periodic slab problem: geometry, coefficients and exterior medium.
#[derive(Debug, Clone, PartialEq)]
pub struct Scatterer {
    pub geom: CellGeometry,
    pub field: CoefficientField,
    pub eps0: f64,
    pub tau0: f64,
    pub m_max: usize,
}

impl Scatterer {
    pub fn new(geom: CellGeometry, field: CoefficientField, eps0: f64, tau0: f64) -> Result<Self> {
        field.matches(&geom)?;
        Ok(Self {
            m_max: geom.default_m_max(),
            geom,
            field,
            eps0,
            tau0,
        })
    }

    pub fn with_field(&self, field: CoefficientField) -> Self {
        Self {
            field,
            ..self.clone()
        }
    }

    pub fn context(&self, omega: f64, kappa: f64) -> Result<BlochContext> {
        BlochContext::new(omega, kappa, self.eps0, self.tau0, self.m_max)
    }

    /// Assembles the discrete system for a context (which may carry an unreduced `κ`).
    pub fn system(&self, ctx: &BlochContext) -> Result<DiscreteSystem> {
        assemble(&Mesh::new(self.geom, ctx.kappa), &self.field, ctx)
    }

    pub fn solve(&self, ctx: &BlochContext, incident: &Incident, opts: &SolveOptions) -> Result<ScatteringSolution> {
        let sys = self.system(ctx)?;
        solve_scattering(&sys, incident, opts)
    }
}

/// System matrix together with its factorization.
pub struct Factored<'a> {
    pub sys: &'a DiscreteSystem,
    pub matrix: BlockTridiag,
    pub lu: BlockLu,
}

impl<'a> Factored<'a> {
    pub fn new(sys: &'a DiscreteSystem) -> Result<Self> {
        let matrix = sys.system_matrix();
        let lu = matrix.factor()?;
        Ok(Self { sys, matrix, lu })
    }

    /// Solves with refinement and enforces the residual tolerance.
    pub fn solve(&self, rhs: &[C], opts: &SolveOptions) -> Result<(Vec<C>, f64)> {
        let (x, residual) = solve_refined(&self.matrix, &self.lu, rhs, opts.refinement_steps);
        if !residual.is_finite() || residual > opts.tolerance {
            return Err(Error::Residual {
                residual,
                tolerance: opts.tolerance,
            });
        }
        Ok((x, residual))
    }

    pub fn condition(&self) -> Result<f64> {
        condition_estimate(&self.matrix, &self.lu)
    }
}

#[derive(Debug, Clone)]
pub struct ScatteringSolution {
    pub ctx: BlochContext,
    pub incident: Incident,
    /// Nodal values, one per degree of freedom of the mesh.
    pub u: Vec<C>,
    /// Reflected amplitudes `a_m` on `Γ₋`.
    pub a: TraceVector,
    /// Transmitted amplitudes `b_m` on `Γ₊`.
    pub b: TraceVector,
    pub energy_transmitted: f64,
    pub energy_reflected: f64,
    pub incident_flux: f64,
    /// Relative residual of the linear solve.
    pub residual: f64,
    pub condition: Option<f64>,
    pub warnings: Vec<String>,
}

impl ScatteringSolution {
    pub fn transmittance(&self) -> f64 {
        self.energy_transmitted / self.incident_flux
    }

    pub fn reflectance(&self) -> f64 {
        self.energy_reflected / self.incident_flux
    }
}

/// Solves the scattering problem for incident plane waves.
pub fn solve_scattering(sys: &DiscreteSystem, incident: &Incident, opts: &SolveOptions) -> Result<ScatteringSolution> {
    let rhs = incident_rhs(&sys.mesh, &sys.ctx, incident)?;
    let fac = Factored::new(sys)?;
    solve_factored(&fac, &rhs, incident, opts)
}

/// Solves with incident waves plus a volume source `∫(ξ·∇v̄ + h v̄)`.
pub fn solve_general(
    sys: &DiscreteSystem,
    incident: &Incident,
    src: &SourceTerm,
    opts: &SolveOptions,
) -> Result<ScatteringSolution> {
    let mut rhs = incident_rhs(&sys.mesh, &sys.ctx, incident)?;
    if !src.is_zero() {
        let vol = volume_source_rhs(&sys.mesh, src)?;
        rhs.iter_mut().zip(vol).for_each(|(r, v)| *r += v);
    }
    let fac = Factored::new(sys)?;
    solve_factored(&fac, &rhs, incident, opts)
}

/// Solves an already factored system with an arbitrary assembled right-hand side.
pub fn solve_factored(fac: &Factored, rhs: &[C], incident: &Incident, opts: &SolveOptions) -> Result<ScatteringSolution> {
    let sys = fac.sys;
    let ctx = sys.ctx;
    let condition = if opts.estimate_condition {
        Some(fac.condition()?)
    } else {
        None
    };
    let (u, residual) = match fac.solve(rhs, opts) {
        Ok(v) => v,
        Err(e) => {
            if let Some(c) = condition {
                log::error!("solve failed with condition estimate {c:e}");
            }
            return Err(e);
        }
    };
    let mut warnings = Vec::new();
    for h in &sys.harmonics {
        if h.class == HarmonicClass::Linear {
            warnings.push(format!(
                "order {} is a cutoff (linear) order at omega = {}, kappa = {}",
                h.m, ctx.omega, ctx.kappa
            ));
        }
    }
    if let Some(c) = condition {
        if c > CONDITION_WARNING {
            let msg = format!(
                "condition estimate {c:.3e} at omega = {}, kappa = {}: omega is close to an eigenvalue of \
                 the guided-mode family and the non-resonance condition is in doubt",
                ctx.omega, ctx.kappa
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let (a, b) = extract_amplitudes(sys, &u, incident);
    let incident_flux = incident.flux(&ctx);
    let energy_transmitted = transmitted_energy(&b, &ctx);
    let energy_reflected = transmitted_energy(&a, &ctx);
    Ok(ScatteringSolution {
        ctx,
        incident: incident.clone(),
        u,
        a,
        b,
        energy_transmitted,
        energy_reflected,
        incident_flux,
        residual,
        condition,
        warnings,
    })
}

/// Scattered amplitudes from boundary DFTs after subtracting the incident trace.
pub fn extract_amplitudes(sys: &DiscreteSystem, u: &[C], incident: &Incident) -> (TraceVector, TraceVector) {
    let ctx = &sys.ctx;
    let g = &sys.mesh.geom;
    let i = C::new(0.0, 1.0);
    let left = TraceVector::from_nodal(ctx, Side::Left, sys.mesh.boundary_values(u, Side::Left));
    let right = TraceVector::from_nodal(ctx, Side::Right, sys.mesh.boundary_values(u, Side::Right));
    let mut a = TraceVector::zeros(ctx, Side::Left);
    let mut b = TraceVector::zeros(ctx, Side::Right);
    for (k, h) in sys.harmonics.iter().enumerate() {
        let el = (i * h.eta * g.z_minus).exp();
        let er = (-i * h.eta * g.z_plus).exp();
        let inc_l = incident.amplitude(Side::Left, h.m) * el;
        let inc_r = incident.amplitude(Side::Right, h.m) * er;
        a.coeffs[k] = (left.coeffs[k] - inc_l) * el;
        b.coeffs[k] = (right.coeffs[k] - inc_r) * er;
    }
    (a, b)
}

/// `τ₀ Σ_{propagating} η_m |c_m|²` for outgoing amplitudes `c`.
pub fn transmitted_energy(coeffs: &TraceVector, ctx: &BlochContext) -> f64 {
    ctx.harmonics()
        .iter()
        .zip(&coeffs.coeffs)
        .filter(|(h, _)| h.is_propagating())
        .map(|(h, c)| ctx.tau0 * h.eta.re * c.norm_sqr())
        .sum()
}

/// Outgoing flux minus incident flux; zero for lossless structures.
pub fn energy_balance(sol: &ScatteringSolution) -> f64 {
    sol.energy_reflected + sol.energy_transmitted - sol.incident_flux
}

/// Balance defect relative to the incident flux (absolute if there is none).
pub fn relative_balance(sol: &ScatteringSolution) -> f64 {
    let d = energy_balance(sol);
    if sol.incident_flux > 0.0 {
        d / sol.incident_flux
    } else {
        d
    }
}

/// Per-order efficiencies normalized by the incident flux.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Efficiencies {
    pub reflected: Vec<(i64, f64)>,
    pub transmitted: Vec<(i64, f64)>,
}

pub fn efficiencies(sol: &ScatteringSolution) -> Efficiencies {
    let ctx = &sol.ctx;
    let per = |t: &TraceVector| {
        ctx.harmonics()
            .iter()
            .zip(&t.coeffs)
            .filter(|(h, _)| h.is_propagating())
            .map(|(h, c)| (h.m, ctx.tau0 * h.eta.re * c.norm_sqr() / sol.incident_flux))
            .collect()
    };
    Efficiencies {
        reflected: per(&sol.a),
        transmitted: per(&sol.b),
    }
}

/// Discrete conormal trace `τ₀ h₁ ∂ₙu = ((K − ω²M)u − s)` on a boundary layer,
/// in Fourier coefficients.
pub fn neumann_trace(sys: &DiscreteSystem, u: &[C], volume_rhs: Option<&[C]>, side: Side) -> TraceVector {
    let w2 = sys.ctx.omega * sys.ctx.omega;
    let ku = sys.stiffness.matvec(u);
    let mu = sys.mass.matvec(u);
    let h = PERIOD / sys.nx() as f64;
    let vals: Vec<C> = sys
        .mesh
        .boundary_dofs(side)
        .map(|d| {
            let s = volume_rhs.map(|v| v[d]).unwrap_or_default();
            (ku[d] - mu[d] * w2 - s) / (sys.ctx.tau0 * h)
        })
        .collect();
    TraceVector::from_nodal(&sys.ctx, side, &vals)
}

/// `‖∂ₙu^sc + Tu^sc‖` on both boundaries, from the discrete conormal trace.
pub fn scattered_outgoing_residual(
    sys: &DiscreteSystem,
    sol: &ScatteringSolution,
    volume_rhs: Option<&[C]>,
) -> Result<(f64, f64)> {
    let ctx = &sys.ctx;
    let g = &sys.mesh.geom;
    let i = C::new(0.0, 1.0);
    let mut out = [0.0; 2];
    for (slot, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        let mut trace = TraceVector::from_nodal(ctx, side, sys.mesh.boundary_values(&sol.u, side));
        let mut dn = neumann_trace(sys, &sol.u, volume_rhs, side);
        for (k, h) in sys.harmonics.iter().enumerate() {
            // incident trace and its normal derivative (outward normal ∓x₃)
            let (value, deriv) = match side {
                Side::Left => {
                    let v = sol.incident.amplitude(side, h.m) * (i * h.eta * g.z_minus).exp();
                    (v, -i * h.eta * v)
                }
                Side::Right => {
                    let v = sol.incident.amplitude(side, h.m) * (-i * h.eta * g.z_plus).exp();
                    (v, -i * h.eta * v)
                }
            };
            trace.coeffs[k] -= value;
            dn.coeffs[k] -= deriv;
        }
        out[slot] = crate::harmonics::outgoing_residual(ctx, &trace, &dn)?;
    }
    Ok((out[0], out[1]))
}

/// Summary of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub incident_flux: f64,
    pub reflected_flux: f64,
    pub transmitted_flux: f64,
    pub balance_defect: f64,
    pub residual: f64,
    pub condition: Option<f64>,
    pub a: Vec<C>,
    pub b: Vec<C>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub omega: f64,
    pub kappa: f64,
    pub result: std::result::Result<SweepSummary, String>,
}

impl SweepSummary {
    fn from_solution(sol: &ScatteringSolution) -> Self {
        Self {
            incident_flux: sol.incident_flux,
            reflected_flux: sol.energy_reflected,
            transmitted_flux: sol.energy_transmitted,
            balance_defect: energy_balance(sol),
            residual: sol.residual,
            condition: sol.condition,
            a: sol.a.coeffs.clone(),
            b: sol.b.coeffs.clone(),
        }
    }
}

/// Independent solves over the grid `omegas × kappas`, sorted by `(ω, κ)`.
/// Failures are recorded per row.
pub fn sweep(
    scatterer: &Scatterer,
    incident: &Incident,
    omegas: &[f64],
    kappas: &[f64],
    opts: &SolveOptions,
) -> Vec<SweepRow> {
    let points: Vec<(f64, f64)> = omegas
        .iter()
        .flat_map(|&w| kappas.iter().map(move |&k| (w, k)))
        .collect();
    let mut rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(omega, kappa)| {
            let result = scatterer
                .context(omega, kappa)
                .and_then(|ctx| scatterer.solve(&ctx, incident, opts))
                .map(|sol| SweepSummary::from_solution(&sol))
                .map_err(|e| e.to_string());
            SweepRow {
                omega,
                kappa: crate::harmonics::reduce_kappa(kappa),
                result,
            }
        })
        .collect();
    rows.sort_by(|x, y| x.omega.total_cmp(&y.omega).then(x.kappa.total_cmp(&y.kappa)));
    rows
}

pub const SWEEP_COLUMNS: &str = "omega,kappa,incident_flux,reflected_flux,transmitted_flux,balance_defect,residual";

/// Sweep table; with `orders = Some(m_max)` the amplitudes of `|m| ≤ m_max` are appended.
/// Failed points carry `nan` values.
pub fn sweep_to_csv(rows: &[SweepRow], orders: Option<usize>) -> String {
    let mut out = String::from("# slabscat-sweep v1\n");
    let mut head = SWEEP_COLUMNS.to_string();
    if let Some(mm) = orders {
        let mm = mm as i64;
        for m in -mm..=mm {
            head.push_str(&format!(",a_{m}_re,a_{m}_im,b_{m}_re,b_{m}_im"));
        }
    }
    out.push_str(&head);
    out.push('\n');
    for row in rows {
        let mut fields = vec![fmt_f64(row.omega), fmt_f64(row.kappa)];
        match &row.result {
            Ok(s) => {
                for v in [s.incident_flux, s.reflected_flux, s.transmitted_flux, s.balance_defect, s.residual] {
                    fields.push(fmt_f64(v));
                }
                if let Some(mm) = orders {
                    for k in 0..(2 * mm + 1) {
                        let a = s.a.get(k).copied().unwrap_or_default();
                        let b = s.b.get(k).copied().unwrap_or_default();
                        for v in [a.re, a.im, b.re, b.im] {
                            fields.push(fmt_f64(v));
                        }
                    }
                }
            }
            Err(_) => {
                let n = 5 + orders.map(|mm| 4 * (2 * mm + 1)).unwrap_or(0);
                fields.extend(std::iter::repeat("nan".to_string()).take(n));
            }
        }
        out.push_str(&csv_line(fields));
    }
    out
}
