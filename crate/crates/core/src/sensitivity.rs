//! Adjoint sensitivities of transmitted energy and diffraction amplitudes.
//!
//! For a perturbation `(ε̆, τ̆)` of the coefficients the first variation of the
//! transmitted energy is
//!
//! ```text
//! Ĕ₀ = (1/2π) Im ∫_Ω ( τ̆ ∇u·∇u_ad − ω² ε̆ u u_ad )
//! ```
//!
//! where `u_ad` solves the scattering problem at `−κ` with incident field
//! `Σ conj(b_m) e^{−iη_m x₃} e^{−i(m+κ)x₁}` sent back from `Γ₊`. No conjugate
//! appears in the pairing. The factor `1/2π` is the length of the period
//! boundary, which the discrete energy carries through the boundary DFT.
//!
//! Two quadratures of the pairing are offered: the midpoint rule (the formula
//! as written, consistent with the continuum to `O(h²)`) and exact element
//! integration, which reproduces the derivative of the *discrete* energy to
//! solver precision because the `−κ` system matrix is the transpose of the
//! `κ` one.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::assembly::{element_matrices, element_pairing, ElementMatrix, Incident, Mesh};
use crate::error::{Error, Result};
use crate::harmonics::{eta_of, BlochContext, Side, TraceVector, PERIOD};
use crate::io::{csv_line, fmt_f64, header};
use crate::linalg::solve_refined;
use crate::scatter::{Factored, ScatteringSolution, Scatterer, SolveOptions};
use crate::structure::{
    check_admissible, inclusion_mask, lp_norm, AdmissibleEnvelope, Background, CellGeometry, CoefficientField,
    Inclusion, Perturbation, Shape, SourceTerm,
};

type C = Complex64;

/// Normalization of the per-order gradient in the 2D reduction:
/// `(b̆_m)₀ = C_norm/(η_m τ₀) ∫ ( τ̆ ∇u·∇u_ad^m − ω² ε̆ u u_ad^m )`.
pub fn c_norm() -> C {
    C::new(0.0, -1.0 / (4.0 * PI))
}

/// Default finite-difference steps.
pub const DEFAULT_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Minimum number of boundary samples for interface integrals.
pub const MIN_BOUNDARY_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Quadrature {
    /// One-point rule at element centers.
    Midpoint,
    /// Exact integration of the Q1 products.
    Element,
}

/// Adjoint field on the primal mesh, `−κ`-pseudoperiodic.
#[derive(Debug, Clone)]
pub struct AdjointField {
    pub ctx: BlochContext,
    pub u: Vec<C>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InclusionGradient {
    pub id: i64,
    pub d_eps: f64,
    pub d_tau: f64,
}

/// Per-order pairing densities for `b_m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderGradient {
    pub m: i64,
    pub eta: f64,
    pub b_m: C,
    pub c_norm: C,
    pub g_eps: Vec<C>,
    pub g_tau: Vec<C>,
}

impl OrderGradient {
    /// Predicted `(b̆_m)₀` for a direction.
    pub fn pair(&self, geom: &CellGeometry, dir: &Perturbation) -> C {
        let s: C = (0..self.g_eps.len())
            .map(|c| self.g_eps[c] * dir.d_eps[c] + self.g_tau[c] * dir.d_tau[c])
            .sum();
        s * geom.cell_area()
    }
}

/// Cellwise gradient densities of `ℰ`: `Ĕ₀ ≈ Σ (g_eps ε̆ + g_tau τ̆)·cell_area`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub energy: f64,
    pub g_eps: Vec<f64>,
    pub g_tau: Vec<f64>,
    pub per_inclusion: Vec<InclusionGradient>,
    pub per_order: Vec<OrderGradient>,
}

impl SensitivityResult {
    pub fn pair(&self, geom: &CellGeometry, dir: &Perturbation) -> f64 {
        let s: f64 = (0..self.g_eps.len())
            .map(|c| self.g_eps[c] * dir.d_eps[c] + self.g_tau[c] * dir.d_tau[c])
            .sum();
        s * geom.cell_area()
    }

    /// Euclidean norm of the densities restricted to a mask, `ε` part and optionally `τ`.
    pub fn norm(&self, mask: &[bool], with_tau: bool) -> f64 {
        let mut s = 0.0;
        for c in 0..self.g_eps.len() {
            if mask[c] {
                s += self.g_eps[c] * self.g_eps[c];
                if with_tau {
                    s += self.g_tau[c] * self.g_tau[c];
                }
            }
        }
        s.sqrt()
    }
}

/// Cell integrals `∫_c ∇u·∇w` and `∫_c u w` (no conjugation).
#[derive(Debug, Clone)]
pub struct CellPairings {
    pub grad: Vec<C>,
    pub value: Vec<C>,
}

fn unit_matrices(geom: &CellGeometry) -> (ElementMatrix, ElementMatrix) {
    element_matrices(geom.h1(), geom.h3(), 1.0, 1.0)
}

/// Cellwise pairings of a `κ_u`-field with a `κ_w`-field on the same grid.
pub fn cell_pairings(geom: &CellGeometry, kappa_u: f64, u: &[C], kappa_w: f64, w: &[C], quad: Quadrature) -> CellPairings {
    let mu = Mesh::new(*geom, kappa_u);
    let mw = Mesh::new(*geom, kappa_w);
    let (k1, m1) = unit_matrices(geom);
    let (h1, h3) = (geom.h1(), geom.h3());
    let area = geom.cell_area();
    let n = geom.n_cells();
    let mut grad = vec![C::default(); n];
    let mut value = vec![C::default(); n];
    for ke in 0..geom.nz {
        for ie in 0..geom.nx {
            let c = geom.cell_index(ie, ke);
            let lu = mu.gather(u, ie, ke);
            let lw = mw.gather(w, ie, ke);
            match quad {
                Quadrature::Element => {
                    grad[c] = element_pairing(&k1, &lw, &lu);
                    value[c] = element_pairing(&m1, &lw, &lu);
                }
                Quadrature::Midpoint => {
                    let mid = |l: &[C; 4]| {
                        let v = (l[0] + l[1] + l[2] + l[3]) * 0.25;
                        let d1 = ((l[1] - l[0]) + (l[2] - l[3])) / (2.0 * h1);
                        let d3 = ((l[3] - l[0]) + (l[2] - l[1])) / (2.0 * h3);
                        (v, d1, d3)
                    };
                    let (vu, u1, u3) = mid(&lu);
                    let (vw, w1, w3) = mid(&lw);
                    grad[c] = (u1 * w1 + u3 * w3) * area;
                    value[c] = vu * vw * area;
                }
            }
        }
    }
    CellPairings { grad, value }
}

/// Incident field of the energy adjoint: `conj(b_m)` on order `−m` at `−κ`, from `Γ₊`.
pub fn adjoint_incident(ctx: &BlochContext, b: &TraceVector) -> Incident {
    let b_inc = ctx
        .harmonics()
        .iter()
        .zip(&b.coeffs)
        .filter(|(h, c)| h.is_propagating() && **c != C::default())
        .map(|(h, c)| (-h.m, c.conj()))
        .collect();
    Incident { a_inc: vec![], b_inc }
}

/// Solves the adjoint scattering problem at `−κ`.
pub fn solve_adjoint(scatterer: &Scatterer, primal: &ScatteringSolution, opts: &SolveOptions) -> Result<AdjointField> {
    let neg = primal.ctx.negated();
    let inc = adjoint_incident(&primal.ctx, &primal.b);
    if inc.is_empty() {
        let n = Mesh::new(scatterer.geom, neg.kappa).n_dofs();
        return Ok(AdjointField {
            ctx: neg,
            u: vec![C::default(); n],
        });
    }
    let sol = scatterer.solve(&neg, &inc, opts)?;
    Ok(AdjointField { ctx: neg, u: sol.u })
}

fn check_len(geom: &CellGeometry, n: usize) -> Result<()> {
    let expected = geom.nx * (geom.nz + 1);
    if n != expected {
        return Err(Error::GridMismatch { expected, actual: n });
    }
    Ok(())
}

/// Gradient densities of `ℰ` from the primal and adjoint fields.
pub fn gradient_energy(
    geom: &CellGeometry,
    primal: &ScatteringSolution,
    adjoint: &AdjointField,
    quad: Quadrature,
) -> Result<SensitivityResult> {
    check_len(geom, primal.u.len())?;
    check_len(geom, adjoint.u.len())?;
    let w2 = primal.ctx.omega * primal.ctx.omega;
    let p = cell_pairings(geom, primal.ctx.kappa, &primal.u, adjoint.ctx.kappa, &adjoint.u, quad);
    let scale = 1.0 / (PERIOD * geom.cell_area());
    Ok(SensitivityResult {
        energy: primal.energy_transmitted,
        g_eps: p.value.iter().map(|v| -w2 * v.im * scale).collect(),
        g_tau: p.grad.iter().map(|v| v.im * scale).collect(),
        per_inclusion: vec![],
        per_order: vec![],
    })
}

/// Gradient of the discrete `ℰ` by a solve with the transposed system matrix.
pub fn discrete_gradient(scatterer: &Scatterer, primal: &ScatteringSolution, opts: &SolveOptions) -> Result<SensitivityResult> {
    let ctx = primal.ctx;
    let sys = scatterer.system(&ctx)?;
    let at = sys.system_matrix().transpose();
    let lu = at.factor()?;
    // ∂ℰ/∂u = gᵀ with g_j = τ₀ Σ η_m conj(b_m) e^{−iη_m z₊} e^{−i(m+κ)x_j}/nx on Γ₊
    let nx = scatterer.geom.nx;
    let h = PERIOD / nx as f64;
    let mut g = vec![C::default(); sys.n_dofs()];
    let range = sys.mesh.boundary_dofs(Side::Right);
    for (hm, b) in sys.harmonics.iter().zip(&primal.b.coeffs) {
        if !hm.is_propagating() {
            continue;
        }
        let coeff = ctx.tau0 * hm.eta.re * b.conj() * C::new(0.0, -hm.eta.re * scatterer.geom.z_plus).exp() / nx as f64;
        let q = hm.m as f64 + ctx.kappa;
        for (j, d) in range.clone().enumerate() {
            g[d] += coeff * C::from_polar(1.0, -q * h * j as f64);
        }
    }
    let (lambda, residual) = solve_refined(&at, &lu, &g, opts.refinement_steps);
    if residual > opts.tolerance {
        return Err(Error::Residual {
            residual,
            tolerance: opts.tolerance,
        });
    }
    let w2 = ctx.omega * ctx.omega;
    let p = cell_pairings(&scatterer.geom, ctx.kappa, &primal.u, -ctx.kappa, &lambda, Quadrature::Element);
    let area = scatterer.geom.cell_area();
    // dℰ = −2 Re(λᵀ dA u), dA = τ̆ K − ω² ε̆ M
    Ok(SensitivityResult {
        energy: primal.energy_transmitted,
        g_eps: p.value.iter().map(|v| 2.0 * w2 * v.re / area).collect(),
        g_tau: p.grad.iter().map(|v| -2.0 * v.re / area).collect(),
        per_inclusion: vec![],
        per_order: vec![],
    })
}

/// Which gradient to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradientPath {
    /// `−κ` adjoint scattering solve with the given pairing quadrature.
    Continuum(Quadrature),
    /// Transposed-system solve (exact derivative of the discrete energy).
    Discrete,
}

/// Primal solve followed by the requested gradient.
pub fn energy_gradient(
    scatterer: &Scatterer,
    ctx: &BlochContext,
    incident: &Incident,
    path: GradientPath,
    opts: &SolveOptions,
) -> Result<(ScatteringSolution, SensitivityResult)> {
    let primal = scatterer.solve(ctx, incident, opts)?;
    let inner = SolveOptions {
        estimate_condition: false,
        ..*opts
    };
    let grad = match path {
        GradientPath::Discrete => discrete_gradient(scatterer, &primal, &inner)?,
        GradientPath::Continuum(q) => {
            let adj = solve_adjoint(scatterer, &primal, &inner)?;
            gradient_energy(&scatterer.geom, &primal, &adj, q)?
        }
    };
    Ok((primal, grad))
}

/// Raw per-order pairing densities `(1/(η_m τ₀)) (∫∇u·∇u_ad^m, −ω²∫u u_ad^m)` per unit area.
fn order_raw(
    scatterer: &Scatterer,
    primal: &ScatteringSolution,
    m: i64,
    quad: Quadrature,
    opts: &SolveOptions,
) -> Result<(f64, Vec<C>, Vec<C>)> {
    let ctx = primal.ctx;
    let h = eta_of(&ctx, m);
    if !h.is_propagating() {
        return Err(Error::NotPropagating { m });
    }
    let neg = ctx.negated();
    let inc = Incident::from_right(-m, C::new(1.0, 0.0));
    let adj = scatterer.solve(&neg, &inc, opts)?;
    let p = cell_pairings(&scatterer.geom, ctx.kappa, &primal.u, neg.kappa, &adj.u, quad);
    let eta = h.eta.re;
    let scale = 1.0 / (eta * ctx.tau0 * scatterer.geom.cell_area());
    let w2 = ctx.omega * ctx.omega;
    Ok((
        eta,
        p.value.iter().map(|v| v * (-w2 * scale)).collect(),
        p.grad.iter().map(|v| v * scale).collect(),
    ))
}

/// Derivative pairing of the amplitude `b_m`, a propagating order.
pub fn gradient_order(
    scatterer: &Scatterer,
    primal: &ScatteringSolution,
    m: i64,
    quad: Quadrature,
    opts: &SolveOptions,
) -> Result<OrderGradient> {
    let (eta, re, rt) = order_raw(scatterer, primal, m, quad, opts)?;
    let cn = c_norm();
    Ok(OrderGradient {
        m,
        eta,
        b_m: primal.b.get(&primal.ctx, m),
        c_norm: cn,
        g_eps: re.into_iter().map(|v| v * cn).collect(),
        g_tau: rt.into_iter().map(|v| v * cn).collect(),
    })
}

/// Fits `C_norm` by least squares against finite differences of `b_m` over
/// several directions (exact element pairing, Richardson-extrapolated FD).
pub fn calibrate_c_norm(
    scatterer: &Scatterer,
    ctx: &BlochContext,
    incident: &Incident,
    m: i64,
    directions: &[Perturbation],
    steps: &[f64],
    opts: &SolveOptions,
) -> Result<C> {
    let primal = scatterer.solve(ctx, incident, opts)?;
    let (_, re, rt) = order_raw(scatterer, &primal, m, Quadrature::Element, opts)?;
    let raw = OrderGradient {
        m,
        eta: 0.0,
        b_m: C::default(),
        c_norm: C::new(1.0, 0.0),
        g_eps: re,
        g_tau: rt,
    };
    let (mut num, mut den) = (C::default(), 0.0);
    for dir in directions {
        let r = raw.pair(&scatterer.geom, dir);
        let fd = fd_values(scatterer, ctx, incident, dir, Functional::Order(m), steps, None, opts)?;
        let d = richardson(steps, &fd);
        num += r.conj() * d;
        den += r.norm_sqr();
    }
    if den == 0.0 {
        return Err(Error::InvalidParameter("calibration directions have zero pairing".into()));
    }
    Ok(num / den)
}

/// Sums the energy densities over each inclusion's cells.
pub fn gradient_homogeneous(
    result: &SensitivityResult,
    geom: &CellGeometry,
    inclusions: &[Inclusion],
) -> Result<Vec<InclusionGradient>> {
    let area = geom.cell_area();
    inclusions
        .iter()
        .map(|inc| {
            let mask = inclusion_mask(geom, inc);
            if !mask.iter().any(|&b| b) {
                return Err(Error::EmptyInclusion(inc.id));
            }
            let (mut de, mut dt) = (0.0, 0.0);
            for (c, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
                de += result.g_eps[c] * area;
                dt += result.g_tau[c] * area;
            }
            Ok(InclusionGradient {
                id: inc.id,
                d_eps: de,
                d_tau: dt,
            })
        })
        .collect()
}

/// Shape derivative of `ℰ` for a normal boundary velocity on a disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryGradient {
    /// Normal flux divided by `τ_in²` (inside trace of `∇u·∇u_ad`).
    pub inside: f64,
    /// Normal flux divided by `τ_out²` (outside trace).
    pub outside: f64,
    /// Normal flux divided by `τ_in τ_out`; the shape derivative of the
    /// discontinuous-coefficient problem.
    pub recombined: f64,
    pub samples: usize,
}

/// `dℰ/dh` for the boundary motion `x ↦ x + h v(x)`, `v·n` given at
/// `velocity.len()` equispaced angles on the disk.
///
/// One-sided traces are linearly extrapolated from points one and two offsets
/// away from the interface, where the offset clears the cells cut by it.
pub fn gradient_boundary(
    geom: &CellGeometry,
    background: Background,
    inclusion: &Inclusion,
    primal: &ScatteringSolution,
    adjoint: &AdjointField,
    velocity: &[f64],
) -> Result<BoundaryGradient> {
    let (center, radius) = match inclusion.shape {
        Shape::Disk { center, radius } => (center, radius),
        Shape::Rect { .. } => {
            return Err(Error::InvalidParameter("boundary gradients are implemented for disks only".into()))
        }
    };
    let n = velocity.len();
    if n < MIN_BOUNDARY_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_BOUNDARY_SAMPLES} boundary samples, got {n}"
        )));
    }
    check_len(geom, primal.u.len())?;
    check_len(geom, adjoint.u.len())?;
    let delta = 1.5 * geom.h1().hypot(geom.h3());
    let reach = radius + 2.0 * delta;
    if radius <= 2.0 * delta
        || center.0 - reach <= 0.0
        || center.0 + reach >= PERIOD
        || center.1 - reach <= geom.z_minus
        || center.1 + reach >= geom.z_plus
    {
        return Err(Error::BoundaryTooClose(inclusion.id));
    }
    let mu = Mesh::new(*geom, primal.ctx.kappa);
    let mw = Mesh::new(*geom, adjoint.ctx.kappa);
    let (t_in, t_out) = (inclusion.tau, background.tau);
    let (d_tau, d_eps) = (inclusion.tau - background.tau, inclusion.eps - background.eps);
    let w2 = primal.ctx.omega * primal.ctx.omega;
    let ds = PERIOD * radius / n as f64;

    let one_sided = |mesh: &Mesh, f: &[C], normal: (f64, f64), s: f64| {
        let at = |r: f64| mesh.evaluate(f, center.0 + r * normal.0, center.1 + r * normal.1);
        let (v1, g1) = at(radius + s * delta);
        let (v2, g2) = at(radius + 2.0 * s * delta);
        let v = v1 * 2.0 - v2;
        let g = [g1[0] * 2.0 - g2[0], g1[1] * 2.0 - g2[1]];
        (v, g)
    };
    // continuous interface quantities: value, tangential derivative, conormal flux
    let traces = |mesh: &Mesh, f: &[C], normal: (f64, f64)| {
        let tangent = (-normal.1, normal.0);
        let (vi, gi) = one_sided(mesh, f, normal, -1.0);
        let (vo, go) = one_sided(mesh, f, normal, 1.0);
        let dt = |g: [C; 2]| g[0] * tangent.0 + g[1] * tangent.1;
        let dn = |g: [C; 2]| g[0] * normal.0 + g[1] * normal.1;
        let value = (vi + vo) * 0.5;
        let tangential = (dt(gi) + dt(go)) * 0.5;
        let flux = (dn(gi) * t_in + dn(go) * t_out) * 0.5;
        (value, tangential, flux)
    };

    let mut acc = [0.0; 3];
    for (k, &vn) in velocity.iter().enumerate() {
        if vn == 0.0 {
            continue;
        }
        let theta = PERIOD * k as f64 / n as f64;
        let normal = (theta.cos(), theta.sin());
        let (u, ut, un) = traces(&mu, &primal.u, normal);
        let (w, wt, wn) = traces(&mw, &adjoint.u, normal);
        let volume = u * w * (-w2 * d_eps);
        for (slot, denom) in [t_in * t_in, t_out * t_out, t_in * t_out].into_iter().enumerate() {
            let grad = ut * wt + un * wn / denom;
            acc[slot] += (grad * d_tau + volume).im * vn * ds;
        }
    }
    let s = 1.0 / PERIOD;
    Ok(BoundaryGradient {
        inside: acc[0] * s,
        outside: acc[1] * s,
        recombined: acc[2] * s,
        samples: n,
    })
}

/// Right-hand side `−(τ̆K − ω²ε̆M)u` of the linearized problem, integrated exactly.
pub fn linearized_rhs(mesh: &Mesh, omega: f64, u: &[C], dir: &Perturbation) -> Vec<C> {
    let g = &mesh.geom;
    let (k1, m1) = unit_matrices(g);
    let w2 = omega * omega;
    let mut rhs = vec![C::default(); mesh.n_dofs()];
    for ke in 0..g.nz {
        for ie in 0..g.nx {
            let c = g.cell_index(ie, ke);
            let (de, dt) = (dir.d_eps[c], dir.d_tau[c]);
            if de == 0.0 && dt == 0.0 {
                continue;
            }
            let dofs = mesh.element_dofs(ie, ke);
            let loc = mesh.gather(u, ie, ke);
            for a in 0..4 {
                let mut s = C::default();
                for b in 0..4 {
                    s += loc[b] * (dt * k1[a][b] - w2 * de * m1[a][b]);
                }
                rhs[dofs[a].0] -= dofs[a].1.conj() * s;
            }
        }
    }
    rhs
}

/// Volume source `ξ = −τ̆∇u`, `h = ω²ε̆u` of the linearized problem, sampled at
/// element midpoints.
pub fn linearization_source(mesh: &Mesh, omega: f64, u: &[C], dir: &Perturbation) -> SourceTerm {
    let g = &mesh.geom;
    let mut src = SourceTerm::zeros(g.n_cells());
    let w2 = omega * omega;
    for ke in 0..g.nz {
        for ie in 0..g.nx {
            let c = g.cell_index(ie, ke);
            let (x, z) = g.cell_center(ie, ke);
            let (v, grad) = mesh.evaluate(u, x, z);
            src.xi[c] = [grad[0] * -dir.d_tau[c], grad[1] * -dir.d_tau[c]];
            src.h[c] = v * (w2 * dir.d_eps[c]);
        }
    }
    src
}

/// First-order field response `ŭ₀` to a coefficient perturbation.
#[derive(Debug, Clone)]
pub struct LinearizedField {
    pub u0: Vec<C>,
    pub direction: Perturbation,
}

/// Solves `A ŭ₀ = −(τ̆K − ω²ε̆M)u` with zero incident field; `ŭ₀` is outgoing.
pub fn solve_linearized(
    scatterer: &Scatterer,
    primal: &ScatteringSolution,
    direction: &Perturbation,
    opts: &SolveOptions,
) -> Result<LinearizedField> {
    if direction.n_cells() != scatterer.geom.n_cells() {
        return Err(Error::GridMismatch {
            expected: scatterer.geom.n_cells(),
            actual: direction.n_cells(),
        });
    }
    let sys = scatterer.system(&primal.ctx)?;
    let rhs = linearized_rhs(&sys.mesh, primal.ctx.omega, &primal.u, direction);
    let fac = Factored::new(&sys)?;
    let (u0, _) = fac.solve(&rhs, opts)?;
    Ok(LinearizedField {
        u0,
        direction: direction.clone(),
    })
}

/// Quantity differentiated by [`fd_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Functional {
    Energy,
    Order(i64),
    Field,
}

/// Finite-difference verification report.
///
/// For `Energy` and `Order(m)` the values are central differences of the
/// functional. For `Field` they are relative `H¹` errors
/// `‖(u(t) − u)/t − ŭ₀‖/‖ŭ₀‖`, `extrapolated` is their Richardson limit (ideally
/// zero) and `adjoint_value` is `‖ŭ₀‖`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub functional: Functional,
    pub steps: Vec<f64>,
    pub fd_values: Vec<C>,
    pub extrapolated: C,
    pub adjoint_value: C,
    pub rel_error: f64,
    pub fitted_order: f64,
}

impl FdReport {
    /// JSON with keys `steps, fd_values, extrapolated, adjoint_value, rel_error,
    /// fitted_order`; complex values are `[re, im]` pairs for `Order`.
    pub fn to_json(&self) -> serde_json::Value {
        let real = !matches!(self.functional, Functional::Order(_));
        let num = |c: C| {
            if real {
                serde_json::json!(c.re)
            } else {
                serde_json::json!([c.re, c.im])
            }
        };
        serde_json::json!({
            "functional": match self.functional {
                Functional::Energy => "energy".to_string(),
                Functional::Order(m) => format!("order:{m}"),
                Functional::Field => "field".to_string(),
            },
            "steps": self.steps,
            "fd_values": self.fd_values.iter().map(|&c| num(c)).collect::<Vec<_>>(),
            "extrapolated": num(self.extrapolated),
            "adjoint_value": num(self.adjoint_value),
            "rel_error": self.rel_error,
            "fitted_order": self.fitted_order,
        })
    }
}

/// Richardson extrapolation of central differences, `D(h) = D₀ + c h² + …`.
///
/// Two steps give the classical extrapolation. With more, `D₀` and `c` are
/// fitted by least squares with weights `h²`: the cancellation error of a
/// central difference grows like `1/h`, so the smallest steps are the noisiest.
pub fn richardson(steps: &[f64], values: &[C]) -> C {
    let n = values.len();
    if n < 2 {
        return values.first().copied().unwrap_or_default();
    }
    if n == 2 {
        let r = (steps[0] / steps[1]).powi(2);
        return values[1] + (values[1] - values[0]) / (r - 1.0);
    }
    let x0 = steps[0] * steps[0];
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let (mut f0, mut f1) = (C::default(), C::default());
    for (h, v) in steps.iter().zip(values) {
        let x = h * h / x0;
        let w = x;
        s0 += w;
        s1 += w * x;
        s2 += w * x * x;
        f0 += v * w;
        f1 += v * (w * x);
    }
    (f0 * s2 - f1 * s1) / (s0 * s2 - s1 * s1)
}

/// Least-squares slope of `log y` against `log x`, ignoring nonpositive entries.
pub fn fit_order(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn perturbed(
    scatterer: &Scatterer,
    dir: &Perturbation,
    t: f64,
    envelope: Option<&AdmissibleEnvelope>,
) -> Result<Scatterer> {
    let field = scatterer.field.perturb(dir, t)?;
    if let Some(env) = envelope {
        let report = check_admissible(&field, env)?;
        if !report.admissible {
            return Err(Error::Inadmissible {
                count: report.violations.len(),
            });
        }
    }
    Ok(scatterer.with_field(field))
}

fn functional_value(sol: &ScatteringSolution, f: Functional) -> C {
    match f {
        Functional::Energy => C::new(sol.energy_transmitted, 0.0),
        Functional::Order(m) => sol.b.get(&sol.ctx, m),
        Functional::Field => C::default(),
    }
}

/// Central differences of a scalar functional for each step.
#[allow(clippy::too_many_arguments)]
fn fd_values(
    scatterer: &Scatterer,
    ctx: &BlochContext,
    incident: &Incident,
    dir: &Perturbation,
    functional: Functional,
    steps: &[f64],
    envelope: Option<&AdmissibleEnvelope>,
    opts: &SolveOptions,
) -> Result<Vec<C>> {
    steps
        .par_iter()
        .map(|&h| {
            let plus = perturbed(scatterer, dir, h, envelope)?.solve(ctx, incident, opts)?;
            let minus = perturbed(scatterer, dir, -h, envelope)?.solve(ctx, incident, opts)?;
            Ok((functional_value(&plus, functional) - functional_value(&minus, functional)) / (2.0 * h))
        })
        .collect()
}

/// Compares finite differences with the adjoint (or linearized) prediction.
#[allow(clippy::too_many_arguments)]
pub fn fd_check(
    scatterer: &Scatterer,
    ctx: &BlochContext,
    incident: &Incident,
    direction: &Perturbation,
    functional: Functional,
    steps: &[f64],
    envelope: Option<&AdmissibleEnvelope>,
    opts: &SolveOptions,
) -> Result<FdReport> {
    if steps.len() < 2 || steps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::InvalidParameter("need at least two positive finite-difference steps".into()));
    }
    let mut steps = steps.to_vec();
    steps.sort_by(|a, b| b.total_cmp(a));
    let opts = SolveOptions {
        estimate_condition: false,
        ..*opts
    };
    let primal = scatterer.solve(ctx, incident, &opts)?;
    let geom = &scatterer.geom;
    match functional {
        Functional::Energy | Functional::Order(_) => {
            let adjoint_value = match functional {
                Functional::Energy => C::new(discrete_gradient(scatterer, &primal, &opts)?.pair(geom, direction), 0.0),
                Functional::Order(m) => {
                    gradient_order(scatterer, &primal, m, Quadrature::Element, &opts)?.pair(geom, direction)
                }
                Functional::Field => unreachable!(),
            };
            let fd = fd_values(scatterer, ctx, incident, direction, functional, &steps, envelope, &opts)?;
            let extrapolated = richardson(&steps, &fd);
            let errs: Vec<f64> = fd.iter().map(|v| (v - extrapolated).norm()).collect();
            let scale = extrapolated.norm().max(adjoint_value.norm());
            let rel_error = if scale > 0.0 {
                (adjoint_value - extrapolated).norm() / scale
            } else {
                0.0
            };
            Ok(FdReport {
                functional,
                fitted_order: fit_order(&steps[..steps.len() - 1], &errs[..errs.len() - 1]),
                steps,
                fd_values: fd,
                extrapolated,
                adjoint_value,
                rel_error,
            })
        }
        Functional::Field => {
            let lin = solve_linearized(scatterer, &primal, direction, &opts)?;
            let sys = scatterer.system(ctx)?;
            let norm0 = sys.h1_norm(&lin.u0);
            let errs: Vec<f64> = steps
                .par_iter()
                .map(|&t| {
                    let sol = perturbed(scatterer, direction, t, envelope)?.solve(ctx, incident, &opts)?;
                    let diff: Vec<C> = (0..sol.u.len())
                        .map(|d| (sol.u[d] - primal.u[d]) / t - lin.u0[d])
                        .collect();
                    Ok(sys.h1_norm(&diff) / norm0.max(f64::MIN_POSITIVE))
                })
                .collect::<Result<_>>()?;
            let fd: Vec<C> = errs.iter().map(|&e| C::new(e, 0.0)).collect();
            // the errors are O(t): extrapolate linearly
            let n = fd.len();
            let r = steps[n - 2] / steps[n - 1];
            let extrapolated = fd[n - 1] + (fd[n - 1] - fd[n - 2]) / (r - 1.0);
            Ok(FdReport {
                functional,
                fitted_order: fit_order(&steps, &errs),
                rel_error: errs[n - 1],
                steps,
                fd_values: fd,
                extrapolated,
                adjoint_value: C::new(norm0, 0.0),
            })
        }
    }
}

/// Empirical Lipschitz constant of `ŭ₀` with respect to the base structure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub p: f64,
    /// `‖(Δε, Δτ)‖_p` per pair.
    pub distances: Vec<f64>,
    /// `‖ŭ₀¹ − ŭ₀²‖_{H¹}` per pair.
    pub numerators: Vec<f64>,
    /// `numerator / (distance · ‖(ε̆, τ̆)‖_p)`, zero for identical pairs.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn lipschitz_probe(
    scatterer: &Scatterer,
    ctx: &BlochContext,
    incident: &Incident,
    pairs: &[(CoefficientField, CoefficientField)],
    direction: &Perturbation,
    p: f64,
    envelope: Option<&AdmissibleEnvelope>,
    opts: &SolveOptions,
) -> Result<LipschitzReport> {
    let geom = &scatterer.geom;
    let dir_norm = lp_norm(geom, direction, p)?;
    let opts = SolveOptions {
        estimate_condition: false,
        ..*opts
    };
    let linearize = |field: &CoefficientField| -> Result<Vec<C>> {
        if let Some(env) = envelope {
            for t in [0.0, 1.0] {
                let f = field.perturb(direction, t)?;
                let report = check_admissible(&f, env)?;
                if !report.admissible {
                    return Err(Error::Inadmissible {
                        count: report.violations.len(),
                    });
                }
            }
        }
        let s = scatterer.with_field(field.clone());
        let primal = s.solve(ctx, incident, &opts)?;
        Ok(solve_linearized(&s, &primal, direction, &opts)?.u0)
    };
    let sys = scatterer.system(ctx)?;
    let rows: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(f1, f2)| {
            let distance = lp_norm(geom, &f1.difference(f2)?, p)?;
            if distance == 0.0 {
                return Ok((0.0, 0.0));
            }
            let (a, b) = (linearize(f1)?, linearize(f2)?);
            let diff: Vec<C> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            Ok((distance, sys.h1_norm(&diff)))
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = rows
        .iter()
        .map(|&(d, n)| if d > 0.0 && dir_norm > 0.0 { n / (d * dir_norm) } else { 0.0 })
        .collect();
    Ok(LipschitzReport {
        p,
        distances: rows.iter().map(|r| r.0).collect(),
        numerators: rows.iter().map(|r| r.1).collect(),
        max_ratio: ratios.iter().copied().fold(0.0, f64::max),
        ratios,
    })
}

/// Gradient dump: `# slabscat-grad nx=.. nz=..` then `i,j,g_eps,g_tau` per cell.
pub fn gradient_to_csv(geom: &CellGeometry, result: &SensitivityResult) -> String {
    let mut out = header("slabscat-grad", &[("nx", geom.nx.to_string()), ("nz", geom.nz.to_string())]);
    out.push_str("i,j,g_eps,g_tau\n");
    for c in 0..geom.n_cells() {
        let (i, k) = geom.cell_of(c);
        out.push_str(&csv_line([
            i.to_string(),
            k.to_string(),
            fmt_f64(result.g_eps[c]),
            fmt_f64(result.g_tau[c]),
        ]));
    }
    out
}
