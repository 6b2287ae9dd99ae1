//! Real eigenvalue sequence of the Hermitian part and guided modes.
//!
//! For fixed `ω` the pencil `(A_r(ω), B)`, with `A_r` the volume stiffness plus
//! the evanescent part of the DtN term and `B` the `ε`-weighted mass, has
//! real eigenvalues `0 ≤ λ₁^ω ≤ λ₂^ω ≤ …`, each nonincreasing in `ω`. The
//! frequency `ω_j` is the unique positive root of `λ_j^ω = ω²`. A guided mode is
//! an eigenfunction whose propagating boundary harmonics vanish; such an `ω_j`
//! is a real eigenvalue of the full (complex) problem, where scattering is
//! ill-posed.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assembly::DiscreteSystem;
use crate::error::{Error, Result};
use crate::harmonics::{Side, TraceVector};
use crate::io::{csv_line, fmt_f64};
use crate::linalg::{dense_hermitian_pencil, inner, BlockTridiag, CsrMatrix};
use crate::scatter::Scatterer;
use crate::structure::AdmissibleEnvelope;

type C = Complex64;

/// Largest system solved with the dense generalized eigensolver under `Auto`.
pub const DENSE_LIMIT: usize = 256;

/// Propagating trace coefficients below this size mark a guided mode.
pub const GUIDED_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EigenMethod {
    Auto,
    Dense,
    /// Shift-invert subspace iteration with Rayleigh–Ritz projection.
    Subspace,
}

/// Lowest `count` eigenpairs of `(A_r, B)`, ascending, `B`-orthonormal.
pub fn lowest_eigenpairs(sys: &DiscreteSystem, count: usize, method: EigenMethod) -> Result<(Vec<f64>, Vec<Vec<C>>)> {
    lowest_eigenpairs_warm(sys, count, method, &mut None)
}

/// As [`lowest_eigenpairs`]; the iterative path starts from, and refreshes, `warm`.
fn lowest_eigenpairs_warm(
    sys: &DiscreteSystem,
    count: usize,
    method: EigenMethod,
    warm: &mut Option<Vec<Vec<C>>>,
) -> Result<(Vec<f64>, Vec<Vec<C>>)> {
    let n = sys.n_dofs();
    if count == 0 || count > n {
        return Err(Error::InvalidParameter(format!(
            "requested {count} eigenpairs of a system with {n} unknowns"
        )));
    }
    let ar = sys.hermitian_part();
    let dense = match method {
        EigenMethod::Dense => true,
        EigenMethod::Subspace => false,
        EigenMethod::Auto => n <= DENSE_LIMIT,
    };
    if dense {
        let (vals, vecs) = dense_hermitian_pencil(&ar.to_dense(), &sys.mass.to_dense())?;
        let out = (0..count).map(|k| vecs.column(k).iter().copied().collect()).collect();
        Ok((vals[..count].to_vec(), out))
    } else {
        subspace_iteration(&ar, &sys.mass, count, warm)
    }
}

fn b_orthonormalize(b: &CsrMatrix, x: &mut [Vec<C>]) -> Result<()> {
    for _pass in 0..2 {
        for k in 0..x.len() {
            for l in 0..k {
                let bl = b.matvec(&x[l]);
                let c = inner(&bl, &x[k]);
                let xl = x[l].clone();
                x[k].iter_mut().zip(&xl).for_each(|(v, w)| *v -= c * w);
            }
            let nrm = b.quadratic_form(&x[k]).re.sqrt();
            if !(nrm > 0.0 && nrm.is_finite()) {
                return Err(Error::EigenNonConvergence("subspace lost rank".into()));
            }
            x[k].iter_mut().for_each(|v| *v /= nrm);
        }
    }
    Ok(())
}

fn subspace_iteration(
    ar: &BlockTridiag,
    b: &CsrMatrix,
    count: usize,
    warm: &mut Option<Vec<Vec<C>>>,
) -> Result<(Vec<f64>, Vec<Vec<C>>)> {
    const MAX_ITERS: usize = 3000;
    const TOL: f64 = 1e-11;
    let n = ar.n();
    let p = (count + count.max(8)).min(n);
    // A_r is positive semidefinite, so any negative shift keeps the factor definite
    let sigma = -0.1;
    let mut shifted = ar.clone();
    shifted.add_csr(b, C::new(-sigma, 0.0));
    let lu = shifted.factor()?;
    let mut x: Vec<Vec<C>> = match warm.take() {
        Some(w) if w.len() == p && w.iter().all(|v| v.len() == n) => w,
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            (0..p)
                .map(|_| (0..n).map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
                .collect()
        }
    };
    b_orthonormalize(b, &mut x)?;
    let mut worst = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let mut y: Vec<Vec<C>> = x.iter().map(|v| lu.solve(&b.matvec(v))).collect();
        b_orthonormalize(b, &mut y)?;
        let ay: Vec<Vec<C>> = y.iter().map(|v| ar.matvec(v)).collect();
        let by: Vec<Vec<C>> = y.iter().map(|v| b.matvec(v)).collect();
        let h = DMatrix::from_fn(p, p, |i, j| inner(&y[i], &ay[j]));
        let g = DMatrix::from_fn(p, p, |i, j| inner(&y[i], &by[j]));
        let (vals, vecs) = dense_hermitian_pencil(&h, &g)?;
        let rotate = |src: &[Vec<C>], k: usize| -> Vec<C> {
            let mut out = vec![C::default(); n];
            for (j, v) in src.iter().enumerate() {
                let c = vecs[(j, k)];
                out.iter_mut().zip(v).for_each(|(o, w)| *o += c * w);
            }
            out
        };
        x = (0..p).map(|k| rotate(&y, k)).collect();
        worst = 0.0;
        for k in 0..count {
            let ax = rotate(&ay, k);
            let bx = rotate(&by, k);
            let r: f64 = ax
                .iter()
                .zip(&bx)
                .map(|(a, bb)| (a - bb * vals[k]).norm_sqr())
                .sum::<f64>()
                .sqrt();
            let scale = (vals[k].abs() - sigma) * bx.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            worst = worst.max(r / scale);
        }
        if worst < TOL {
            let out = x[..count].to_vec();
            *warm = Some(x);
            return Ok((vals[..count].to_vec(), out));
        }
    }
    Err(Error::EigenNonConvergence(format!(
        "subspace iteration stalled at relative residual {worst:e}"
    )))
}

/// `λ_j^ω` (1-based `j`) of the structure at the trial frequency `omega`.
pub fn lambda_j(scatterer: &Scatterer, omega: f64, kappa: f64, j: usize, method: EigenMethod) -> Result<f64> {
    lambda_j_warm(scatterer, omega, kappa, j, method, &mut None)
}

fn lambda_j_warm(
    scatterer: &Scatterer,
    omega: f64,
    kappa: f64,
    j: usize,
    method: EigenMethod,
    warm: &mut Option<Vec<Vec<C>>>,
) -> Result<f64> {
    if j == 0 {
        return Err(Error::InvalidParameter("eigenvalue index is 1-based".into()));
    }
    let ctx = scatterer.context(omega, kappa)?;
    let sys = scatterer.system(&ctx)?;
    Ok(lowest_eigenpairs_warm(&sys, j, method, warm)?.0[j - 1])
}

/// Smallest frequency used in place of `ω = 0`, where the context is undefined.
fn omega_floor(hi: f64) -> f64 {
    1e-9 * hi.max(1e-3)
}

/// Root of `g_j(ω) = λ_j^ω − ω²` on a bracket, by bisection to `1e-10·ω_hi`.
pub fn omega_j(scatterer: &Scatterer, kappa: f64, j: usize, bracket: (f64, f64), method: EigenMethod) -> Result<f64> {
    let (lo, hi) = bracket;
    if !(lo >= 0.0 && hi > lo) {
        return Err(Error::InvalidParameter(format!("invalid bracket [{lo}, {hi}]")));
    }
    // successive bisection points are close, so each solve starts from the last subspace
    let mut warm = None;
    let mut g = |w: f64| -> Result<f64> { Ok(lambda_j_warm(scatterer, w, kappa, j, method, &mut warm)? - w * w) };
    let mut a = lo.max(omega_floor(hi));
    let mut b = hi;
    let (ga, gb) = (g(a)?, g(b)?);
    if ga < 0.0 || gb > 0.0 {
        return Err(Error::NoBracket { lo, hi });
    }
    let tol = 1e-10 * hi;
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if g(mid)? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// `ω_j` with the bracket `[0, √λ_j^{0⁺}]`, valid because `λ_j^ω` is nonincreasing.
/// Returns `0` when `λ_j` vanishes identically (constant mode at `κ = 0`).
pub fn omega_j_auto(scatterer: &Scatterer, kappa: f64, j: usize, method: EigenMethod) -> Result<f64> {
    let lam0 = lambda_j(scatterer, omega_floor(1.0), kappa, j, method)?;
    if lam0 <= 1e-12 {
        return Ok(0.0);
    }
    let hi = lam0.sqrt() * (1.0 + 1e-9);
    omega_j(scatterer, kappa, j, (0.0, hi), method)
}

/// Largest propagating trace coefficient on either boundary and the guided flag.
pub fn is_guided(sys: &DiscreteSystem, eigvec: &[C], threshold: f64) -> (bool, f64) {
    let mut worst: f64 = 0.0;
    for side in [Side::Left, Side::Right] {
        let t = TraceVector::from_nodal(&sys.ctx, side, sys.mesh.boundary_values(eigvec, side));
        for (h, c) in sys.harmonics.iter().zip(&t.coeffs) {
            if h.is_propagating() {
                worst = worst.max(c.norm());
            }
        }
    }
    (worst <= threshold, worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenSequence {
    pub kappa: f64,
    pub omegas: Vec<f64>,
    #[serde(skip)]
    pub eigvecs: Vec<Vec<C>>,
    pub guided: Vec<bool>,
    pub max_prop_trace: Vec<f64>,
}

/// `ω_1 … ω_count` (stopping above `omega_cap`) with eigenvectors and guided flags.
pub fn eigen_sequence(
    scatterer: &Scatterer,
    kappa: f64,
    count: usize,
    omega_cap: Option<f64>,
    method: EigenMethod,
) -> Result<EigenSequence> {
    let mut seq = EigenSequence {
        kappa: crate::harmonics::reduce_kappa(kappa),
        omegas: vec![],
        eigvecs: vec![],
        guided: vec![],
        max_prop_trace: vec![],
    };
    for j in 1..=count {
        let w = omega_j_auto(scatterer, kappa, j, method)?;
        if omega_cap.is_some_and(|cap| w > cap) {
            break;
        }
        let ctx = scatterer.context(w.max(omega_floor(1.0)), kappa)?;
        let sys = scatterer.system(&ctx)?;
        let (_, vecs) = lowest_eigenpairs(&sys, j, method)?;
        let v = vecs.into_iter().nth(j - 1).expect("j eigenpairs computed");
        let (g, t) = is_guided(&sys, &v, GUIDED_THRESHOLD);
        seq.omegas.push(w);
        seq.eigvecs.push(v);
        seq.guided.push(g);
        seq.max_prop_trace.push(t);
    }
    Ok(seq)
}

/// Modes table `j,omega_j,guided,max_prop_trace`, with a leading `kappa` column
/// for dispersion sweeps.
pub fn modes_to_csv(seqs: &[EigenSequence], with_kappa: bool) -> String {
    let mut out = String::from("# slabscat-modes v1\n");
    out.push_str(if with_kappa {
        "kappa,j,omega_j,guided,max_prop_trace\n"
    } else {
        "j,omega_j,guided,max_prop_trace\n"
    });
    for s in seqs {
        for k in 0..s.omegas.len() {
            let mut fields = vec![];
            if with_kappa {
                fields.push(fmt_f64(s.kappa));
            }
            fields.push((k + 1).to_string());
            fields.push(fmt_f64(s.omegas[k]));
            fields.push(s.guided[k].to_string());
            fields.push(fmt_f64(s.max_prop_trace[k]));
            out.push_str(&csv_line(fields));
        }
    }
    out
}

/// A certified non-resonant frequency interval for every structure in an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub j: usize,
    /// `ω_j(ε₋, τ₊)`, or `0` for `j = 0`.
    pub lower: f64,
    /// `ω_{j+1}(ε₊, τ₋)`.
    pub upper: f64,
    /// Open interval `(lower, upper) ∩ [ω₋, ω₊]`.
    pub interval: (f64, f64),
}

impl Certificate {
    pub fn contains(&self, omega: f64) -> bool {
        omega > self.lower && omega < self.upper && omega >= self.interval.0 && omega <= self.interval.1
    }
}

/// Certifies that no `ω` in `(ω_j(ε₋,τ₊), ω_{j+1}(ε₊,τ₋)) ∩ [ω₋, ω₊]` is an
/// eigenvalue for any coefficients inside the envelope; refuses otherwise.
pub fn check_nonresonance(
    scatterer: &Scatterer,
    envelope: &AdmissibleEnvelope,
    kappa: f64,
    omega_range: (f64, f64),
    j: usize,
    method: EigenMethod,
) -> Result<Certificate> {
    let geom = &scatterer.geom;
    if envelope.n_cells() != geom.n_cells() {
        return Err(Error::GridMismatch {
            expected: geom.n_cells(),
            actual: envelope.n_cells(),
        });
    }
    let stiff = scatterer.with_field(envelope.stiff_corner(geom));
    let soft = scatterer.with_field(envelope.soft_corner(geom));
    let lower = if j == 0 {
        0.0
    } else {
        omega_j_auto(&stiff, kappa, j, method)?
    };
    let upper = omega_j_auto(&soft, kappa, j + 1, method)?;
    let lo = lower.max(omega_range.0);
    let hi = upper.min(omega_range.1);
    let nonempty = lower < upper && lo <= hi && lo < upper && hi > lower;
    if !nonempty {
        return Err(Error::NotCertified {
            lower,
            upper,
            range_lo: omega_range.0,
            range_hi: omega_range.1,
        });
    }
    Ok(Certificate {
        j,
        lower,
        upper,
        interval: (lo, hi),
    })
}
