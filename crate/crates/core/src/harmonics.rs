//! Diffraction-order bookkeeping and the Fourier Dirichlet-to-Neumann maps.
//!
//! Fields are `κ`-pseudoperiodic in `x₁` with period `2π`, so their traces on the
//! artificial boundaries `Γ₋ = {x₃ = z₋}` and `Γ₊ = {x₃ = z₊}` expand as
//!
//! ```text
//! f(x₁) = Σ_m f̂_m e^{i(m+κ)x₁}
//! ```
//!
//! Each order carries the transverse exponent `η_m` with
//! `η_m² + (m+κ)² = ω²ε₀/τ₀`. The outgoing Dirichlet-to-Neumann operator is the
//! multiplier `(T̂f)_m = −iη_m f̂_m`; an outgoing field satisfies `∂ₙu + Tu = 0`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the period in `x₁`.
pub const PERIOD: f64 = 2.0 * PI;

/// Relative tolerance on `η_m²` below which an order is treated as a cutoff (linear) order.
pub const CUTOFF_TOLERANCE: f64 = 1e-12;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Frequency, Bloch wavenumber, exterior constants and harmonic truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochContext {
    pub omega: f64,
    pub kappa: f64,
    pub eps0: f64,
    pub tau0: f64,
    pub m_max: usize,
}

impl BlochContext {
    /// Builds a context, reducing `kappa` into the Brillouin zone `[-1/2, 1/2)`.
    pub fn new(omega: f64, kappa: f64, eps0: f64, tau0: f64, m_max: usize) -> Result<Self> {
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::InvalidParameter(format!("omega must be positive, got {omega}")));
        }
        if !(eps0.is_finite() && eps0 > 0.0) {
            return Err(Error::InvalidParameter(format!("eps0 must be positive, got {eps0}")));
        }
        if !(tau0.is_finite() && tau0 > 0.0) {
            return Err(Error::InvalidParameter(format!("tau0 must be positive, got {tau0}")));
        }
        if !kappa.is_finite() {
            return Err(Error::InvalidParameter(format!("kappa must be finite, got {kappa}")));
        }
        if m_max == 0 {
            return Err(Error::InvalidParameter("m_max must be at least 1".into()));
        }
        Ok(Self {
            omega,
            kappa: reduce_kappa(kappa),
            eps0,
            tau0,
            m_max,
        })
    }

    /// `ω²ε₀/τ₀`, the squared exterior wavenumber.
    pub fn k0_squared(&self) -> f64 {
        self.omega * self.omega * self.eps0 / self.tau0
    }

    /// Same context at another frequency.
    pub fn with_omega(&self, omega: f64) -> Self {
        Self { omega, ..*self }
    }

    /// Context at Bloch wavenumber `−κ`, used by adjoint problems.
    ///
    /// The wavenumber is negated without zone reduction so that order `m` at `κ`
    /// corresponds to order `−m` here; `κ = −1/2` maps to `+1/2`.
    pub fn negated(&self) -> Self {
        Self {
            kappa: -self.kappa,
            ..*self
        }
    }

    pub fn n_orders(&self) -> usize {
        2 * self.m_max + 1
    }

    /// Orders `−m_max..=m_max` in storage order.
    pub fn orders(&self) -> impl Iterator<Item = i64> {
        let m = self.m_max as i64;
        -m..=m
    }

    /// Storage index of order `m`, if it is inside the truncation.
    pub fn index(&self, m: i64) -> Option<usize> {
        let shifted = m + self.m_max as i64;
        if shifted >= 0 && (shifted as usize) < self.n_orders() {
            Some(shifted as usize)
        } else {
            None
        }
    }

    pub fn order_at(&self, index: usize) -> i64 {
        index as i64 - self.m_max as i64
    }

    pub fn harmonics(&self) -> Vec<Harmonic> {
        classify_orders(self)
    }
}

/// Reduces a Bloch wavenumber into `[-1/2, 1/2)` by an integer shift.
pub fn reduce_kappa(kappa: f64) -> f64 {
    let r = kappa - (kappa + 0.5).floor();
    // floor can round r up to exactly 0.5 for tiny negative inputs
    if r >= 0.5 {
        r - 1.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HarmonicClass {
    Propagating,
    Linear,
    Evanescent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub m: i64,
    pub eta: Complex64,
    pub class: HarmonicClass,
}

impl Harmonic {
    pub fn is_propagating(&self) -> bool {
        self.class == HarmonicClass::Propagating
    }

    /// Multiplier of the requested DtN variant on this order.
    pub fn dtn_multiplier(&self, variant: DtnVariant) -> Complex64 {
        match variant {
            DtnVariant::Full => -I * self.eta,
            DtnVariant::RealPart => match self.class {
                HarmonicClass::Evanescent => -I * self.eta,
                _ => Complex64::new(0.0, 0.0),
            },
            DtnVariant::ImagPart => match self.class {
                HarmonicClass::Propagating => -self.eta,
                _ => Complex64::new(0.0, 0.0),
            },
            DtnVariant::Adjoint => I * self.eta.conj(),
        }
    }
}

/// `η_m` with the branch `η_m > 0` (propagating) or `−iη_m > 0` (evanescent).
pub fn eta_of(ctx: &BlochContext, m: i64) -> Harmonic {
    let k0 = ctx.k0_squared();
    let q = m as f64 + ctx.kappa;
    let d = k0 - q * q;
    let (eta, class) = if d.abs() <= CUTOFF_TOLERANCE * k0 {
        (Complex64::new(0.0, 0.0), HarmonicClass::Linear)
    } else if d > 0.0 {
        (Complex64::new(d.sqrt(), 0.0), HarmonicClass::Propagating)
    } else {
        (Complex64::new(0.0, (-d).sqrt()), HarmonicClass::Evanescent)
    };
    Harmonic { m, eta, class }
}

/// All harmonics `|m| ≤ m_max`, in storage order.
pub fn classify_orders(ctx: &BlochContext) -> Vec<Harmonic> {
    ctx.orders().map(|m| eta_of(ctx, m)).collect()
}

/// Orders in the given class.
pub fn orders_in(harmonics: &[Harmonic], class: HarmonicClass) -> Vec<i64> {
    harmonics
        .iter()
        .filter(|h| h.class == class)
        .map(|h| h.m)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `Γ₋`, the boundary `x₃ = z₋`.
    Left,
    /// `Γ₊`, the boundary `x₃ = z₊`.
    Right,
}

/// Truncated Fourier coefficients of a boundary trace, index `m + m_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceVector {
    pub side: Side,
    pub coeffs: Vec<Complex64>,
}

impl TraceVector {
    pub fn zeros(ctx: &BlochContext, side: Side) -> Self {
        Self {
            side,
            coeffs: vec![Complex64::new(0.0, 0.0); ctx.n_orders()],
        }
    }

    /// Coefficient of order `m`, zero outside the truncation.
    pub fn get(&self, ctx: &BlochContext, m: i64) -> Complex64 {
        ctx.index(m)
            .and_then(|k| self.coeffs.get(k).copied())
            .unwrap_or_default()
    }

    /// Discrete Fourier coefficients `f̂_m = (1/n) Σ_j f_j e^{−i(m+κ)x_j}` of
    /// nodal values sampled at `x_j = 2πj/n`.
    pub fn from_nodal(ctx: &BlochContext, side: Side, values: &[Complex64]) -> Self {
        let n = values.len();
        let h = PERIOD / n as f64;
        let coeffs = ctx
            .orders()
            .map(|m| {
                let q = m as f64 + ctx.kappa;
                let sum: Complex64 = values
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| v * Complex64::from_polar(1.0, -q * h * j as f64))
                    .sum();
                sum / n as f64
            })
            .collect();
        Self { side, coeffs }
    }

    /// Nodal samples of `Σ_m f̂_m e^{i(m+κ)x_j}` at `x_j = 2πj/n`.
    pub fn synthesize(&self, ctx: &BlochContext, n: usize) -> Vec<Complex64> {
        let h = PERIOD / n as f64;
        (0..n)
            .map(|j| {
                ctx.orders()
                    .zip(&self.coeffs)
                    .map(|(m, &c)| c * Complex64::from_polar(1.0, (m as f64 + ctx.kappa) * h * j as f64))
                    .sum()
            })
            .collect()
    }

    /// Plain `ℓ²` pairing `Σ_m f̂_m conj(ĝ_m)`.
    pub fn inner(&self, other: &TraceVector) -> Complex64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b.conj())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DtnVariant {
    /// `T`: multiplier `−iη_m`.
    Full,
    /// `T_r`: `−iη_m` on evanescent orders only (nonnegative).
    RealPart,
    /// `T_i`: `−η_m` on propagating orders only (nonpositive).
    ImagPart,
    /// `T*`: multiplier `i conj(η_m)`.
    Adjoint,
}

/// Applies a DtN variant to a truncated trace.
pub fn apply_dtn(ctx: &BlochContext, f: &TraceVector, variant: DtnVariant) -> Result<TraceVector> {
    if f.coeffs.len() != ctx.n_orders() {
        return Err(Error::TruncationMismatch {
            expected: ctx.n_orders(),
            actual: f.coeffs.len(),
        });
    }
    let coeffs = classify_orders(ctx)
        .iter()
        .zip(&f.coeffs)
        .map(|(h, &c)| h.dtn_multiplier(variant) * c)
        .collect();
    Ok(TraceVector {
        side: f.side,
        coeffs,
    })
}

/// `ℓ²` norm of `∂ₙu + Tu` over the truncated orders.
pub fn outgoing_residual(
    ctx: &BlochContext,
    trace: &TraceVector,
    normal_deriv: &TraceVector,
) -> Result<f64> {
    if trace.side != normal_deriv.side {
        return Err(Error::SideMismatch);
    }
    if normal_deriv.coeffs.len() != ctx.n_orders() {
        return Err(Error::TruncationMismatch {
            expected: ctx.n_orders(),
            actual: normal_deriv.coeffs.len(),
        });
    }
    let tu = apply_dtn(ctx, trace, DtnVariant::Full)?;
    Ok(tu
        .coeffs
        .iter()
        .zip(&normal_deriv.coeffs)
        .map(|(a, b)| (a + b).norm_sqr())
        .sum::<f64>()
        .sqrt())
}
