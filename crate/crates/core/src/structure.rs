//! One period cell of the slab: geometry, cellwise coefficient fields,
//! homogeneous inclusions and admissibility envelopes.
//!
//! Cells are indexed `(i, k)` with `i` along `x₁` and `k` along `x₃`; flat
//! storage is row-major in `x₃`, `k * nx + i`.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::PERIOD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub z_minus: f64,
    pub z_plus: f64,
    pub nx: usize,
    pub nz: usize,
}

impl CellGeometry {
    pub fn new(z_minus: f64, z_plus: f64, nx: usize, nz: usize) -> Result<Self> {
        if !(z_minus.is_finite() && z_plus.is_finite() && z_minus < z_plus) {
            return Err(Error::InvalidParameter(format!(
                "need z_minus < z_plus, got {z_minus} and {z_plus}"
            )));
        }
        if nx < 4 || nx % 2 != 0 {
            return Err(Error::InvalidParameter(format!("nx must be even and >= 4, got {nx}")));
        }
        if nz < 2 {
            return Err(Error::InvalidParameter(format!("nz must be >= 2, got {nz}")));
        }
        Ok(Self {
            z_minus,
            z_plus,
            nx,
            nz,
        })
    }

    pub fn period(&self) -> f64 {
        PERIOD
    }

    pub fn h1(&self) -> f64 {
        PERIOD / self.nx as f64
    }

    pub fn h3(&self) -> f64 {
        (self.z_plus - self.z_minus) / self.nz as f64
    }

    pub fn thickness(&self) -> f64 {
        self.z_plus - self.z_minus
    }

    pub fn cell_area(&self) -> f64 {
        self.h1() * self.h3()
    }

    pub fn area(&self) -> f64 {
        PERIOD * self.thickness()
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn cell_index(&self, i: usize, k: usize) -> usize {
        k * self.nx + i
    }

    pub fn cell_of(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    pub fn cell_center(&self, i: usize, k: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.h1(),
            self.z_minus + (k as f64 + 0.5) * self.h3(),
        )
    }

    /// Default harmonic truncation, one order below the boundary Nyquist order.
    pub fn default_m_max(&self) -> usize {
        self.nx / 2 - 1
    }
}

/// Cellwise constant `ε` and `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub nx: usize,
    pub nz: usize,
    pub eps: Vec<f64>,
    pub tau: Vec<f64>,
}

impl CoefficientField {
    pub fn uniform(geom: &CellGeometry, eps: f64, tau: f64) -> Self {
        let n = geom.n_cells();
        Self {
            nx: geom.nx,
            nz: geom.nz,
            eps: vec![eps; n],
            tau: vec![tau; n],
        }
    }

    pub fn from_values(geom: &CellGeometry, eps: Vec<f64>, tau: Vec<f64>) -> Result<Self> {
        let n = geom.n_cells();
        for v in [&eps, &tau] {
            if v.len() != n {
                return Err(Error::GridMismatch {
                    expected: n,
                    actual: v.len(),
                });
            }
        }
        Ok(Self {
            nx: geom.nx,
            nz: geom.nz,
            eps,
            tau,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn matches(&self, geom: &CellGeometry) -> Result<()> {
        if self.nx != geom.nx || self.nz != geom.nz {
            return Err(Error::GridMismatch {
                expected: geom.n_cells(),
                actual: self.n_cells(),
            });
        }
        Ok(())
    }

    /// Checks the global positivity bounds `0 < lo ≤ value ≤ hi`.
    pub fn check_bounds(&self, bounds: &GlobalBounds) -> Result<()> {
        let bad = self
            .eps
            .iter()
            .filter(|&&e| !(e >= bounds.eps_min && e <= bounds.eps_max))
            .count()
            + self
                .tau
                .iter()
                .filter(|&&t| !(t >= bounds.tau_min && t <= bounds.tau_max))
                .count();
        if bad > 0 {
            return Err(Error::Inadmissible { count: bad });
        }
        Ok(())
    }

    /// `self + t·(d_eps, d_tau)`.
    pub fn perturb(&self, direction: &Perturbation, t: f64) -> Result<Self> {
        direction.check_len(self.n_cells())?;
        Ok(Self {
            nx: self.nx,
            nz: self.nz,
            eps: self
                .eps
                .iter()
                .zip(&direction.d_eps)
                .map(|(a, d)| a + t * d)
                .collect(),
            tau: self
                .tau
                .iter()
                .zip(&direction.d_tau)
                .map(|(a, d)| a + t * d)
                .collect(),
        })
    }

    /// Cellwise difference `self − other` as a perturbation.
    pub fn difference(&self, other: &CoefficientField) -> Result<Perturbation> {
        if self.n_cells() != other.n_cells() {
            return Err(Error::GridMismatch {
                expected: self.n_cells(),
                actual: other.n_cells(),
            });
        }
        Ok(Perturbation {
            d_eps: self.eps.iter().zip(&other.eps).map(|(a, b)| a - b).collect(),
            d_tau: self.tau.iter().zip(&other.tau).map(|(a, b)| a - b).collect(),
        })
    }
}

/// Global admissibility bounds `ε₋⁰ ≤ ε ≤ ε₊⁰`, `τ₋⁰ ≤ τ ≤ τ₊⁰`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalBounds {
    pub eps_min: f64,
    pub eps_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl GlobalBounds {
    pub fn new(eps_min: f64, eps_max: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        if !(eps_min > 0.0 && eps_min <= eps_max && tau_min > 0.0 && tau_min <= tau_max) {
            return Err(Error::InvalidParameter(
                "global bounds need 0 < min <= max for eps and tau".into(),
            ));
        }
        Ok(Self {
            eps_min,
            eps_max,
            tau_min,
            tau_max,
        })
    }
}

/// A direction `(ε̆, τ̆)` in coefficient space.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub d_eps: Vec<f64>,
    pub d_tau: Vec<f64>,
}

impl Perturbation {
    pub fn zeros(n_cells: usize) -> Self {
        Self {
            d_eps: vec![0.0; n_cells],
            d_tau: vec![0.0; n_cells],
        }
    }

    pub fn eps_only(d_eps: Vec<f64>) -> Self {
        let n = d_eps.len();
        Self {
            d_eps,
            d_tau: vec![0.0; n],
        }
    }

    pub fn tau_only(d_tau: Vec<f64>) -> Self {
        let n = d_tau.len();
        Self {
            d_eps: vec![0.0; n],
            d_tau,
        }
    }

    /// Indicator of a single cell in `ε` or `τ`.
    pub fn cell_indicator(n_cells: usize, cell: usize, in_tau: bool) -> Self {
        let mut p = Self::zeros(n_cells);
        if in_tau {
            p.d_tau[cell] = 1.0;
        } else {
            p.d_eps[cell] = 1.0;
        }
        p
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            d_eps: self.d_eps.iter().map(|v| v * t).collect(),
            d_tau: self.d_tau.iter().map(|v| v * t).collect(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.d_eps.len()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        for v in [&self.d_eps, &self.d_tau] {
            if v.len() != n {
                return Err(Error::GridMismatch {
                    expected: n,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Midpoint-rule `( ∫_Ω |ε̆|ᵖ + |τ̆|ᵖ )^{1/p}`.
pub fn lp_norm(geom: &CellGeometry, direction: &Perturbation, p: f64) -> Result<f64> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidParameter(format!("L^p exponent must be finite and >= 1, got {p}")));
    }
    direction.check_len(geom.n_cells())?;
    let s: f64 = direction
        .d_eps
        .iter()
        .chain(&direction.d_tau)
        .map(|v| v.abs().powf(p))
        .sum();
    Ok((s * geom.cell_area()).powf(1.0 / p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk { center: (f64, f64), radius: f64 },
    Rect { lo: (f64, f64), hi: (f64, f64) },
}

impl Shape {
    /// Cell-center membership test.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        match *self {
            Shape::Disk { center, radius } => {
                let dx = p.0 - center.0;
                let dz = p.1 - center.1;
                dx * dx + dz * dz < radius * radius
            }
            Shape::Rect { lo, hi } => p.0 >= lo.0 && p.0 < hi.0 && p.1 >= lo.1 && p.1 < hi.1,
        }
    }

    fn bounding_box(&self) -> ((f64, f64), (f64, f64)) {
        match *self {
            Shape::Disk { center, radius } => (
                (center.0 - radius, center.1 - radius),
                (center.0 + radius, center.1 + radius),
            ),
            Shape::Rect { lo, hi } => (lo, hi),
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Shape::Disk { radius, .. } => radius > 0.0 && radius.is_finite(),
            Shape::Rect { lo, hi } => lo.0 < hi.0 && lo.1 < hi.1,
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        match (*self, *other) {
            (Shape::Disk { center: c1, radius: r1 }, Shape::Disk { center: c2, radius: r2 }) => {
                let d2 = (c1.0 - c2.0).powi(2) + (c1.1 - c2.1).powi(2);
                d2 < (r1 + r2).powi(2)
            }
            (Shape::Rect { lo: a, hi: b }, Shape::Rect { lo: c, hi: d }) => {
                a.0 < d.0 && c.0 < b.0 && a.1 < d.1 && c.1 < b.1
            }
            (Shape::Disk { center, radius }, Shape::Rect { lo, hi })
            | (Shape::Rect { lo, hi }, Shape::Disk { center, radius }) => {
                let qx = center.0.clamp(lo.0, hi.0);
                let qz = center.1.clamp(lo.1, hi.1);
                (center.0 - qx).powi(2) + (center.1 - qz).powi(2) < radius * radius
            }
        }
    }

    /// Exact area of the intersection with an axis-aligned rectangle.
    pub fn overlap_area(&self, lo: (f64, f64), hi: (f64, f64)) -> f64 {
        match *self {
            Shape::Rect { lo: a, hi: b } => {
                let w = (b.0.min(hi.0) - a.0.max(lo.0)).max(0.0);
                let h = (b.1.min(hi.1) - a.1.max(lo.1)).max(0.0);
                w * h
            }
            Shape::Disk { center, radius } => disk_rect_area(
                radius,
                lo.0 - center.0,
                hi.0 - center.0,
                lo.1 - center.1,
                hi.1 - center.1,
            ),
        }
    }
}

/// Area of `{x² + y² < r²} ∩ [a,b]×[c,d]`.
///
/// With `x = r sin θ` the chord half-length is `r cos θ`, and between the angles
/// where the chord meets `y = c` or `y = d` the integrand is `r cos θ (α + β r cos θ)`,
/// which integrates in closed form.
fn disk_rect_area(r: f64, a: f64, b: f64, c: f64, d: f64) -> f64 {
    let xa = a.max(-r);
    let xb = b.min(r);
    if xa >= xb || c >= d {
        return 0.0;
    }
    let ta = (xa / r).clamp(-1.0, 1.0).asin();
    let tb = (xb / r).clamp(-1.0, 1.0).asin();
    let mut breaks = vec![ta, tb];
    for y in [c, d] {
        if y.abs() < r {
            let t = (y.abs() / r).acos();
            for s in [-t, t] {
                if s > ta && s < tb {
                    breaks.push(s);
                }
            }
        }
    }
    breaks.sort_by(|p, q| p.total_cmp(q));
    let mut area = 0.0;
    for w in breaks.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let s = r * (0.5 * (t0 + t1)).cos();
        let upper_is_chord = s < d;
        let lower_is_chord = -s > c;
        let upper = if upper_is_chord { s } else { d };
        let lower = if lower_is_chord { -s } else { c };
        if upper <= lower {
            continue;
        }
        let alpha = if upper_is_chord { 0.0 } else { d } - if lower_is_chord { 0.0 } else { c };
        let beta = upper_is_chord as u8 as f64 + lower_is_chord as u8 as f64;
        let int_cos = t1.sin() - t0.sin();
        let int_cos2 = 0.5 * (t1 - t0) + 0.25 * ((2.0 * t1).sin() - (2.0 * t0).sin());
        area += alpha * r * int_cos + beta * r * r * int_cos2;
    }
    area
}

/// A homogeneous component `D_j` with constants `ε_j`, `τ_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub id: i64,
    pub shape: Shape,
    pub eps: f64,
    pub tau: f64,
}

/// Background coefficients outside all inclusions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub eps: f64,
    pub tau: f64,
}

/// Validates containment in the (closed) period cell and pairwise disjointness.
pub fn validate_inclusions(geom: &CellGeometry, inclusions: &[Inclusion]) -> Result<()> {
    let tol = 1e-12 * (1.0 + geom.thickness());
    for inc in inclusions {
        if !inc.shape.is_valid() {
            return Err(Error::InvalidParameter(format!("inclusion {} has a degenerate shape", inc.id)));
        }
        if !(inc.eps > 0.0 && inc.tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inclusion {} needs positive eps and tau",
                inc.id
            )));
        }
        let (lo, hi) = inc.shape.bounding_box();
        if lo.0 < -tol || hi.0 > PERIOD + tol || lo.1 < geom.z_minus - tol || hi.1 > geom.z_plus + tol {
            return Err(Error::InclusionOutsideCell(inc.id));
        }
    }
    for (a, ia) in inclusions.iter().enumerate() {
        for ib in &inclusions[a + 1..] {
            if ia.shape.overlaps(&ib.shape) {
                return Err(Error::OverlappingInclusions(ia.id, ib.id));
            }
        }
    }
    Ok(())
}

/// Each cell takes the inclusion containing its center, else the background.
pub fn rasterize(
    geom: &CellGeometry,
    background: Background,
    inclusions: &[Inclusion],
) -> Result<CoefficientField> {
    validate_inclusions(geom, inclusions)?;
    let mut field = CoefficientField::uniform(geom, background.eps, background.tau);
    for k in 0..geom.nz {
        for i in 0..geom.nx {
            let p = geom.cell_center(i, k);
            if let Some(inc) = inclusions.iter().find(|inc| inc.shape.contains(p)) {
                let c = geom.cell_index(i, k);
                field.eps[c] = inc.eps;
                field.tau[c] = inc.tau;
            }
        }
    }
    Ok(field)
}

/// Area-weighted rasterization: each cell mixes background and inclusion values by
/// exact covered area fraction (arithmetic mean for both `ε` and `τ`).
///
/// The coefficients then vary smoothly with inclusion geometry, which shape
/// derivatives need.
pub fn rasterize_fractional(
    geom: &CellGeometry,
    background: Background,
    inclusions: &[Inclusion],
) -> Result<CoefficientField> {
    validate_inclusions(geom, inclusions)?;
    let mut field = CoefficientField::uniform(geom, background.eps, background.tau);
    let area = geom.cell_area();
    let (h1, h3) = (geom.h1(), geom.h3());
    for k in 0..geom.nz {
        for i in 0..geom.nx {
            let lo = (i as f64 * h1, geom.z_minus + k as f64 * h3);
            let hi = (lo.0 + h1, lo.1 + h3);
            let c = geom.cell_index(i, k);
            for inc in inclusions {
                let f = (inc.shape.overlap_area(lo, hi) / area).clamp(0.0, 1.0);
                if f > 0.0 {
                    field.eps[c] += f * (inc.eps - background.eps);
                    field.tau[c] += f * (inc.tau - background.tau);
                }
            }
        }
    }
    Ok(field)
}

/// Cells whose centers lie in the inclusion.
pub fn inclusion_mask(geom: &CellGeometry, inclusion: &Inclusion) -> Vec<bool> {
    (0..geom.n_cells())
        .map(|c| {
            let (i, k) = geom.cell_of(c);
            inclusion.shape.contains(geom.cell_center(i, k))
        })
        .collect()
}

/// Cellwise bounding functions `ε₋ ≤ ε ≤ ε₊`, `τ₋ ≤ τ ≤ τ₊`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleEnvelope {
    pub eps_lo: Vec<f64>,
    pub eps_hi: Vec<f64>,
    pub tau_lo: Vec<f64>,
    pub tau_hi: Vec<f64>,
}

impl AdmissibleEnvelope {
    pub fn new(eps_lo: Vec<f64>, eps_hi: Vec<f64>, tau_lo: Vec<f64>, tau_hi: Vec<f64>) -> Result<Self> {
        let n = eps_lo.len();
        for v in [&eps_hi, &tau_lo, &tau_hi] {
            if v.len() != n {
                return Err(Error::GridMismatch {
                    expected: n,
                    actual: v.len(),
                });
            }
        }
        let ordered = eps_lo.iter().zip(&eps_hi).all(|(l, h)| *l > 0.0 && l <= h)
            && tau_lo.iter().zip(&tau_hi).all(|(l, h)| *l > 0.0 && l <= h);
        if !ordered {
            return Err(Error::InvalidParameter(
                "envelope needs 0 < lo <= hi in every cell".into(),
            ));
        }
        Ok(Self {
            eps_lo,
            eps_hi,
            tau_lo,
            tau_hi,
        })
    }

    pub fn uniform(geom: &CellGeometry, eps: (f64, f64), tau: (f64, f64)) -> Result<Self> {
        let n = geom.n_cells();
        Self::new(vec![eps.0; n], vec![eps.1; n], vec![tau.0; n], vec![tau.1; n])
    }

    /// The envelope `lo = hi = field`.
    pub fn degenerate(field: &CoefficientField) -> Self {
        Self {
            eps_lo: field.eps.clone(),
            eps_hi: field.eps.clone(),
            tau_lo: field.tau.clone(),
            tau_hi: field.tau.clone(),
        }
    }

    /// Envelope `field·(1 ∓ rel)` in both coefficients, within a design mask only.
    pub fn relative_band(field: &CoefficientField, mask: &[bool], rel: f64) -> Result<Self> {
        let band = |v: &[f64], sign: f64| -> Vec<f64> {
            v.iter()
                .zip(mask)
                .map(|(x, &m)| if m { x * (1.0 + sign * rel) } else { *x })
                .collect()
        };
        Self::new(
            band(&field.eps, -1.0),
            band(&field.eps, 1.0),
            band(&field.tau, -1.0),
            band(&field.tau, 1.0),
        )
    }

    pub fn n_cells(&self) -> usize {
        self.eps_lo.len()
    }

    /// `(ε₋, τ₊)`, the coefficient pair with the largest eigenfrequencies.
    pub fn stiff_corner(&self, geom: &CellGeometry) -> CoefficientField {
        CoefficientField {
            nx: geom.nx,
            nz: geom.nz,
            eps: self.eps_lo.clone(),
            tau: self.tau_hi.clone(),
        }
    }

    /// `(ε₊, τ₋)`, the coefficient pair with the smallest eigenfrequencies.
    pub fn soft_corner(&self, geom: &CellGeometry) -> CoefficientField {
        CoefficientField {
            nx: geom.nx,
            nz: geom.nz,
            eps: self.eps_hi.clone(),
            tau: self.tau_lo.clone(),
        }
    }

    /// Cellwise clamp into the envelope.
    pub fn project(&self, field: &CoefficientField) -> CoefficientField {
        let clamp = |v: &[f64], lo: &[f64], hi: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (l, h))| x.clamp(*l, *h))
                .collect()
        };
        CoefficientField {
            nx: field.nx,
            nz: field.nz,
            eps: clamp(&field.eps, &self.eps_lo, &self.eps_hi),
            tau: clamp(&field.tau, &self.tau_lo, &self.tau_hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coefficient {
    Eps,
    Tau,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub cell: (usize, usize),
    pub coefficient: Coefficient,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub violations: Vec<Violation>,
}

/// True iff every cell lies in its envelope interval (boundaries included).
pub fn check_admissible(
    field: &CoefficientField,
    env: &AdmissibleEnvelope,
) -> Result<AdmissibilityReport> {
    if field.n_cells() != env.n_cells() {
        return Err(Error::GridMismatch {
            expected: env.n_cells(),
            actual: field.n_cells(),
        });
    }
    let mut violations = Vec::new();
    for c in 0..field.n_cells() {
        let cell = (c % field.nx, c / field.nx);
        let checks = [
            (Coefficient::Eps, field.eps[c], env.eps_lo[c], env.eps_hi[c]),
            (Coefficient::Tau, field.tau[c], env.tau_lo[c], env.tau_hi[c]),
        ];
        for (coefficient, value, lo, hi) in checks {
            if !(value >= lo && value <= hi) {
                violations.push(Violation {
                    cell,
                    coefficient,
                    value,
                    lo,
                    hi,
                });
            }
        }
    }
    Ok(AdmissibilityReport {
        admissible: violations.is_empty(),
        violations,
    })
}

/// Volume source `∇·ξ + h` with cellwise constant `ξ` (2-vector) and `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerm {
    pub xi: Vec<[Complex64; 2]>,
    pub h: Vec<Complex64>,
}

impl SourceTerm {
    pub fn zeros(n_cells: usize) -> Self {
        Self {
            xi: vec![[Complex64::default(); 2]; n_cells],
            h: vec![Complex64::default(); n_cells],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().all(|v| *v == Complex64::default())
            && self.xi.iter().all(|v| v[0] == Complex64::default() && v[1] == Complex64::default())
    }
}

/// Formats a field in the raster CSV format.
pub fn raster_to_csv(field: &CoefficientField, which: Coefficient) -> String {
    let (name, values) = match which {
        Coefficient::Eps => ("eps", &field.eps),
        Coefficient::Tau => ("tau", &field.tau),
    };
    let mut out = format!("# slabscat-raster nx={} nz={} field={}\n", field.nx, field.nz, name);
    for k in 0..field.nz {
        let row: Vec<String> = values[k * field.nx..(k + 1) * field.nx]
            .iter()
            .map(|v| crate::io::fmt_f64(*v))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Parses one raster CSV block, returning `(nx, nz, field kind, values)`.
pub fn raster_from_csv(text: &str) -> Result<(usize, usize, Coefficient, Vec<f64>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty raster file".into()))?;
    let rest = header
        .trim()
        .strip_prefix("# slabscat-raster")
        .ok_or_else(|| Error::Parse(format!("bad raster header: {header}")))?;
    let (mut nx, mut nz, mut kind) = (None, None, None);
    for tok in rest.split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header token: {tok}")))?;
        match key {
            "nx" => nx = val.parse::<usize>().ok(),
            "nz" => nz = val.parse::<usize>().ok(),
            "field" => {
                kind = match val {
                    "eps" => Some(Coefficient::Eps),
                    "tau" => Some(Coefficient::Tau),
                    _ => None,
                }
            }
            _ => return Err(Error::Parse(format!("unknown header key: {key}"))),
        }
    }
    let (nx, nz, kind) = match (nx, nz, kind) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Parse(format!("incomplete raster header: {header}"))),
    };
    let mut values = Vec::with_capacity(nx * nz);
    let mut rows = 0;
    for line in lines {
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parse(format!("raster row {rows}: {e}")))?;
        if row.len() != nx {
            return Err(Error::Parse(format!(
                "raster row {rows} has {} values, expected {nx}",
                row.len()
            )));
        }
        values.extend(row);
        rows += 1;
    }
    if rows != nz {
        return Err(Error::Parse(format!("raster has {rows} rows, expected {nz}")));
    }
    Ok((nx, nz, kind, values))
}

/// Reads the `ε` and `τ` rasters for a geometry.
pub fn read_raster_pair(geom: &CellGeometry, eps_path: &Path, tau_path: &Path) -> Result<CoefficientField> {
    let mut eps = None;
    let mut tau = None;
    for path in [eps_path, tau_path] {
        let (nx, nz, kind, values) = raster_from_csv(&std::fs::read_to_string(path)?)?;
        if nx != geom.nx || nz != geom.nz {
            return Err(Error::GridMismatch {
                expected: geom.n_cells(),
                actual: nx * nz,
            });
        }
        match kind {
            Coefficient::Eps => eps = Some(values),
            Coefficient::Tau => tau = Some(values),
        }
    }
    match (eps, tau) {
        (Some(e), Some(t)) => CoefficientField::from_values(geom, e, t),
        _ => Err(Error::Parse("raster pair must contain one eps and one tau field".into())),
    }
}
