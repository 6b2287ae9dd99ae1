//! Q1 finite elements on the structured pseudoperiodic mesh.
//!
//! The discrete problem is
//!
//! ```text
//! ∫_Ω ( τ ∇u·∇v̄ − ω² ε u v̄ ) + τ₀ ∫_Γ (T u) v̄ = f(v)
//! ```
//!
//! Nodes on `x₁ = 2π` are identified with `x₁ = 0` through the Bloch factor
//! `e^{2πiκ}`; element matrices stay real and the phase enters through the
//! scatter/gather of the wrapped column of elements. Boundary integrals use the
//! lumped rule with weight `h₁ = 2π/nx`, so the DtN block is a DFT conjugation.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::harmonics::{classify_orders, BlochContext, DtnVariant, Harmonic, Side, PERIOD};
use crate::linalg::{BlockTridiag, CsrMatrix};
use crate::structure::{CellGeometry, CoefficientField, SourceTerm};

type C = Complex64;

/// Element matrix in counterclockwise node order
/// `(x₁, x₃), (x₁+h₁, x₃), (x₁+h₁, x₃+h₃), (x₁, x₃+h₃)`.
pub type ElementMatrix = [[f64; 4]; 4];

/// Structured quadrilateral mesh with Bloch identification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    pub geom: CellGeometry,
    pub kappa: f64,
    /// `e^{2πiκ}`.
    pub phase: C,
}

impl Mesh {
    pub fn new(geom: CellGeometry, kappa: f64) -> Self {
        Self {
            geom,
            kappa,
            phase: C::from_polar(1.0, PERIOD * kappa),
        }
    }

    pub fn nx(&self) -> usize {
        self.geom.nx
    }

    pub fn nz(&self) -> usize {
        self.geom.nz
    }

    /// Independent nodes: `nx` per layer, `nz + 1` layers.
    pub fn n_dofs(&self) -> usize {
        self.geom.nx * (self.geom.nz + 1)
    }

    /// Degree of freedom of node `(i, k)`; `i = nx` wraps onto `i = 0`.
    pub fn dof(&self, i: usize, k: usize) -> usize {
        k * self.geom.nx + (i % self.geom.nx)
    }

    pub fn node_position(&self, i: usize, k: usize) -> (f64, f64) {
        (
            i as f64 * self.geom.h1(),
            self.geom.z_minus + k as f64 * self.geom.h3(),
        )
    }

    /// Global dofs of element `(ie, ke)` with the factor mapping the dof value to
    /// the local nodal value.
    pub fn element_dofs(&self, ie: usize, ke: usize) -> [(usize, C); 4] {
        let one = C::new(1.0, 0.0);
        let wrap = if ie + 1 == self.geom.nx { self.phase } else { one };
        [
            (self.dof(ie, ke), one),
            (self.dof(ie + 1, ke), wrap),
            (self.dof(ie + 1, ke + 1), wrap),
            (self.dof(ie, ke + 1), one),
        ]
    }

    /// Local nodal values of a global vector on element `(ie, ke)`.
    pub fn gather(&self, u: &[C], ie: usize, ke: usize) -> [C; 4] {
        self.element_dofs(ie, ke).map(|(d, p)| p * u[d])
    }

    /// Dofs of the boundary layer on `Γ₋` or `Γ₊`.
    pub fn boundary_dofs(&self, side: Side) -> std::ops::Range<usize> {
        let k = match side {
            Side::Left => 0,
            Side::Right => self.geom.nz,
        };
        k * self.geom.nx..(k + 1) * self.geom.nx
    }

    pub fn boundary_values<'a>(&self, u: &'a [C], side: Side) -> &'a [C] {
        &u[self.boundary_dofs(side)]
    }

    /// Locates the element containing `(x₁, x₃)` and the local coordinates in `[0,1]²`.
    pub fn locate(&self, x1: f64, x3: f64) -> (usize, usize, f64, f64) {
        let g = &self.geom;
        let s = (x1 / g.h1()).clamp(0.0, g.nx as f64 - 1e-12);
        let t = ((x3 - g.z_minus) / g.h3()).clamp(0.0, g.nz as f64 - 1e-12);
        let ie = (s.floor() as usize).min(g.nx - 1);
        let ke = (t.floor() as usize).min(g.nz - 1);
        (ie, ke, s - ie as f64, t - ke as f64)
    }

    /// Bilinear interpolation of `u` and its gradient at `(x₁, x₃)`, `0 ≤ x₁ < 2π`.
    pub fn evaluate(&self, u: &[C], x1: f64, x3: f64) -> (C, [C; 2]) {
        let (ie, ke, xi, zeta) = self.locate(x1, x3);
        let loc = self.gather(u, ie, ke);
        let value = loc[0] * ((1.0 - xi) * (1.0 - zeta))
            + loc[1] * (xi * (1.0 - zeta))
            + loc[2] * (xi * zeta)
            + loc[3] * ((1.0 - xi) * zeta);
        let d1 = ((loc[1] - loc[0]) * (1.0 - zeta) + (loc[2] - loc[3]) * zeta) / self.geom.h1();
        let d3 = ((loc[3] - loc[0]) * (1.0 - xi) + (loc[2] - loc[1]) * xi) / self.geom.h3();
        (value, [d1, d3])
    }
}

pub fn build_mesh(geom: CellGeometry, kappa: f64) -> Mesh {
    Mesh::new(geom, kappa)
}

/// Exact Q1 stiffness `∫ τ ∇φ_a·∇φ_b` and mass `∫ ε φ_a φ_b` on an `h1 × h3` rectangle.
pub fn element_matrices(h1: f64, h3: f64, eps: f64, tau: f64) -> (ElementMatrix, ElementMatrix) {
    const KX: ElementMatrix = [
        [2.0, -2.0, -1.0, 1.0],
        [-2.0, 2.0, 1.0, -1.0],
        [-1.0, 1.0, 2.0, -2.0],
        [1.0, -1.0, -2.0, 2.0],
    ];
    const KZ: ElementMatrix = [
        [2.0, 1.0, -1.0, -2.0],
        [1.0, 2.0, -2.0, -1.0],
        [-1.0, -2.0, 2.0, 1.0],
        [-2.0, -1.0, 1.0, 2.0],
    ];
    const M: ElementMatrix = [
        [4.0, 2.0, 1.0, 2.0],
        [2.0, 4.0, 2.0, 1.0],
        [1.0, 2.0, 4.0, 2.0],
        [2.0, 1.0, 2.0, 4.0],
    ];
    let mut k = [[0.0; 4]; 4];
    let mut m = [[0.0; 4]; 4];
    let (sx, sz, sm) = (tau * h3 / (6.0 * h1), tau * h1 / (6.0 * h3), eps * h1 * h3 / 36.0);
    for a in 0..4 {
        for b in 0..4 {
            k[a][b] = sx * KX[a][b] + sz * KZ[a][b];
            m[a][b] = sm * M[a][b];
        }
    }
    (k, m)
}

/// `wᵀ E u` for local nodal vectors (no conjugation).
pub fn element_pairing(e: &ElementMatrix, w: &[C; 4], u: &[C; 4]) -> C {
    let mut s = C::default();
    for a in 0..4 {
        let mut row = C::default();
        for b in 0..4 {
            row += u[b] * e[a][b];
        }
        s += w[a] * row;
    }
    s
}

/// Assembled pieces of the discrete scattering operator.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub mesh: Mesh,
    pub ctx: BlochContext,
    pub harmonics: Vec<Harmonic>,
    /// `∫ τ ∇u·∇v̄`.
    pub stiffness: CsrMatrix,
    /// `∫ ε u v̄`, Hermitian positive definite.
    pub mass: CsrMatrix,
    /// Unit-coefficient stiffness plus mass, the discrete `H¹` Gram matrix.
    pub h1_gram: CsrMatrix,
}

impl DiscreteSystem {
    pub fn nx(&self) -> usize {
        self.mesh.nx()
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    /// Dense boundary block of `τ₀ ∫_Γ (T u) v̄` for the requested variant,
    /// identical on `Γ₋` and `Γ₊`.
    pub fn dtn_block(&self, variant: DtnVariant) -> DMatrix<C> {
        dtn_block(&self.ctx, &self.harmonics, self.nx(), variant)
    }

    fn with_boundary_blocks(&self, mut m: BlockTridiag, variant: DtnVariant) -> BlockTridiag {
        let d = self.dtn_block(variant);
        let last = m.n_blocks() - 1;
        m.diag[0] += &d;
        m.diag[last] += &d;
        m
    }

    /// `K − ω²M + τ₀ T`, the full system matrix.
    pub fn system_matrix(&self) -> BlockTridiag {
        let w2 = self.ctx.omega * self.ctx.omega;
        let mut m = BlockTridiag::from_csr(&self.stiffness, self.nx(), C::new(1.0, 0.0));
        m.add_csr(&self.mass, C::new(-w2, 0.0));
        self.with_boundary_blocks(m, DtnVariant::Full)
    }

    /// `A_r = K + τ₀ T_r`, the Hermitian part entering the min-max eigenvalues.
    pub fn hermitian_part(&self) -> BlockTridiag {
        let m = BlockTridiag::from_csr(&self.stiffness, self.nx(), C::new(1.0, 0.0));
        self.with_boundary_blocks(m, DtnVariant::RealPart)
    }

    /// `A_r − σ B`.
    pub fn shifted_pencil(&self, sigma: f64) -> BlockTridiag {
        let mut m = self.hermitian_part();
        m.add_csr(&self.mass, C::new(-sigma, 0.0));
        m
    }

    /// Flux block `τ₀ T_i` on both boundaries (nonpositive).
    pub fn flux_part(&self) -> BlockTridiag {
        let m = BlockTridiag::zeros(self.mesh.nz() + 1, self.nx());
        self.with_boundary_blocks(m, DtnVariant::ImagPart)
    }

    /// Discrete `H¹` norm with unit coefficients.
    pub fn h1_norm(&self, u: &[C]) -> f64 {
        self.h1_gram.quadratic_form(u).re.max(0.0).sqrt()
    }
}

/// `τ₀ h₁ Σ_m μ_m φ_m φ_mᴴ` with `φ_m[j] = e^{i(m+κ)x_j}/√nx`.
pub fn dtn_block(ctx: &BlochContext, harmonics: &[Harmonic], nx: usize, variant: DtnVariant) -> DMatrix<C> {
    let h = PERIOD / nx as f64;
    let mut d = DMatrix::zeros(nx, nx);
    for hm in harmonics {
        let mu = hm.dtn_multiplier(variant);
        if mu == C::default() {
            continue;
        }
        let q = hm.m as f64 + ctx.kappa;
        let scale = mu * (ctx.tau0 * h / nx as f64);
        for i in 0..nx {
            for j in 0..nx {
                d[(i, j)] += scale * C::from_polar(1.0, q * h * (i as f64 - j as f64));
            }
        }
    }
    d
}

fn scatter_element(triplets: &mut Vec<(usize, usize, C)>, dofs: &[(usize, C); 4], e: &ElementMatrix) {
    for a in 0..4 {
        for b in 0..4 {
            if e[a][b] != 0.0 {
                let v = dofs[a].1.conj() * e[a][b] * dofs[b].1;
                triplets.push((dofs[a].0, dofs[b].0, v));
            }
        }
    }
}

/// Assembles stiffness, mass and boundary data for one `(ω, κ, ε, τ)`.
pub fn assemble(mesh: &Mesh, field: &CoefficientField, ctx: &BlochContext) -> Result<DiscreteSystem> {
    field.matches(&mesh.geom)?;
    let nx = mesh.nx();
    if 2 * ctx.m_max >= nx {
        return Err(Error::Aliasing {
            m_max: ctx.m_max,
            nx,
        });
    }
    if (mesh.kappa - ctx.kappa).abs() > 1e-15 {
        return Err(Error::InvalidParameter(format!(
            "mesh Bloch wavenumber {} differs from context {}",
            mesh.kappa, ctx.kappa
        )));
    }
    if field.eps.iter().chain(&field.tau).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("coefficients must be positive and finite".into()));
    }
    let g = &mesh.geom;
    let (h1, h3) = (g.h1(), g.h3());
    let cap = g.n_cells() * 16;
    let mut kt = Vec::with_capacity(cap);
    let mut mt = Vec::with_capacity(cap);
    let mut gt = Vec::with_capacity(cap);
    let (k_unit, m_unit) = element_matrices(h1, h3, 1.0, 1.0);
    let mut gram = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            gram[a][b] = k_unit[a][b] + m_unit[a][b];
        }
    }
    for ke in 0..g.nz {
        for ie in 0..nx {
            let c = g.cell_index(ie, ke);
            let (k, m) = element_matrices(h1, h3, field.eps[c], field.tau[c]);
            let dofs = mesh.element_dofs(ie, ke);
            scatter_element(&mut kt, &dofs, &k);
            scatter_element(&mut mt, &dofs, &m);
            scatter_element(&mut gt, &dofs, &gram);
        }
    }
    let n = mesh.n_dofs();
    let harmonics = classify_orders(ctx);
    for h in &harmonics {
        if h.class == crate::harmonics::HarmonicClass::Linear {
            log::warn!(
                "order {} is at cutoff (eta = 0) for omega = {}, kappa = {}; the outgoing condition is degenerate",
                h.m,
                ctx.omega,
                ctx.kappa
            );
        }
    }
    Ok(DiscreteSystem {
        mesh: *mesh,
        ctx: *ctx,
        harmonics,
        stiffness: CsrMatrix::from_triplets(n, kt),
        mass: CsrMatrix::from_triplets(n, mt),
        h1_gram: CsrMatrix::from_triplets(n, gt),
    })
}

/// Incident amplitudes: `a_inc` from the left (`e^{iη_m x₃}`), `b_inc` from the
/// right (`e^{−iη_m x₃}`), both with transverse factor `e^{i(m+κ)x₁}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Incident {
    pub a_inc: Vec<(i64, C)>,
    pub b_inc: Vec<(i64, C)>,
}

impl Incident {
    /// Unit plane wave of order `m` from the left.
    pub fn from_left(m: i64) -> Self {
        Self {
            a_inc: vec![(m, C::new(1.0, 0.0))],
            b_inc: vec![],
        }
    }

    pub fn from_right(m: i64, amplitude: C) -> Self {
        Self {
            a_inc: vec![],
            b_inc: vec![(m, amplitude)],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.a_inc.iter().chain(&self.b_inc).all(|(_, c)| *c == C::default())
    }

    pub fn scaled(&self, s: C) -> Self {
        Self {
            a_inc: self.a_inc.iter().map(|&(m, c)| (m, c * s)).collect(),
            b_inc: self.b_inc.iter().map(|&(m, c)| (m, c * s)).collect(),
        }
    }

    /// Amplitude of order `m` on the given side (summing repeats).
    pub fn amplitude(&self, side: Side, m: i64) -> C {
        let list = match side {
            Side::Left => &self.a_inc,
            Side::Right => &self.b_inc,
        };
        list.iter().filter(|(k, _)| *k == m).map(|(_, c)| *c).sum()
    }

    /// `τ₀ Σ_{𝒵_p} η_m (|a_m^inc|² + |b_m^inc|²)`.
    pub fn flux(&self, ctx: &BlochContext) -> f64 {
        self.a_inc
            .iter()
            .chain(&self.b_inc)
            .map(|&(m, c)| {
                let h = crate::harmonics::eta_of(ctx, m);
                if h.is_propagating() {
                    ctx.tau0 * h.eta.re * c.norm_sqr()
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn validate(&self, ctx: &BlochContext) -> Result<()> {
        for &(m, c) in self.a_inc.iter().chain(&self.b_inc) {
            if c != C::default() && !crate::harmonics::eta_of(ctx, m).is_propagating() {
                return Err(Error::NotPropagating { m });
            }
            if ctx.index(m).is_none() {
                return Err(Error::InvalidParameter(format!(
                    "incident order {m} exceeds the truncation m_max = {}",
                    ctx.m_max
                )));
            }
        }
        Ok(())
    }
}

/// Loads `τ₀ ∫_Γ ((∂ₙ + T)u^inc) v̄` with the lumped boundary rule.
pub fn incident_rhs(mesh: &Mesh, ctx: &BlochContext, incident: &Incident) -> Result<Vec<C>> {
    incident.validate(ctx)?;
    let nx = mesh.nx();
    let h = PERIOD / nx as f64;
    let g = &mesh.geom;
    let mut rhs = vec![C::default(); mesh.n_dofs()];
    let i = C::new(0.0, 1.0);
    for (side, list, z, sign) in [
        (Side::Left, &incident.a_inc, g.z_minus, 1.0),
        (Side::Right, &incident.b_inc, g.z_plus, -1.0),
    ] {
        let range = mesh.boundary_dofs(side);
        for &(m, amp) in list.iter() {
            if amp == C::default() {
                continue;
            }
            let eta = crate::harmonics::eta_of(ctx, m).eta;
            let coeff = -2.0 * i * eta * amp * (sign * i * eta * z).exp() * (ctx.tau0 * h);
            let q = m as f64 + ctx.kappa;
            for (j, dof) in range.clone().enumerate() {
                rhs[dof] += coeff * C::from_polar(1.0, q * h * j as f64);
            }
        }
    }
    Ok(rhs)
}

/// Loads `∫_Ω ( ξ·∇v̄ + h v̄ )` for cellwise constant `ξ`, `h`
/// (midpoint rule, exact for constant data on Q1).
pub fn volume_source_rhs(mesh: &Mesh, src: &SourceTerm) -> Result<Vec<C>> {
    let g = &mesh.geom;
    let n = g.n_cells();
    if src.h.len() != n || src.xi.len() != n {
        return Err(Error::GridMismatch {
            expected: n,
            actual: src.h.len().min(src.xi.len()),
        });
    }
    let (h1, h3) = (g.h1(), g.h3());
    let area = h1 * h3;
    // basis gradients at the element midpoint, counterclockwise nodes
    let grad = [
        [-0.5 / h1, -0.5 / h3],
        [0.5 / h1, -0.5 / h3],
        [0.5 / h1, 0.5 / h3],
        [-0.5 / h1, 0.5 / h3],
    ];
    let mut rhs = vec![C::default(); mesh.n_dofs()];
    for ke in 0..g.nz {
        for ie in 0..g.nx {
            let c = g.cell_index(ie, ke);
            let (xi, hv) = (src.xi[c], src.h[c]);
            if hv == C::default() && xi[0] == C::default() && xi[1] == C::default() {
                continue;
            }
            for (a, (dof, phase)) in mesh.element_dofs(ie, ke).into_iter().enumerate() {
                let local = xi[0] * grad[a][0] + xi[1] * grad[a][1] + hv * 0.25;
                // test function is conj(phase)·φ_a; conjugated in the functional
                rhs[dof] += phase.conj() * local * area;
            }
        }
    }
    Ok(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::inner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(nx: usize, nz: usize, kappa: f64, omega: f64) -> (Mesh, BlochContext) {
        let g = CellGeometry::new(0.0, 1.0, nx, nz).unwrap();
        let ctx = BlochContext::new(omega, kappa, 1.0, 1.0, g.default_m_max()).unwrap();
        (Mesh::new(g, ctx.kappa), ctx)
    }

    fn random_field(g: &CellGeometry, seed: u64) -> CoefficientField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.n_cells();
        CoefficientField::from_values(
            g,
            (0..n).map(|_| rng.gen_range(1.0..4.0)).collect(),
            (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        )
        .unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<C> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn mesh_counting_and_identification() {
        let (mesh, _) = setup(4, 2, 0.0, 1.0);
        assert_eq!(mesh.n_dofs(), 12);
        assert_eq!(mesh.dof(0, 0), mesh.dof(4, 0));
        assert_eq!(mesh.phase, C::new(1.0, 0.0));
        let m2 = Mesh::new(mesh.geom, 0.25);
        assert!((m2.phase - C::new(0.0, 1.0)).norm() < 1e-15);
        let dofs = m2.element_dofs(3, 0);
        assert_eq!(dofs[1].0, m2.dof(0, 0));
        assert!((dofs[1].1 - C::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn unit_square_element_matrices() {
        let (k, m) = element_matrices(1.0, 1.0, 1.0, 1.0);
        let k_ref = [
            [4.0, -1.0, -2.0, -1.0],
            [-1.0, 4.0, -1.0, -2.0],
            [-2.0, -1.0, 4.0, -1.0],
            [-1.0, -2.0, -1.0, 4.0],
        ];
        let m_ref = [
            [4.0, 2.0, 1.0, 2.0],
            [2.0, 4.0, 2.0, 1.0],
            [1.0, 2.0, 4.0, 2.0],
            [2.0, 1.0, 2.0, 4.0],
        ];
        for a in 0..4 {
            for b in 0..4 {
                assert!((k[a][b] - k_ref[a][b] / 6.0).abs() < 1e-15);
                assert!((m[a][b] - m_ref[a][b] / 36.0).abs() < 1e-15);
            }
            assert!(k[a].iter().sum::<f64>().abs() < 1e-15);
        }
        // rectangle: the mass sums to the area
        let (k, m) = element_matrices(0.3, 0.7, 2.0, 3.0);
        let total: f64 = m.iter().flatten().sum();
        assert!((total - 2.0 * 0.21).abs() < 1e-15);
        for row in k {
            assert!(row.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn element_stiffness_integrates_gradients() {
        // u = x, w = z on a rectangle: ∫ ∇u·∇w = 0 and ∫ |∇u|² = area
        let (h1, h3) = (0.4, 0.25);
        let (k, m) = element_matrices(h1, h3, 1.0, 1.0);
        let ux = [0.0, h1, h1, 0.0].map(|v| C::new(v, 0.0));
        let uz = [0.0, 0.0, h3, h3].map(|v| C::new(v, 0.0));
        assert!(element_pairing(&k, &ux, &uz).norm() < 1e-15);
        assert!((element_pairing(&k, &ux, &ux).re - h1 * h3).abs() < 1e-15);
        // ∫ x·1 = h1²h3/2
        let one = [C::new(1.0, 0.0); 4];
        assert!((element_pairing(&m, &one, &ux).re - h1 * h1 * h3 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn assembled_forms_are_hermitian_and_definite() {
        let (mesh, ctx) = setup(8, 6, 0.17, 1.3);
        let field = random_field(&mesh.geom, 4);
        let sys = assemble(&mesh, &field, &ctx).unwrap();
        let scale = sys.stiffness.max_abs();
        assert!(sys.stiffness.hermitian_defect() <= 1e-14 * scale);
        assert!(sys.mass.hermitian_defect() <= 1e-14 * sys.mass.max_abs());
        let ar = sys.hermitian_part().to_dense();
        assert!((&ar - ar.adjoint()).camax() <= 1e-14 * ar.camax());
        let b = sys.mass.to_dense();
        assert!(nalgebra::Cholesky::new(b).is_some());

        for seed in 0..5 {
            let u = random_vec(mesh.n_dofs(), seed);
            // Gårding: ⟨(K + M)u, u⟩ ≥ min(τ, ε)·‖u‖²_H¹
            let km = sys.stiffness.quadratic_form(&u) + sys.mass.quadratic_form(&u);
            let lower = 0.5f64.min(1.0) * sys.h1_norm(&u).powi(2);
            assert!(km.re >= lower * (1.0 - 1e-12));
            // ⟨A_dtn u, u⟩ has nonpositive imaginary part
            let a = sys.system_matrix();
            let au = a.matvec(&u);
            assert!(inner(&u, &au).im <= 1e-12);
        }
    }

    #[test]
    fn kappa_zero_hermitian_part_is_real_symmetric() {
        let (mesh, ctx) = setup(8, 4, 0.0, 0.7);
        let field = random_field(&mesh.geom, 9);
        let sys = assemble(&mesh, &field, &ctx).unwrap();
        let ar = sys.hermitian_part().to_dense();
        assert!(ar.iter().all(|v| v.im.abs() < 1e-13));
        assert!((&ar - ar.transpose()).camax() < 1e-13);
    }

    #[test]
    fn system_decomposes_into_hermitian_and_flux_parts() {
        let (mesh, ctx) = setup(8, 4, 0.1, 1.7);
        let field = random_field(&mesh.geom, 2);
        let sys = assemble(&mesh, &field, &ctx).unwrap();
        let full = sys.system_matrix().to_dense();
        let w2 = ctx.omega * ctx.omega;
        let recombined = sys.hermitian_part().to_dense() - sys.mass.to_dense() * C::new(w2, 0.0)
            + sys.flux_part().to_dense() * C::new(0.0, 1.0);
        assert!((full - recombined).camax() < 1e-13);
    }

    #[test]
    fn transpose_equals_negated_kappa_system() {
        let (mesh, ctx) = setup(8, 4, 0.23, 1.4);
        let field = random_field(&mesh.geom, 5);
        let sys = assemble(&mesh, &field, &ctx).unwrap();
        let neg = ctx.negated();
        let sys_neg = assemble(&Mesh::new(mesh.geom, neg.kappa), &field, &neg).unwrap();
        let a = sys.system_matrix().to_dense();
        let b = sys_neg.system_matrix().to_dense();
        assert!((a.transpose() - b).camax() < 1e-12);
    }

    #[test]
    fn aliasing_and_grid_errors() {
        let (mesh, ctx) = setup(8, 4, 0.0, 1.0);
        let bad = BlochContext { m_max: 4, ..ctx };
        let field = CoefficientField::uniform(&mesh.geom, 1.0, 1.0);
        assert!(matches!(assemble(&mesh, &field, &bad), Err(Error::Aliasing { .. })));
        let other = CoefficientField::uniform(&CellGeometry::new(0.0, 1.0, 8, 6).unwrap(), 1.0, 1.0);
        assert!(matches!(assemble(&mesh, &other, &ctx), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn incident_rhs_examples() {
        let (mesh, ctx) = setup(8, 4, 0.0, 1.0);
        let h = PERIOD / 8.0;
        let rhs = incident_rhs(&mesh, &ctx, &Incident::from_left(0)).unwrap();
        for dof in mesh.boundary_dofs(Side::Left) {
            assert!((rhs[dof] - C::new(0.0, -2.0) * h).norm() < 1e-14);
        }
        assert!(mesh.boundary_dofs(Side::Right).all(|d| rhs[d] == C::default()));

        let zero = incident_rhs(&mesh, &ctx, &Incident::default()).unwrap();
        assert!(zero.iter().all(|v| *v == C::default()));

        let both = Incident {
            a_inc: vec![(0, C::new(1.0, 0.0))],
            b_inc: vec![(0, C::new(0.0, 2.0))],
        };
        let rb = incident_rhs(&mesh, &ctx, &both).unwrap();
        let rr = incident_rhs(&mesh, &ctx, &Incident::from_right(0, C::new(0.0, 2.0))).unwrap();
        for k in 0..rb.len() {
            assert!((rb[k] - rhs[k] - rr[k]).norm() < 1e-14);
        }
        assert!(matches!(
            incident_rhs(&mesh, &ctx, &Incident::from_left(2)),
            Err(Error::NotPropagating { m: 2 })
        ));
    }

    #[test]
    fn volume_source_examples() {
        let (mesh, _) = setup(8, 4, 0.0, 1.0);
        let g = mesh.geom;
        let n = g.n_cells();
        let zero = volume_source_rhs(&mesh, &SourceTerm::zeros(n)).unwrap();
        assert!(zero.iter().all(|v| *v == C::default()));

        let mut src = SourceTerm::zeros(n);
        src.h = vec![C::new(2.0, -1.0); n];
        let rhs = volume_source_rhs(&mesh, &src).unwrap();
        let interior = mesh.dof(3, 2);
        assert!((rhs[interior] - C::new(2.0, -1.0) * g.cell_area()).norm() < 1e-14);

        let mut src = SourceTerm::zeros(n);
        src.xi = vec![[C::new(1.0, 0.0), C::new(0.5, 0.5)]; n];
        let rhs = volume_source_rhs(&mesh, &src).unwrap();
        for k in 1..g.nz {
            for i in 0..g.nx {
                assert!(rhs[mesh.dof(i, k)].norm() < 1e-14);
            }
        }
        assert!(rhs[mesh.dof(0, 0)].norm() > 1e-3);
        let bad = SourceTerm::zeros(n - 1);
        assert!(volume_source_rhs(&mesh, &bad).is_err());
    }

    #[test]
    fn evaluation_reproduces_bilinear_data() {
        let (mesh, _) = setup(8, 4, 0.0, 1.0);
        // u = 2 + x₃ is exactly representable
        let u: Vec<C> = (0..mesh.n_dofs())
            .map(|d| {
                let (i, k) = (d % 8, d / 8);
                C::new(2.0 + mesh.node_position(i, k).1, 0.0)
            })
            .collect();
        let (v, grad) = mesh.evaluate(&u, 1.234, 0.377);
        assert!((v.re - 2.377).abs() < 1e-14);
        assert!(grad[0].norm() < 1e-14 && (grad[1].re - 1.0).abs() < 1e-14);
    }
}
