//! Seeded random structures and perturbation directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slabscat::scatter::Scatterer;
use slabscat::structure::{CellGeometry, CoefficientField, Perturbation};

/// Piecewise-constant coefficients on a 4×4 block pattern, `ε ∈ [1, 6]`,
/// `τ ∈ [0.6, 1.6]`, on `[-0.5, 0.5]` in `x₃`.
pub fn random_structure(seed: u64, nx: usize, nz: usize) -> Scatterer {
    let g = CellGeometry::new(-0.5, 0.5, nx, nz).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<(f64, f64)> = (0..16).map(|_| (rng.gen_range(1.0..6.0), rng.gen_range(0.6..1.6))).collect();
    let mut eps = vec![0.0; g.n_cells()];
    let mut tau = vec![0.0; g.n_cells()];
    for c in 0..g.n_cells() {
        let (i, k) = g.cell_of(c);
        let b = (4 * i / nx) + 4 * (4 * k / nz);
        eps[c] = blocks[b].0;
        tau[c] = blocks[b].1;
    }
    Scatterer::new(g, CoefficientField::from_values(&g, eps, tau).unwrap(), 1.0, 1.0).unwrap()
}

/// Cellwise uniform random direction in `[-1, 1]` for both coefficients.
pub fn random_direction(seed: u64, n_cells: usize) -> Perturbation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Perturbation {
        d_eps: (0..n_cells).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        d_tau: (0..n_cells).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// A direction that is smooth in space, so it has a mesh-independent limit.
pub fn smooth_direction(geom: &CellGeometry) -> Perturbation {
    let mut d = Perturbation::zeros(geom.n_cells());
    for c in 0..geom.n_cells() {
        let (i, k) = geom.cell_of(c);
        let (x, z) = geom.cell_center(i, k);
        let s = (z - geom.z_minus) / geom.thickness();
        d.d_eps[c] = (x.cos() + 0.5) * (1.0 + s * s);
        d.d_tau[c] = 0.3 * (2.0 * x).sin() * (1.0 - s);
    }
    d
}
