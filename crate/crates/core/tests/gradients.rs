mod common;

use common::fixtures::{random_direction, random_structure, smooth_direction};
use num_complex::Complex64 as C;
use slabscat::assembly::Incident;
use slabscat::scatter::{Scatterer, SolveOptions};
use slabscat::sensitivity::*;
use slabscat::structure::*;

fn opts() -> SolveOptions {
    SolveOptions::fast()
}

#[test]
fn discrete_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let s = random_structure(seed, 16, 16);
        let ctx = s.context(1.3, 0.2).unwrap();
        for d in 0..3 {
            let dir = random_direction(100 * seed + d, s.geom.n_cells());
            let r = fd_check(&s, &ctx, &Incident::from_left(0), &dir, Functional::Energy, &DEFAULT_STEPS, None, &opts()).unwrap();
            assert!(r.rel_error <= 1e-6, "seed {seed} dir {d}: {}", r.rel_error);
        }
    }
}

#[test]
fn order_amplitude_derivative_matches_finite_differences() {
    let s = random_structure(3, 16, 16);
    let ctx = s.context(1.8, 0.1).unwrap();
    let props: Vec<i64> = ctx.harmonics().iter().filter(|h| h.is_propagating()).map(|h| h.m).collect();
    assert!(props.len() >= 3);
    let dir = random_direction(7, s.geom.n_cells());
    for m in props {
        let r = fd_check(&s, &ctx, &Incident::from_left(0), &dir, Functional::Order(m), &DEFAULT_STEPS, None, &opts()).unwrap();
        assert!(r.rel_error <= 1e-6, "m={m}: {}", r.rel_error);
    }
}

#[test]
fn normalization_constant_is_structure_independent() {
    let steps = [1e-3, 1e-4];
    for seed in [11u64, 12] {
        let s = random_structure(seed, 12, 12);
        let ctx = s.context(1.6, -0.15).unwrap();
        let dirs: Vec<_> = (0..3).map(|d| random_direction(seed * 10 + d, s.geom.n_cells())).collect();
        let c = calibrate_c_norm(&s, &ctx, &Incident::from_left(0), 0, &dirs, &steps, &opts()).unwrap();
        assert!((c - c_norm()).norm() <= 1e-6 * c_norm().norm(), "{c} vs {}", c_norm());
    }
}

#[test]
fn continuum_gradient_approaches_discrete_gradient() {
    let mut diffs = vec![];
    let mut hs = vec![];
    for n in [16usize, 32, 64] {
        let s = random_structure(5, n, n);
        let ctx = s.context(1.1, 0.25).unwrap();
        let dir = smooth_direction(&s.geom);
        let (_, disc) = energy_gradient(&s, &ctx, &Incident::from_left(0), GradientPath::Discrete, &opts()).unwrap();
        let (_, cont) =
            energy_gradient(&s, &ctx, &Incident::from_left(0), GradientPath::Continuum(Quadrature::Midpoint), &opts())
                .unwrap();
        let (_, exact) =
            energy_gradient(&s, &ctx, &Incident::from_left(0), GradientPath::Continuum(Quadrature::Element), &opts())
                .unwrap();
        let (a, b, e) = (disc.pair(&s.geom, &dir), cont.pair(&s.geom, &dir), exact.pair(&s.geom, &dir));
        assert!((a - e).abs() <= 1e-10 * a.abs());
        diffs.push((a - b).abs() / a.abs());
        hs.push(1.0 / n as f64);
    }
    let order = common::fitted_order(&hs, &diffs);
    assert!(order >= 1.5, "{diffs:?} order {order}");
}

#[test]
fn linearized_field_has_a_quadratic_remainder() {
    let s = random_structure(9, 16, 16);
    let ctx = s.context(0.9, 0.35).unwrap();
    let dir = random_direction(4, s.geom.n_cells());
    let r = fd_check(&s, &ctx, &Incident::from_left(0), &dir, Functional::Field, &[1e-2, 5e-3, 2.5e-3], None, &opts())
        .unwrap();
    // relative error of the difference quotient is first order in t
    assert!((r.fitted_order - 1.0).abs() < 0.1, "{}", r.fitted_order);
    assert!(r.rel_error < 1e-2);
}

#[test]
fn envelope_limits_finite_difference_steps() {
    let s = random_structure(2, 8, 8);
    let ctx = s.context(1.0, 0.0).unwrap();
    let dir = random_direction(1, s.geom.n_cells());
    let env = AdmissibleEnvelope::degenerate(&s.field);
    let r = fd_check(&s, &ctx, &Incident::from_left(0), &dir, Functional::Energy, &DEFAULT_STEPS, Some(&env), &opts());
    assert!(matches!(r, Err(slabscat::Error::Inadmissible { .. })));
}

#[test]
fn inclusion_gradient_is_the_indicator_pairing() {
    let g = CellGeometry::new(0.0, 1.0, 32, 16).unwrap();
    let bg = Background { eps: 2.0, tau: 1.0 };
    let inc = Inclusion {
        id: 4,
        shape: Shape::Rect { lo: (1.0, 0.25), hi: (3.0, 0.75) },
        eps: 5.0,
        tau: 1.4,
    };
    let s = Scatterer::new(g, rasterize(&g, bg, &[inc]).unwrap(), 1.0, 1.0).unwrap();
    let ctx = s.context(1.2, 0.1).unwrap();
    let (_, grad) = energy_gradient(&s, &ctx, &Incident::from_left(0), GradientPath::Discrete, &opts()).unwrap();
    let per = gradient_homogeneous(&grad, &g, &[inc]).unwrap();
    let mask = inclusion_mask(&g, &inc);
    let ind = Perturbation::eps_only(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
    assert!((per[0].d_eps - grad.pair(&g, &ind)).abs() < 1e-14);
    // and it predicts the change of a homogeneous inclusion parameter
    let fd = {
        let t = 1e-5;
        let e = |eps: f64| {
            let f = rasterize(&g, bg, &[Inclusion { eps, ..inc }]).unwrap();
            s.with_field(f).solve(&ctx, &Incident::from_left(0), &opts()).unwrap().energy_transmitted
        };
        (e(5.0 + t) - e(5.0 - t)) / (2.0 * t)
    };
    assert!((fd - per[0].d_eps).abs() <= 1e-6 * fd.abs());
}

#[test]
fn boundary_gradient_vanishes_for_phantoms_and_tangential_motion() {
    let g = CellGeometry::new(0.0, 3.0, 48, 48).unwrap();
    let bg = Background { eps: 1.5, tau: 1.0 };
    let disk = |eps: f64, tau: f64| Inclusion {
        id: 1,
        shape: Shape::Disk { center: (3.0, 1.5), radius: 0.8 },
        eps,
        tau,
    };
    // phantom: inclusion coefficients equal the background
    let phantom = disk(1.5, 1.0);
    let s = Scatterer::new(g, rasterize(&g, bg, &[phantom]).unwrap(), 1.0, 1.0).unwrap();
    let p = s.solve(&s.context(0.9, 0.1).unwrap(), &Incident::from_left(0), &opts()).unwrap();
    let adj = solve_adjoint(&s, &p, &opts()).unwrap();
    let b = gradient_boundary(&g, bg, &phantom, &p, &adj, &vec![1.0; 64]).unwrap();
    assert_eq!((b.inside, b.outside, b.recombined), (0.0, 0.0, 0.0));
    let real = disk(3.0, 1.5);
    let s = Scatterer::new(g, rasterize(&g, bg, &[real]).unwrap(), 1.0, 1.0).unwrap();
    let p = s.solve(&s.context(0.9, 0.1).unwrap(), &Incident::from_left(0), &opts()).unwrap();
    let adj = solve_adjoint(&s, &p, &opts()).unwrap();
    let b = gradient_boundary(&g, bg, &real, &p, &adj, &vec![0.0; 64]).unwrap();
    assert_eq!((b.inside, b.outside, b.recombined), (0.0, 0.0, 0.0));
    let b = gradient_boundary(&g, bg, &real, &p, &adj, &vec![1.0; 64]).unwrap();
    assert!(b.recombined != 0.0 && b.samples == 64);
    assert!(gradient_boundary(&g, bg, &real, &p, &adj, &[1.0; 8]).is_err());
}

#[test]
fn lipschitz_ratio_is_finite_and_zero_for_identical_pairs() {
    let s = random_structure(21, 12, 12);
    let ctx = s.context(1.0, 0.2).unwrap();
    let dir = random_direction(3, s.geom.n_cells());
    let f1 = s.field.clone();
    let f2 = f1.perturb(&random_direction(8, s.geom.n_cells()), 0.05).unwrap();
    let rep = lipschitz_probe(&s, &ctx, &Incident::from_left(0), &[(f1.clone(), f1.clone()), (f1, f2)], &dir, 2.0, None, &opts())
        .unwrap();
    assert_eq!(rep.ratios[0], 0.0);
    assert!(rep.ratios[1] > 0.0 && rep.ratios[1].is_finite());
    let _ = C::default();
}
