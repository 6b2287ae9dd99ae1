//! Independent reference solutions for layered (x₁-invariant) media.
//!
//! These do not touch the finite element code: they integrate the 1D problem
//! `(τu')' + (ω²ε − τq²)u = 0` exactly layer by layer.
#![allow(dead_code)]

use num_complex::Complex64 as C;

/// One homogeneous layer of a stack.
#[derive(Clone, Copy, Debug)]
pub struct Layer {
    pub eps: f64,
    pub tau: f64,
    pub thickness: f64,
}

/// Reflection and transmission amplitudes of a stack embedded in `(eps0, tau0)`,
/// for a wave `e^{iηx₃}` incident from below with transverse wavenumber `q`.
///
/// Amplitudes are referred to the stack faces (phase origin at each face).
pub fn transfer_matrix(layers: &[Layer], eps0: f64, tau0: f64, omega: f64, q: f64) -> (C, C) {
    let kz = |eps: f64, tau: f64| C::new(omega * omega * eps / tau - q * q, 0.0).sqrt();
    let eta = kz(eps0, tau0);
    // state (u, τu') propagated from the bottom face to the top face
    let mut m = [[C::new(1.0, 0.0), C::default()], [C::default(), C::new(1.0, 0.0)]];
    for l in layers {
        let k = kz(l.eps, l.tau);
        let (c, s) = ((k * l.thickness).cos(), (k * l.thickness).sin());
        let tk = k * l.tau;
        let layer = if k.norm() < 1e-300 {
            [[C::new(1.0, 0.0), C::new(l.thickness / l.tau, 0.0)], [C::default(), C::new(1.0, 0.0)]]
        } else {
            [[c, s / tk], [-tk * s, c]]
        };
        m = mul(layer, m);
    }
    // bottom: u = 1 + r, τu' = iητ₀(1 − r); top: u = t, τu' = iητ₀ t
    let z = C::new(0.0, 1.0) * eta * tau0;
    // t = m00(1+r) + m01 z(1−r);  z t = m10(1+r) + m11 z(1−r)
    let a1 = m[0][0] - m[0][1] * z;
    let b1 = m[0][0] + m[0][1] * z;
    let a2 = m[1][0] - m[1][1] * z;
    let b2 = m[1][0] + m[1][1] * z;
    // t = a1 r + b1 ; z t = a2 r + b2  →  r (z a1 − a2) = b2 − z b1
    let r = (b2 - z * b1) / (z * a1 - a2);
    let t = a1 * r + b1;
    (r, t)
}

fn mul(a: [[C; 2]; 2], b: [[C; 2]; 2]) -> [[C; 2]; 2] {
    let mut c = [[C::default(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Power transmission `|t|²` of a single uniform slab at normal incidence in vacuum.
pub fn slab_transmission(eps: f64, tau: f64, thickness: f64, omega: f64) -> f64 {
    let (_, t) = transfer_matrix(&[Layer { eps, tau, thickness }], 1.0, 1.0, omega, 0.0);
    t.norm_sqr()
}

/// Closed-form Airy transmission of a lossless slab, `n = √(ε/τ)`, `τ = 1`.
pub fn airy_transmission(n: f64, thickness: f64, omega: f64) -> f64 {
    let s = (n * omega * thickness).sin();
    1.0 / (1.0 + (n * n - 1.0).powi(2) / (4.0 * n * n) * s * s)
}

/// Fundamental even guided mode of a symmetric slab `|x₃| < d/2` with
/// coefficients `(eps, 1)` in a `(1, 1)` background at transverse wavenumber `q`:
/// the root of `k tan(kd/2) = γ`, `k = √(εω² − q²)`, `γ = √(q² − ω²)`, on
/// `q/√ε < ω < q`.
pub fn even_guided_mode(eps: f64, d: f64, q: f64) -> f64 {
    let f = |w: f64| {
        let k = (eps * w * w - q * q).sqrt();
        let g = (q * q - w * w).sqrt();
        // dispersion written without the tangent pole
        k * (k * d / 2.0).sin() - g * (k * d / 2.0).cos()
    };
    let mut lo = q / eps.sqrt() * (1.0 + 1e-14);
    let mut hi = q * (1.0 - 1e-14);
    assert!(f(lo) < 0.0 && f(hi) > 0.0, "no guided mode bracket");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Least-squares slope of `log y` against `log x`.
pub fn fitted_order(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub mod fixtures;

#[cfg(test)]
mod oracle_self_checks {
    #[allow(unused_imports)] // the acceptance binary has no test harness
    use super::*;

    #[test]
    fn transfer_matrix_agrees_with_airy_formula() {
        for &(d, w) in &[(std::f64::consts::PI, 1.0), (std::f64::consts::FRAC_PI_4, 1.0), (0.7, 1.3)] {
            let tm = slab_transmission(4.0, 1.0, d, w);
            assert!((tm - airy_transmission(2.0, d, w)).abs() < 1e-13);
        }
        assert!((slab_transmission(4.0, 1.0, std::f64::consts::FRAC_PI_4, 1.0) - 0.64).abs() < 1e-13);
    }

    #[test]
    fn transfer_matrix_conserves_energy() {
        let layers = [
            Layer { eps: 3.0, tau: 0.7, thickness: 0.4 },
            Layer { eps: 1.5, tau: 2.0, thickness: 1.1 },
        ];
        let (r, t) = transfer_matrix(&layers, 1.0, 1.0, 1.2, 0.3);
        assert!((r.norm_sqr() + t.norm_sqr() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn guided_mode_lies_below_the_light_line() {
        let w = even_guided_mode(12.0, 1.0, 0.4);
        assert!(w > 0.4 / 12f64.sqrt() && w < 0.4);
    }
}
