//! Sparse and block-tridiagonal complex linear algebra.
//!
//! Unknowns are ordered layer by layer in `x₃`, so every system assembled on the
//! structured mesh is block tridiagonal with `nx × nx` blocks. The DtN couplings
//! are dense but confined to the first and last diagonal blocks.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, LU};
use num_complex::Complex64;

use crate::error::{Error, Result};

type C = Complex64;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<C>,
}

impl CsrMatrix {
    /// Sums duplicate triplets.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, C)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().expect("duplicate follows an entry") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn matvec(&self, x: &[C]) -> Vec<C> {
        (0..self.n)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> C {
        self.row(r)
            .find(|(cc, _)| *cc == c)
            .map(|(_, v)| v)
            .unwrap_or_default()
    }

    /// `max |A − Aᴴ|` over stored entries.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r).conj()).norm());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<C> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// `x^H A x`.
    pub fn quadratic_form(&self, x: &[C]) -> C {
        let ax = self.matvec(x);
        x.iter().zip(&ax).map(|(a, b)| a.conj() * b).sum()
    }
}

/// Square block-tridiagonal matrix with uniform block size.
#[derive(Debug, Clone)]
pub struct BlockTridiag {
    pub block: usize,
    pub diag: Vec<DMatrix<C>>,
    /// `lower[k]` couples block row `k + 1` to block column `k`.
    pub lower: Vec<DMatrix<C>>,
    /// `upper[k]` couples block row `k` to block column `k + 1`.
    pub upper: Vec<DMatrix<C>>,
}

impl BlockTridiag {
    pub fn zeros(n_blocks: usize, block: usize) -> Self {
        let z = || DMatrix::zeros(block, block);
        Self {
            block,
            diag: (0..n_blocks).map(|_| z()).collect(),
            lower: (1..n_blocks).map(|_| z()).collect(),
            upper: (1..n_blocks).map(|_| z()).collect(),
        }
    }

    /// Adds `scale · A` for a sparse matrix whose couplings stay within adjacent blocks.
    pub fn add_csr(&mut self, a: &CsrMatrix, scale: C) {
        let b = self.block;
        for r in 0..a.n {
            let (br, lr) = (r / b, r % b);
            for (c, v) in a.row(r) {
                let (bc, lc) = (c / b, c % b);
                let v = scale * v;
                if bc == br {
                    self.diag[br][(lr, lc)] += v;
                } else if bc + 1 == br {
                    self.lower[bc][(lr, lc)] += v;
                } else if br + 1 == bc {
                    self.upper[br][(lr, lc)] += v;
                } else {
                    panic!("entry ({r}, {c}) outside the block tridiagonal pattern");
                }
            }
        }
    }

    pub fn from_csr(a: &CsrMatrix, block: usize, scale: C) -> Self {
        assert_eq!(a.n % block, 0, "matrix size must be a multiple of the block size");
        let mut m = Self::zeros(a.n / block, block);
        m.add_csr(a, scale);
        m
    }

    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn n(&self) -> usize {
        self.block * self.n_blocks()
    }

    pub fn transpose(&self) -> Self {
        Self {
            block: self.block,
            diag: self.diag.iter().map(|m| m.transpose()).collect(),
            lower: self.upper.iter().map(|m| m.transpose()).collect(),
            upper: self.lower.iter().map(|m| m.transpose()).collect(),
        }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            block: self.block,
            diag: self.diag.iter().map(|m| m.adjoint()).collect(),
            lower: self.upper.iter().map(|m| m.adjoint()).collect(),
            upper: self.lower.iter().map(|m| m.adjoint()).collect(),
        }
    }

    pub fn matvec(&self, x: &[C]) -> Vec<C> {
        let b = self.block;
        let nb = self.n_blocks();
        let mut y = vec![C::default(); self.n()];
        for k in 0..nb {
            let mut acc = &self.diag[k] * DVector::from_column_slice(&x[k * b..(k + 1) * b]);
            if k > 0 {
                acc += &self.lower[k - 1] * DVector::from_column_slice(&x[(k - 1) * b..k * b]);
            }
            if k + 1 < nb {
                acc += &self.upper[k] * DVector::from_column_slice(&x[(k + 1) * b..(k + 2) * b]);
            }
            y[k * b..(k + 1) * b].copy_from_slice(acc.as_slice());
        }
        y
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        let b = self.block;
        let nb = self.n_blocks();
        let mut best: f64 = 0.0;
        for k in 0..nb {
            for c in 0..b {
                let mut s: f64 = self.diag[k].column(c).iter().map(|v| v.norm()).sum();
                if k > 0 {
                    s += self.upper[k - 1].column(c).iter().map(|v| v.norm()).sum::<f64>();
                }
                if k + 1 < nb {
                    s += self.lower[k].column(c).iter().map(|v| v.norm()).sum::<f64>();
                }
                best = best.max(s);
            }
        }
        best
    }

    pub fn to_dense(&self) -> DMatrix<C> {
        let b = self.block;
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..self.n_blocks() {
            m.view_mut((k * b, k * b), (b, b)).copy_from(&self.diag[k]);
            if k + 1 < self.n_blocks() {
                m.view_mut((k * b, (k + 1) * b), (b, b)).copy_from(&self.upper[k]);
                m.view_mut(((k + 1) * b, k * b), (b, b)).copy_from(&self.lower[k]);
            }
        }
        m
    }

    /// Block LU factorization without inter-block pivoting; each Schur complement
    /// is factored with partial pivoting.
    pub fn factor(&self) -> Result<BlockLu> {
        let nb = self.n_blocks();
        let mut pivots: Vec<LU<C, nalgebra::Dyn, nalgebra::Dyn>> = Vec::with_capacity(nb);
        let mut coupling: Vec<DMatrix<C>> = Vec::with_capacity(nb.saturating_sub(1));
        let mut schur = self.diag[0].clone();
        for k in 0..nb {
            let lu = schur.clone().lu();
            if !lu.is_invertible() {
                return Err(Error::Singular(format!("zero pivot in diagonal block {k}")));
            }
            if k + 1 < nb {
                let x = lu
                    .solve(&self.upper[k])
                    .ok_or_else(|| Error::Singular(format!("diagonal block {k} is singular")))?;
                schur = &self.diag[k + 1] - &self.lower[k] * &x;
                coupling.push(x);
            }
            pivots.push(lu);
        }
        Ok(BlockLu {
            block: self.block,
            pivots,
            coupling,
            lower: self.lower.clone(),
        })
    }
}

/// Factorization produced by [`BlockTridiag::factor`].
pub struct BlockLu {
    block: usize,
    pivots: Vec<LU<C, nalgebra::Dyn, nalgebra::Dyn>>,
    /// `S_k⁻¹ U_k` for each non-final block.
    coupling: Vec<DMatrix<C>>,
    lower: Vec<DMatrix<C>>,
}

impl BlockLu {
    pub fn n(&self) -> usize {
        self.block * self.pivots.len()
    }

    pub fn solve(&self, rhs: &[C]) -> Vec<C> {
        let b = self.block;
        let nb = self.pivots.len();
        assert_eq!(rhs.len(), b * nb, "right-hand side has the wrong length");
        let mut y: Vec<DVector<C>> = Vec::with_capacity(nb);
        for k in 0..nb {
            let mut r = DVector::from_column_slice(&rhs[k * b..(k + 1) * b]);
            if k > 0 {
                r -= &self.lower[k - 1] * &y[k - 1];
            }
            let sol = self.pivots[k]
                .solve(&r)
                .expect("factorization checked invertible");
            y.push(sol);
        }
        for k in (0..nb.saturating_sub(1)).rev() {
            let next = y[k + 1].clone();
            y[k] -= &self.coupling[k] * next;
        }
        y.into_iter().flat_map(|v| v.data.as_vec().clone()).collect()
    }
}

pub fn norm2(x: &[C]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dot_unconj(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn inner(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Solves `A x = b` with iterative refinement, returning `(x, relative residual)`.
pub fn solve_refined(a: &BlockTridiag, lu: &BlockLu, b: &[C], steps: usize) -> (Vec<C>, f64) {
    let bnorm = norm2(b);
    let mut x = lu.solve(b);
    if bnorm == 0.0 {
        return (x, 0.0);
    }
    let mut res = relative_residual(a, &x, b, bnorm);
    for _ in 0..steps {
        if res < 1e-14 {
            break;
        }
        let ax = a.matvec(&x);
        let r: Vec<C> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let dx = lu.solve(&r);
        let candidate: Vec<C> = x.iter().zip(&dx).map(|(p, q)| p + q).collect();
        let cres = relative_residual(a, &candidate, b, bnorm);
        if cres < res {
            x = candidate;
            res = cres;
        } else {
            break;
        }
    }
    (x, res)
}

fn relative_residual(a: &BlockTridiag, x: &[C], b: &[C], bnorm: f64) -> f64 {
    let ax = a.matvec(x);
    let r: f64 = b.iter().zip(&ax).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
    r / bnorm
}

/// 1-norm condition estimate `‖A‖₁ · est(‖A⁻¹‖₁)` (Hager–Higham iteration).
pub fn condition_estimate(a: &BlockTridiag, lu: &BlockLu) -> Result<f64> {
    let n = a.n();
    let lu_h = a.adjoint().factor()?;
    let mut x = vec![C::new(1.0 / n as f64, 0.0); n];
    let mut est = 0.0;
    let mut last_j = usize::MAX;
    for iter in 0..5 {
        let y = lu.solve(&x);
        let new_est: f64 = y.iter().map(|v| v.norm()).sum();
        if iter > 0 && new_est <= est {
            break;
        }
        est = new_est;
        let xi: Vec<C> = y
            .iter()
            .map(|v| {
                let r = v.norm();
                if r == 0.0 {
                    C::new(1.0, 0.0)
                } else {
                    v / r
                }
            })
            .collect();
        let z = lu_h.solve(&xi);
        let (j, zmax) = z
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.norm()))
            .fold((0, 0.0), |acc, it| if it.1 > acc.1 { it } else { acc });
        let ztx: f64 = inner(&x, &z).re;
        if iter > 0 && (zmax <= ztx || j == last_j) {
            break;
        }
        last_j = j;
        x = vec![C::default(); n];
        x[j] = C::new(1.0, 0.0);
    }
    // alternating test vector guards against underestimates
    let alt: Vec<C> = (0..n)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            C::new(s * (1.0 + i as f64 / (n.max(2) - 1) as f64), 0.0)
        })
        .collect();
    let y = lu.solve(&alt);
    let alt_est = 2.0 * y.iter().map(|v| v.norm()).sum::<f64>() / (3.0 * n as f64);
    Ok(a.norm1() * est.max(alt_est))
}

/// Eigenpairs of the Hermitian pencil `(A, B)` with `B` positive definite,
/// ascending, with `B`-orthonormal eigenvectors as columns.
pub fn dense_hermitian_pencil(a: &DMatrix<C>, b: &DMatrix<C>) -> Result<(Vec<f64>, DMatrix<C>)> {
    let chol = Cholesky::new(b.clone())
        .ok_or_else(|| Error::EigenNonConvergence("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let x = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::EigenNonConvergence("singular Cholesky factor".into()))?;
    let mut c = l
        .solve_lower_triangular(&x.adjoint())
        .ok_or_else(|| Error::EigenNonConvergence("singular Cholesky factor".into()))?;
    let ch = c.adjoint();
    c = (c + ch) * C::new(0.5, 0.0);
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut y = DMatrix::zeros(a.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        y.set_column(dst, &eig.eigenvectors.column(src));
    }
    let vecs = l
        .adjoint()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::EigenNonConvergence("singular Cholesky factor".into()))?;
    Ok((values, vecs))
}
