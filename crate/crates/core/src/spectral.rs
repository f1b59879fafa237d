//! Eigenpairs, counting, reduced solves and resolvent block norms.
//!
//! Vectors are plain coefficient arrays with the Euclidean inner product.
//! Every grid in this crate has a uniform quadrature weight, so orthogonality
//! and Rayleigh quotients agree with the discrete L² ones; callers rescale
//! norms by `sqrt(weight)` where the L² normalisation matters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{SparseHermitian, C64};

/// Largest dimension handled by the dense path.
pub const DENSE_LIMIT: usize = 2000;

/// Relative spectral gap below which a ground state counts as degenerate.
pub const SIMPLICITY_GAP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    #[serde(skip)]
    pub vector: Vec<C64>,
    pub residual: f64,
}

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Euclidean inner product, conjugate-linear in the first argument.
pub fn dot(u: &[C64], v: &[C64]) -> C64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}

fn axpy(y: &mut [C64], a: C64, x: &[C64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn residual_norm(a: &SparseHermitian, value: f64, v: &[C64]) -> f64 {
    let av = a.matvec(v);
    av.iter().zip(v).map(|(x, y)| (x - y * value).norm_sqr()).sum::<f64>().sqrt()
}

/// Full spectral decomposition with ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub values: Vec<f64>,
    basis: Basis,
}

#[derive(Clone, Debug)]
enum Basis {
    Real(DMatrix<f64>),
    Complex(DMatrix<C64>),
}

impl Decomposition {
    pub fn new(a: &SparseHermitian) -> Self {
        if a.real {
            let e = SymmetricEigen::new(a.to_dense_real());
            let order = ascending(e.eigenvalues.as_slice());
            let values = order.iter().map(|&i| e.eigenvalues[i]).collect();
            let vectors = e.eigenvectors.select_columns(&order);
            Decomposition { values, basis: Basis::Real(vectors) }
        } else {
            let e = SymmetricEigen::new(a.to_dense());
            let order = ascending(e.eigenvalues.as_slice());
            let values = order.iter().map(|&i| e.eigenvalues[i]).collect();
            let vectors = e.eigenvectors.select_columns(&order);
            Decomposition { values, basis: Basis::Complex(vectors) }
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, k: usize) -> Vec<C64> {
        match &self.basis {
            Basis::Real(v) => v.column(k).iter().map(|&x| C64::new(x, 0.0)).collect(),
            Basis::Complex(v) => v.column(k).iter().cloned().collect(),
        }
    }

    /// Distance from `e` to the spectrum.
    pub fn distance(&self, e: f64) -> f64 {
        self.values.iter().map(|l| (l - e).abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn count_leq(&self, e: f64) -> Result<usize> {
        if self.distance(e) <= 1e-12 * (1.0 + e.abs()) {
            return Err(Error::BoundaryAmbiguous(e));
        }
        Ok(self.values.iter().filter(|&&l| l <= e).count())
    }

    /// ‖χ_rows (A - e)⁻¹ χ_cols‖ from the eigenbasis.
    pub fn resolvent_block_norm(&self, e: f64, rows: &[bool], cols: &[bool]) -> Result<f64> {
        let dist = self.distance(e);
        if dist <= 1e-10 * (1.0 + e.abs()) {
            return Err(Error::Resonant { energy: e, distance: dist });
        }
        let ri: Vec<usize> = (0..rows.len()).filter(|&i| rows[i]).collect();
        let ci: Vec<usize> = (0..cols.len()).filter(|&i| cols[i]).collect();
        if ri.is_empty() || ci.is_empty() {
            return Ok(0.0);
        }
        let scale: Vec<f64> = self.values.iter().map(|l| 1.0 / (l - e)).collect();
        let s = match &self.basis {
            Basis::Real(v) => {
                let vr = v.select_rows(&ri);
                let mut vc = v.select_rows(&ci);
                for (k, &d) in scale.iter().enumerate() {
                    vc.column_mut(k).scale_mut(d);
                }
                let block = vr * vc.transpose();
                block.singular_values().max()
            }
            Basis::Complex(v) => {
                let vr = v.select_rows(&ri);
                let mut vc = v.select_rows(&ci);
                for (k, &d) in scale.iter().enumerate() {
                    vc.column_mut(k).scale_mut(d);
                }
                let block = vr * vc.adjoint();
                block.singular_values().max()
            }
        };
        Ok(s)
    }
}

fn ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    order
}

/// All eigenvalues in ascending order (dense oracle).
pub fn dense_eigenvalues(a: &SparseHermitian) -> Vec<f64> {
    let mut v: Vec<f64> = if a.real {
        SymmetricEigen::new(a.to_dense_real()).eigenvalues.iter().cloned().collect()
    } else {
        SymmetricEigen::new(a.to_dense()).eigenvalues.iter().cloned().collect()
    };
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// The k lowest eigenpairs with non-decreasing values.
pub fn smallest_eigenpairs(a: &SparseHermitian, k: usize, tol: f64) -> Result<Vec<EigenPair>> {
    assert!(k >= 1 && k <= a.dim());
    if a.dim() <= DENSE_LIMIT {
        Ok(dense_eigenpairs(a, k))
    } else {
        lanczos_smallest(a, k, tol, 50_000)
    }
}

/// Dense fallback, also the oracle for the iterative path.
pub fn dense_eigenpairs(a: &SparseHermitian, k: usize) -> Vec<EigenPair> {
    let d = Decomposition::new(a);
    (0..k)
        .map(|i| {
            let vector = d.vector(i);
            let residual = residual_norm(a, d.values[i], &vector);
            EigenPair { value: d.values[i], vector, residual }
        })
        .collect()
}

/// Thick-restart Lanczos with full reorthogonalisation and explicit
/// Rayleigh-Ritz projection. `budget` bounds the number of matrix-vector
/// products.
pub fn lanczos_smallest(a: &SparseHermitian, k: usize, tol: f64, budget: usize) -> Result<Vec<EigenPair>> {
    let n = a.dim();
    let max_basis = (4 * k + 40).min(n);
    let keep = (k + 8).min(max_basis - 1);
    let scale = a.max_abs().max(1.0);
    // Deterministic start with all components populated.
    let mut start: Vec<C64> = (0..n).map(|i| C64::new(1.0 + ((i * 7919) % 101) as f64 / 101.0, 0.0)).collect();
    let s = norm(&start);
    start.iter_mut().for_each(|x| *x /= s);
    let mut basis: Vec<Vec<C64>> = vec![start];
    let mut images: Vec<Vec<C64>> = Vec::new();
    let mut products = 0usize;
    loop {
        while basis.len() < max_basis {
            let q = basis.last().unwrap();
            let w = a.matvec(q);
            products += 1;
            images.push(w.clone());
            let mut r = w;
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(b, &r);
                    axpy(&mut r, -c, b);
                }
            }
            let nr = norm(&r);
            if nr <= 1e-13 * scale {
                break;
            }
            r.iter_mut().for_each(|x| *x /= nr);
            basis.push(r);
        }
        while images.len() < basis.len() {
            images.push(a.matvec(&basis[images.len()]));
            products += 1;
        }
        let m = basis.len();
        let h = DMatrix::from_fn(m, m, |i, j| dot(&basis[i], &images[j]));
        let h = (&h + h.adjoint()) * C64::new(0.5, 0.0);
        let e = SymmetricEigen::new(h);
        let order = ascending(e.eigenvalues.as_slice());
        let ritz = |c: usize, src: &Vec<Vec<C64>>| -> Vec<C64> {
            let mut v = vec![zero(); n];
            for (j, b) in src.iter().enumerate() {
                axpy(&mut v, e.eigenvectors[(j, order[c])], b);
            }
            v
        };
        let mut pairs = Vec::with_capacity(k);
        let mut converged = true;
        for c in 0..k.min(m) {
            let value = e.eigenvalues[order[c]];
            let v = ritz(c, &basis);
            let av = ritz(c, &images);
            let res = av.iter().zip(&v).map(|(x, y)| (x - y * value).norm_sqr()).sum::<f64>().sqrt();
            if res > tol * (1.0 + value.abs()) {
                converged = false;
            }
            pairs.push(EigenPair { value, vector: v, residual: res });
        }
        if converged && pairs.len() == k {
            for p in &mut pairs {
                let nv = norm(&p.vector);
                p.vector.iter_mut().for_each(|x| *x /= nv);
                p.residual = residual_norm(a, p.value, &p.vector);
            }
            return Ok(pairs);
        }
        if products >= budget || m == n {
            return Err(Error::NonConvergence(products));
        }
        // Restart from the lowest Ritz vectors plus the next Krylov direction.
        let mut r = images.last().unwrap().clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &r);
                axpy(&mut r, -c, b);
            }
        }
        let kept: Vec<usize> = (0..keep.min(m)).collect();
        let new_basis: Vec<Vec<C64>> = kept.iter().map(|&c| ritz(c, &basis)).collect();
        let new_images: Vec<Vec<C64>> = kept.iter().map(|&c| ritz(c, &images)).collect();
        basis = new_basis;
        images = new_images;
        for b in &basis {
            let c = dot(b, &r);
            axpy(&mut r, -c, b);
        }
        let nr = norm(&r);
        if nr <= 1e-13 * scale {
            return Err(Error::NonConvergence(products));
        }
        r.iter_mut().for_each(|x| *x /= nr);
        basis.push(r);
    }
}

/// Number of eigenvalues <= e (dense count).
pub fn count_eigenvalues_leq(a: &SparseHermitian, e: f64) -> Result<usize> {
    let values = dense_eigenvalues(a);
    if values.iter().any(|l| (l - e).abs() <= 1e-12 * (1.0 + e.abs())) {
        return Err(Error::BoundaryAmbiguous(e));
    }
    Ok(values.iter().filter(|&&l| l <= e).count())
}

fn dense_solve(m: DMatrix<C64>, rhs: &[C64]) -> Option<Vec<C64>> {
    let lu = m.lu();
    lu.solve(&DVector::from_column_slice(rhs)).map(|x| x.iter().cloned().collect())
}

/// Conjugate gradients for a Hermitian positive definite operator.
fn conjugate_gradient(apply: impl Fn(&[C64]) -> Vec<C64>, b: &[C64], tol: f64, max_iter: usize) -> Result<Vec<C64>> {
    let mut x = vec![zero(); b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r).re;
    let target = tol * tol * rr.max(f64::MIN_POSITIVE);
    for it in 0..max_iter {
        if rr <= target {
            return Ok(x);
        }
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap).re;
        axpy(&mut x, C64::new(alpha, 0.0), &p);
        axpy(&mut r, C64::new(-alpha, 0.0), &ap);
        let rr_new = dot(&r, &r).re;
        let beta = rr_new / rr;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + *p * beta);
        rr = rr_new;
        if it + 1 == max_iter {
            break;
        }
    }
    if rr <= target {
        Ok(x)
    } else {
        Err(Error::NonConvergence(max_iter))
    }
}

/// Lowest two eigenvalues, used for the simplicity check.
fn lowest_two(a: &SparseHermitian) -> Result<(f64, f64)> {
    if a.dim() <= DENSE_LIMIT {
        let v = dense_eigenvalues(a);
        Ok((v[0], v.get(1).cloned().unwrap_or(f64::INFINITY)))
    } else {
        let p = lanczos_smallest(a, 2, 1e-10, 20000)?;
        Ok((p[0].value, p[1].value))
    }
}

/// Solves (A - λ₀)u = rhs - (rhs, ψ₀)ψ₀ with u ⟂ ψ₀, for λ₀ the lowest and
/// simple eigenvalue of A with eigenvector ψ₀ (any norm).
pub fn solve_reduced(a: &SparseHermitian, lambda0: f64, psi0: &[C64], rhs: &[C64]) -> Result<Vec<C64>> {
    let (l0, l1) = lowest_two(a)?;
    let gap = l1 - l0;
    let threshold = SIMPLICITY_GAP * (1.0 + lambda0.abs());
    if gap < threshold {
        return Err(Error::DegenerateGroundState { gap, threshold });
    }
    let np = norm(psi0);
    let psi: Vec<C64> = psi0.iter().map(|x| x / np).collect();
    let project = |v: &mut Vec<C64>| {
        let c = dot(&psi, v);
        axpy(v, -c, &psi);
    };
    let mut b = rhs.to_vec();
    project(&mut b);
    if norm(&b) == 0.0 {
        return Ok(vec![zero(); rhs.len()]);
    }
    // Rank-one lift of the kernel keeps the shifted matrix positive definite.
    let sigma = gap;
    let apply = |u: &[C64]| -> Vec<C64> {
        let mut y = a.matvec(u);
        let c = dot(&psi, u) * sigma;
        y.iter_mut().zip(u).for_each(|(y, u)| *y -= u * lambda0);
        axpy(&mut y, c, &psi);
        y
    };
    let solve = |r: &[C64]| -> Result<Vec<C64>> {
        if a.dim() <= DENSE_LIMIT {
            let mut m = a.to_dense();
            for i in 0..m.nrows() {
                m[(i, i)] -= C64::new(lambda0, 0.0);
            }
            let p = DVector::from_column_slice(&psi);
            m += (&p * p.adjoint()) * C64::new(sigma, 0.0);
            dense_solve(m, r).ok_or(Error::DegenerateGroundState { gap, threshold })
        } else {
            conjugate_gradient(&apply, r, 1e-14, 20 * a.dim())
        }
    };
    let mut u = solve(&b)?;
    project(&mut u);
    // One step of iterative refinement.
    let mut r = b.clone();
    let au = apply(&u);
    r.iter_mut().zip(&au).for_each(|(r, y)| *r -= y);
    project(&mut r);
    let du = solve(&r)?;
    axpy(&mut u, C64::new(1.0, 0.0), &du);
    project(&mut u);
    Ok(u)
}

/// ‖χ_rows (A - e)⁻¹ χ_cols‖ by power iteration on the masked block with
/// LU solves.
pub fn resolvent_block_norm(a: &SparseHermitian, e: f64, rows: &[bool], cols: &[bool]) -> Result<f64> {
    let n = a.dim();
    let mut m = a.to_dense();
    for i in 0..n {
        m[(i, i)] -= C64::new(e, 0.0);
    }
    let lu = m.lu();
    let solve = |v: &[C64]| -> Result<Vec<C64>> {
        lu.solve(&DVector::from_column_slice(v))
            .map(|x| x.iter().cloned().collect())
            .ok_or(Error::Resonant { energy: e, distance: 0.0 })
    };
    let mask = |v: &mut [C64], keep: &[bool]| v.iter_mut().zip(keep).for_each(|(x, &k)| if !k { *x = zero() });
    let power = |rows: &[bool], cols: &[bool]| -> Result<f64> {
        let mut x: Vec<C64> = (0..n).map(|i| C64::new(1.0 + (i % 7) as f64 * 0.1, 0.05 * (i % 3) as f64)).collect();
        mask(&mut x, cols);
        let nx = norm(&x);
        if nx == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let mut est = 0.0;
        for _ in 0..2000 {
            let mut y = solve(&x)?;
            mask(&mut y, rows);
            let mut z = solve(&y)?;
            mask(&mut z, cols);
            let nz = norm(&z);
            if nz == 0.0 {
                return Ok(0.0);
            }
            let next = nz.sqrt();
            x = z.into_iter().map(|v| v / nz).collect();
            if (next - est).abs() <= 1e-12 * next {
                return Ok(next);
            }
            est = next;
        }
        Ok(est)
    };
    let all = vec![true; n];
    let full = power(&all, &all)?;
    let distance = 1.0 / full;
    if !full.is_finite() || distance <= 1e-10 * (1.0 + e.abs()) {
        return Err(Error::Resonant { energy: e, distance });
    }
    power(rows, cols)
}
