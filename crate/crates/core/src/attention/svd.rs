//! Exact small-matrix SVD by one-sided (Hestenes) Jacobi rotations. Only
//! used to verify the power-iteration keys; never on the runtime path.

use super::matrix::{dot, norm2, Matrix};
use crate::error::{config_err, Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = Σ σᵢ uᵢ vᵢᵀ` with `k = min(m, n)` triplets, singular values
/// in non-increasing order.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    /// `m x k`, column i is uᵢ.
    pub u: Matrix,
    /// `n x k`, column i is vᵢ.
    pub v: Matrix,
}

impl SvdResult {
    pub fn left_vector(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }

    pub fn right_vector(&self, i: usize) -> Vec<f64> {
        self.v.column(i)
    }

    /// Number of singular values above `tol * σ₁`.
    pub fn rank(&self, tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > tol * top && s > 0.0).count()
    }
}

pub fn svd_oracle(a: &Matrix) -> Result<SvdResult> {
    if a.rows() * a.cols() > 1_000_000 {
        return config_err("svd oracle is limited to 10^6 entries");
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(SvdResult {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        })
    }
}

/// One-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]).then(i.cmp(&j)));

    let top = sig[order[0]];
    let tiny = top * eps * (m.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let s = sig[j];
        if s > tiny && s > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
            singular_values.push(s);
        } else {
            ucols.push(complete_basis(&ucols, m));
            singular_values.push(0.0);
        }
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
    }
    let u = Matrix::from_fn(m, n, |i, k| ucols[k][i]);
    Ok(SvdResult {
        singular_values,
        u,
        v,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// A unit vector orthogonal to `basis`, by Gram-Schmidt over the standard basis.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, &bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let nrm = norm2(&cand);
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(cand);
        }
        if nrm > 0.5 {
            break;
        }
    }
    let cand = best.unwrap_or_else(|| vec![0.0; m]);
    cand.iter().map(|x| x / best_norm.max(f64::MIN_POSITIVE)).collect()
}

/// `Σ_{i<K} σᵢ uᵢ vᵢᵀ`.
pub fn rank_k_approx(svd: &SvdResult, k: usize) -> Result<Matrix> {
    if k == 0 || k > svd.singular_values.len() {
        return config_err(format!(
            "rank {k} outside 1..={}",
            svd.singular_values.len()
        ));
    }
    let (m, n) = (svd.u.rows(), svd.v.rows());
    let mut out = Matrix::zeros(m, n);
    for t in 0..k {
        let s = svd.singular_values[t];
        for i in 0..m {
            let us = s * svd.u.get(i, t);
            for j in 0..n {
                let cur = out.get(i, j);
                out.set(i, j, cur + us * svd.v.get(j, t));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.sub(&Matrix::identity(m.cols())).unwrap().data().iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd_oracle(&Matrix::identity(3)).unwrap();
        assert!(s.singular_values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn diagonal_three_one() {
        let a = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let s = svd_oracle(&a).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        let u1 = s.left_vector(0);
        assert!((u1[0].abs() - 1.0).abs() < 1e-15 && u1[1].abs() < 1e-15);
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        for (r, c, seed) in [(8, 5, 1), (5, 8, 2), (32, 128, 3), (6, 6, 4)] {
            let a = random(r, c, seed);
            let s = svd_oracle(&a).unwrap();
            let back = rank_k_approx(&s, s.singular_values.len()).unwrap();
            let rel = a.sub(&back).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-10, "{r}x{c}: {rel}");
            assert!(orthonormality_error(&s.u) < 1e-8);
            assert!(orthonormality_error(&s.v) < 1e-8);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_basis_is_completed() {
        // rank one 4x3
        let a = Matrix::from_fn(4, 3, |i, j| (i + 1) as f64 * (j + 2) as f64);
        let s = svd_oracle(&a).unwrap();
        assert_eq!(s.rank(1e-12), 1);
        assert!(orthonormality_error(&s.u) < 1e-8);
        assert!(orthonormality_error(&s.v) < 1e-8);
    }

    #[test]
    fn rank_one_of_diagonal() {
        let a = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let s = svd_oracle(&a).unwrap();
        let r1 = rank_k_approx(&s, 1).unwrap();
        assert_eq!(r1.data(), &[3.0, 0.0, 0.0, 0.0]);
        assert!(rank_k_approx(&s, 0).is_err());
        assert!(rank_k_approx(&s, 3).is_err());
    }

    #[test]
    fn eckart_young_probe() {
        let a = random(4, 4, 9);
        let s = svd_oracle(&a).unwrap();
        let best = rank_k_approx(&s, 1).unwrap();
        let err = a.sub(&best).unwrap().frobenius_norm();
        let tail: f64 = s.singular_values[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-10);
        // the spectral norm of the residual is exactly sigma_2
        let resid = svd_oracle(&a.sub(&best).unwrap()).unwrap();
        assert!((resid.singular_values[0] - s.singular_values[1]).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cand = Matrix::from_fn(4, 4, |i, j| x[i] * y[j]);
            assert!(a.sub(&cand).unwrap().frobenius_norm() >= err - 1e-12);
        }
    }
}
