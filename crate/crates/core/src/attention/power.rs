//! Dominant left singular vector by alternating power iteration, with an
//! exact reverse pass through the unrolled iterations.

use super::matrix::{dot, norm2, Matrix};
use serde::{Deserialize, Serialize};

/// Rule that removes the sign ambiguity of a singular vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignFix {
    /// Flip so the largest-magnitude component is positive; ties go to the
    /// lowest index.
    #[default]
    LargestPositive,
    /// Keep whatever sign the iteration produced.
    None,
}

impl SignFix {
    fn sign_of(self, u: &[f64]) -> f64 {
        match self {
            SignFix::None => 1.0,
            SignFix::LargestPositive => {
                let mut best = 0.0f64;
                let mut sign = 1.0;
                for &x in u {
                    if x.abs() > best {
                        best = x.abs();
                        sign = if x < 0.0 { -1.0 } else { 1.0 };
                    }
                }
                sign
            }
        }
    }
}

/// One pass of the loop body: `a = u/|u|`, `b = Aᵀa / |Aᵀa|`.
#[derive(Clone, Debug)]
struct Step {
    a: Vec<f64>,
    u_norm: f64,
    b: Vec<f64>,
    v_norm: f64,
}

/// Forward record of one power iteration, sufficient to differentiate the
/// returned key with respect to the matrix.
#[derive(Clone, Debug)]
pub struct PowerTrace {
    steps: Vec<Step>,
    unsigned: Vec<f64>,
    final_norm: f64,
    sign: f64,
    key: Vec<f64>,
    degenerate: bool,
}

impl PowerTrace {
    pub fn key(&self) -> &[f64] {
        &self.key
    }

    pub fn into_key(self) -> Vec<f64> {
        self.key
    }

    /// True when some intermediate norm fell below the zero tolerance and
    /// the zero vector was returned.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Gradient of `<g_key, key>` with respect to the matrix, given the
    /// matrix the trace was computed from.
    pub fn backward(&self, a: &Matrix, g_key: &[f64]) -> Matrix {
        let mut da = Matrix::zeros(a.rows(), a.cols());
        if self.degenerate {
            return da;
        }
        let g_out: Vec<f64> = g_key.iter().map(|g| g * self.sign).collect();
        let mut g_u = normalize_backward(&self.unsigned, self.final_norm, &g_out);
        for (t, step) in self.steps.iter().enumerate().rev() {
            // u_{t+1} = A b_t
            add_outer(&mut da, &g_u, &step.b);
            let g_b = a.matvec_t(&g_u);
            let g_v = normalize_backward(&step.b, step.v_norm, &g_b);
            // v'_t = Aᵀ a_t
            add_outer(&mut da, &step.a, &g_v);
            if t > 0 {
                let g_a = a.matvec(&g_v);
                g_u = normalize_backward(&step.a, step.u_norm, &g_a);
            }
        }
        da
    }
}

/// Gradient through `y = x / |x|` given `y`, `|x|` and `dL/dy`.
fn normalize_backward(y: &[f64], norm: f64, gy: &[f64]) -> Vec<f64> {
    let proj = dot(y, gy);
    y.iter().zip(gy).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}

fn add_outer(m: &mut Matrix, left: &[f64], right: &[f64]) {
    let cols = m.cols();
    let data = m.data_mut();
    for (i, &l) in left.iter().enumerate() {
        for (d, &r) in data[i * cols..(i + 1) * cols].iter_mut().zip(right) {
            *d += l * r;
        }
    }
}

fn scaled(x: &[f64], norm: f64) -> Vec<f64> {
    x.iter().map(|v| v / norm).collect()
}

/// Runs `iters` rounds of: `u ← u/|u|`, `v ← Aᵀu`, `v ← v/|v|`, `u ← Av`;
/// returns `u/|u|` with the sign rule applied. Any norm below `zero_tol`
/// yields the zero vector.
pub fn power_iteration_traced(a: &Matrix, iters: usize, u0: &[f64], zero_tol: f64, sign_fix: SignFix) -> PowerTrace {
    debug_assert_eq!(u0.len(), a.rows());
    let degenerate = || PowerTrace {
        steps: Vec::new(),
        unsigned: Vec::new(),
        final_norm: 0.0,
        sign: 1.0,
        key: vec![0.0; a.rows()],
        degenerate: true,
    };
    let mut steps = Vec::with_capacity(iters);
    let mut u = u0.to_vec();
    for _ in 0..iters {
        let u_norm = norm2(&u);
        if !(u_norm >= zero_tol) {
            return degenerate();
        }
        let an = scaled(&u, u_norm);
        let v = a.matvec_t(&an);
        let v_norm = norm2(&v);
        if !(v_norm >= zero_tol) {
            return degenerate();
        }
        let b = scaled(&v, v_norm);
        u = a.matvec(&b);
        steps.push(Step {
            a: an,
            u_norm,
            b,
            v_norm,
        });
    }
    let final_norm = norm2(&u);
    if !(final_norm >= zero_tol) {
        return degenerate();
    }
    let unsigned = scaled(&u, final_norm);
    let sign = sign_fix.sign_of(&unsigned);
    let key = unsigned.iter().map(|x| x * sign).collect();
    PowerTrace {
        steps,
        unsigned,
        final_norm,
        sign,
        key,
        degenerate: false,
    }
}

/// Dominant left singular vector estimate of `a` after `iters` iterations
/// from `u0`, with the largest-magnitude component made positive.
pub fn power_iteration(a: &Matrix, iters: usize, u0: &[f64], zero_tol: f64) -> Vec<f64> {
    power_iteration_traced(a, iters, u0, zero_tol, SignFix::LargestPositive).into_key()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_dominant_axis() {
        let a = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        for u0 in [[1.0, 1.0], [0.3, -2.0], [-1.0, 5.0]] {
            let u = power_iteration(&a, 2, &u0, 1e-12);
            assert!((u[0] - 1.0).abs() < 0.02, "{u:?}");
            assert!(u[1].abs() < 0.2);
            assert!(u[0] > 0.0);
        }
        let u = power_iteration(&a, 40, &[1.0, 1.0], 1e-12);
        assert!((u[0] - 1.0).abs() < 1e-15 && u[1].abs() < 1e-15);
    }

    #[test]
    fn rank_one_is_a_fixed_point() {
        let left = [0.6, -0.8, 0.0];
        let right = [1.0, 2.0, -1.0, 0.5];
        let a = Matrix::from_fn(3, 4, |i, j| 2.5 * left[i] * right[j]);
        let u = power_iteration(&a, 1, &[1.0, 1.0, 1.0], 1e-12);
        // largest magnitude is the -0.8 entry, so the sign rule flips it
        let expect = [-0.6, 0.8, 0.0];
        for (x, e) in u.iter().zip(expect) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_matrix_gives_zero_key() {
        let a = Matrix::zeros(4, 6);
        let t = power_iteration_traced(&a, 2, &[1.0; 4], 1e-12, SignFix::LargestPositive);
        assert!(t.is_degenerate());
        assert!(t.key().iter().all(|&x| x == 0.0));
        assert!(t.backward(&a, &[1.0; 4]).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn orthogonal_init_is_degenerate() {
        // u0 orthogonal to every column of A gives Aᵀu = 0
        let a = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let t = power_iteration_traced(&a, 2, &[1.0, -1.0], 1e-12, SignFix::LargestPositive);
        assert!(t.is_degenerate());
    }

    #[test]
    fn sign_fix_ties_go_to_lowest_index() {
        assert_eq!(SignFix::LargestPositive.sign_of(&[-0.5, 0.5]), -1.0);
        assert_eq!(SignFix::LargestPositive.sign_of(&[0.5, -0.5]), 1.0);
        assert_eq!(SignFix::None.sign_of(&[-1.0]), 1.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(5, 7, |_, _| rng.gen_range(0.0..1.0));
        let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |m: &Matrix| dot(&power_iteration(m, 2, &[1.0; 5], 1e-12), &g);
        let t = power_iteration_traced(&a, 2, &[1.0; 5], 1e-12, SignFix::LargestPositive);
        let da = t.backward(&a, &g);
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..7 {
                let mut p = a.clone();
                p.set(i, j, a.get(i, j) + h);
                let mut m = a.clone();
                m.set(i, j, a.get(i, j) - h);
                let num = (f(&p) - f(&m)) / (2.0 * h);
                let err = crate::tensor::relative_error(da.get(i, j), num);
                assert!(err < 1e-6, "({i},{j}) {} vs {num}", da.get(i, j));
            }
        }
    }
}
