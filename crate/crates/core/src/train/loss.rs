use crate::error::{Error, Result};
use crate::tensor::tape::{BackwardCtx, BackwardOp};
use crate::tensor::{Shape4, Tape, Tensor4, Var};

pub const IGNORE_INDEX: u8 = 255;

/// Mean negative log-softmax of the labelled class over non-ignored pixels,
/// and its gradient `(softmax - onehot) / valid`. `labels` is `n*h*w` in
/// `(n, h, w)` order.
pub fn cross_entropy_loss(logits: &Tensor4, labels: &[u8], ignore_index: u8) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(Error::Data(format!(
            "{} labels for logits of shape {s}",
            labels.len()
        )));
    }
    let k = s.c;
    let valid = labels.iter().filter(|&&l| l != ignore_index).count();
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= k) {
        return Err(Error::Data(format!("label {bad} outside 0..{k}")));
    }
    let mut grad = Tensor4::zeros(s);
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / valid as f64;
    let x = logits.data();
    let g = grad.data_mut();
    let mut total = 0.0;
    let mut probs = vec![0.0; k];
    for n in 0..s.n {
        let base = n * k * plane;
        for p in 0..plane {
            let label = labels[n * plane + p];
            if label == ignore_index {
                continue;
            }
            let at = |c: usize| base + c * plane + p;
            let m = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(c)] - m).exp();
                z += *pr;
            }
            total += z.ln() + m - x[at(label as usize)];
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                g[at(c)] = (pr / z - onehot) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

struct CrossEntropyOp {
    grad: Tensor4,
}

impl BackwardOp for CrossEntropyOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(self.grad.scale(grad.data()[0]))])
    }
}

impl Tape {
    /// Scalar cross-entropy of `logits` against fixed labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore_index: u8) -> Result<Var> {
        let (loss, grad) = cross_entropy_loss(self.value(logits)?, labels, ignore_index)?;
        let y = Tensor4::full(Shape4::new(1, 1, 1, 1), loss);
        self.record(y, &[logits], CrossEntropyOp { grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let l = Tensor4::zeros(Shape4::new(2, 4, 3, 3));
        let (loss, _) = cross_entropy_loss(&l, &[1; 18], IGNORE_INDEX).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_gives_zero() {
        let mut l = Tensor4::zeros(Shape4::new(1, 3, 1, 2));
        for p in 0..2 {
            let i = l.index(0, 2, 0, p);
            l.data_mut()[i] = 1e3;
        }
        let (loss, _) = cross_entropy_loss(&l, &[2, 2], IGNORE_INDEX).unwrap();
        assert!(loss.abs() < 1e-300);
    }

    #[test]
    fn matches_naive_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = Tensor4::random_uniform(Shape4::new(1, 4, 2, 2), -2.0, 2.0, &mut rng);
        let labels = [0u8, 3, 255, 1];
        let (loss, _) = cross_entropy_loss(&l, &labels, IGNORE_INDEX).unwrap();
        let mut naive = 0.0;
        for (p, &lab) in labels.iter().enumerate() {
            if lab == 255 {
                continue;
            }
            let (r, c) = (p / 2, p % 2);
            let z: f64 = (0..4).map(|k| l.at(0, k, r, c).exp()).sum();
            naive -= (l.at(0, lab as usize, r, c).exp() / z).ln();
        }
        naive /= 3.0;
        assert!((loss - naive).abs() < 1e-12);
        let report = grad_check(|t, v| t.cross_entropy(v[0], &labels, IGNORE_INDEX), &[l], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn bad_label_is_data_error() {
        let l = Tensor4::zeros(Shape4::new(1, 3, 1, 1));
        assert!(matches!(cross_entropy_loss(&l, &[3], IGNORE_INDEX), Err(Error::Data(_))));
        assert!(matches!(cross_entropy_loss(&l, &[0, 1], IGNORE_INDEX), Err(Error::Data(_))));
    }
}
