use super::{Tape, Tensor4, Var};
use crate::error::{dim_err, Result};

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input, element) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor4]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out)?.len() != 1 {
        return dim_err("gradient check closure must return a scalar");
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar returned by `f` against central
/// differences with the given step, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor4], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    grad_check_at(f, inputs, step, &all)
}

/// Like [`grad_check`] but only probes the listed (input, element) positions.
pub fn grad_check_at<F>(f: F, inputs: &[Tensor4], step: f64, positions: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval_scalar(&f, inputs)?;
    let grads = tape.backward(out, None)?;
    let analytic: Vec<Option<Tensor4>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &(k, i) in positions {
        let orig = probe[k].data()[i];
        probe[k].data_mut()[i] = orig + step;
        let plus = scalar(&f, &probe)?;
        probe[k].data_mut()[i] = orig - step;
        let minus = scalar(&f, &probe)?;
        probe[k].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst = (k, i);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn scalar<F>(f: &F, inputs: &[Tensor4]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = eval_scalar(f, inputs)?;
    Ok(tape.value(out)?.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ConvGeometry, Shape4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_conv_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor4::random_uniform(Shape4::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let w = Tensor4::random_uniform(Shape4::new(5, 3, 1, 1), -1.0, 1.0, &mut rng);
        let r = Tensor4::random_uniform(Shape4::new(2, 5, 4, 4), -1.0, 1.0, &mut rng);
        let rep = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvGeometry::default())?;
                t.weighted_sum(y, &r)
            },
            &[x, w],
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }

    #[test]
    fn rejects_non_scalar_closure() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        assert!(grad_check(|t, v| t.relu(v[0]), &[x], 1e-4).is_err());
    }
}
