//! Oracles and gradient-check suites shared by the integration tests.
#![allow(dead_code)]

use lrnnet::attention::{Matrix, Normalizer, RegionGrid, SvnConfig};
use lrnnet::network::{fcb_block, FcbParams};
use lrnnet::tensor::{grad_check, grad_check_at, ConvGeometry, Tape, Var, BN_EPSILON};
use lrnnet::train::IGNORE_INDEX;
use lrnnet::{Result, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Step for whole-block checks: small enough to stay clear of internal relu
/// kinks, large enough that round-off does not swamp small derivatives.
pub const BLOCK_STEP: f64 = 1e-5;
/// A bias feeding a batch-statistics norm cannot change the output, so its
/// true derivative is exactly zero and differences only see round-off. The
/// invariance holds for any shift, so a large step costs no truncation error
/// and pushes that round-off under the 1e-8 floor of the metric.
pub const INERT_STEP: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::random_uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values in `[-1, 1]` with none closer to zero than `gap`.
pub fn uniform_away_from_zero(shape: Shape4, gap: f64, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() >= gap {
            break v;
        }
    })
}

pub fn channel_vec(c: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::random_uniform(Shape4::new(1, c, 1, 1), lo, hi, rng)
}

pub fn random_nonneg(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d / (na * nb)).abs()
}

/// `max |a - b| / max(1, max |b|)`
pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let scale = b.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Reduced attention as an explicit triple loop: for every output channel
/// `c` and query `i`, `Σ_j (Σ_c' q[c'][i] b[c'][j]) b[c][j]`.
pub fn naive_reduced(q: &Matrix, bank: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(bank.rows(), q.cols());
    for c in 0..bank.rows() {
        for i in 0..q.cols() {
            let mut acc = 0.0;
            for j in 0..bank.cols() {
                let mut score = 0.0;
                for cp in 0..q.rows() {
                    score += q.get(cp, i) * bank.get(cp, j);
                }
                acc += score * bank.get(c, j);
            }
            out.set(c, i, acc);
        }
    }
    out
}

/// Generic query-key-value aggregation, one query at a time, scores kept
/// in full before normalizing.
pub fn naive_standard(q: &Matrix, k: &Matrix, v: &Matrix, norm: Normalizer) -> Matrix {
    let mut out = Matrix::zeros(v.rows(), q.cols());
    for i in 0..q.cols() {
        let mut s: Vec<f64> = (0..k.cols())
            .map(|j| (0..q.rows()).map(|c| q.get(c, i) * k.get(c, j)).sum())
            .collect();
        match norm {
            Normalizer::None => {}
            Normalizer::Mean => s.iter_mut().for_each(|x| *x /= k.cols() as f64),
            Normalizer::Softmax => {
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                s = e.iter().map(|x| x / z).collect();
            }
        }
        for c in 0..v.rows() {
            out.set(c, i, (0..k.cols()).map(|j| s[j] * v.get(c, j)).sum());
        }
    }
    out
}

fn scalarize(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y)?.shape();
    let w = Tensor4::random_uniform(shape, -1.0, 1.0, &mut rng(seed ^ 0xA5A5));
    tape.weighted_sum(y, &w)
}

fn check<F>(f: F, inputs: &[Tensor4]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check(f, inputs, FD_STEP)?.max_rel_error)
}

fn positions(inputs: &[Tensor4], which: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    (0..inputs.len())
        .filter(|&k| which(k))
        .flat_map(|k| (0..inputs[k].len()).map(move |i| (k, i)))
        .collect()
}

/// Every input at [`BLOCK_STEP`], except the listed inert ones at [`INERT_STEP`].
fn check_block<F>(f: F, inputs: &[Tensor4], inert: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let live = grad_check_at(&f, inputs, BLOCK_STEP, &positions(inputs, |k| !inert.contains(&k)))?;
    if inert.is_empty() {
        return Ok(live.max_rel_error);
    }
    let still = grad_check_at(&f, inputs, INERT_STEP, &positions(inputs, |k| inert.contains(&k)))?;
    Ok(live.max_rel_error.max(still.max_rel_error))
}

fn conv_case(seed: u64, x: Shape4, w: Shape4, geom: ConvGeometry) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(x, &mut r), uniform(w, &mut r), channel_vec(w.n, -0.5, 0.5, &mut r)];
    check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), geom)?;
            scalarize(t, y, seed)
        },
        &inputs,
    )
}

/// Worst relative error of every differentiable tensor op, by case name.
pub fn op_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(7));
    let same = |k, d, g| ConvGeometry::same(k, d, g);

    out.push(("conv 3x3", conv_case(seed, Shape4::new(2, 3, 5, 5), Shape4::new(4, 3, 3, 3), same((3, 3), (1, 1), 1))?));
    out.push(("conv depthwise dilated", conv_case(seed + 1, Shape4::new(1, 4, 6, 6), Shape4::new(4, 1, 3, 3), same((3, 3), (2, 2), 4))?));
    let strided = ConvGeometry {
        stride: (2, 2),
        padding: (1, 1),
        ..ConvGeometry::default()
    };
    out.push(("conv stride 2", conv_case(seed + 2, Shape4::new(1, 2, 6, 7), Shape4::new(3, 2, 3, 3), strided)?));
    out.push(("conv 3x1 grouped", conv_case(seed + 3, Shape4::new(1, 4, 5, 5), Shape4::new(4, 2, 3, 1), same((3, 1), (1, 1), 2))?));
    out.push(("conv 1x3", conv_case(seed + 4, Shape4::new(1, 2, 4, 5), Shape4::new(2, 2, 1, 3), same((1, 3), (1, 1), 1))?));
    out.push(("conv 1x1", conv_case(seed + 5, Shape4::new(2, 3, 3, 3), Shape4::new(5, 3, 1, 1), ConvGeometry::default())?));

    let bn_in = [
        uniform(Shape4::new(3, 3, 4, 4), &mut r),
        channel_vec(3, 0.5, 1.5, &mut r),
        channel_vec(3, -0.5, 0.5, &mut r),
    ];
    out.push((
        "batch norm (batch statistics)",
        check(
            |t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], BN_EPSILON)?;
                scalarize(t, y, seed)
            },
            &bn_in,
        )?,
    ));
    let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.2..2.0)).collect();
    out.push((
        "batch norm (running statistics)",
        check(
            |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPSILON)?;
                scalarize(t, y, seed)
            },
            &bn_in,
        )?,
    ));

    let x = uniform_away_from_zero(Shape4::new(2, 3, 4, 5), 10.0 * FD_STEP, &mut r);
    out.push((
        "relu",
        check(
            |t, v| {
                let y = t.relu(v[0])?;
                scalarize(t, y, seed)
            },
            &[x],
        )?,
    ));
    let ab = [uniform(Shape4::new(2, 3, 3, 3), &mut r), uniform(Shape4::new(2, 3, 3, 3), &mut r)];
    out.push((
        "add",
        check(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                scalarize(t, y, seed)
            },
            &ab,
        )?,
    ));
    for (name, shape) in [("max pool", Shape4::new(1, 2, 6, 6)), ("max pool odd size", Shape4::new(2, 1, 5, 7))] {
        let x = uniform(shape, &mut r);
        out.push((
            name,
            check(
                |t, v| {
                    let y = t.max_pool2d(v[0])?;
                    scalarize(t, y, seed)
                },
                &[x],
            )?,
        ));
    }
    for (name, factor) in [("bilinear x2", 2), ("bilinear x8", 8)] {
        let x = uniform(Shape4::new(1, 2, 3, 4), &mut r);
        out.push((
            name,
            check(
                |t, v| {
                    let y = t.upsample_bilinear(v[0], factor)?;
                    scalarize(t, y, seed)
                },
                &[x],
            )?,
        ));
    }
    let x = uniform(Shape4::new(2, 6, 3, 2), &mut r);
    out.push((
        "channel slice",
        check(
            |t, v| {
                let y = t.channel_slice(v[0], 1, 4)?;
                scalarize(t, y, seed)
            },
            std::slice::from_ref(&x),
        )?,
    ));
    out.push((
        "split and concat",
        check(
            |t, v| {
                let (a, b) = t.channel_split(v[0])?;
                let a = t.relu(a)?;
                let y = t.concat(&[b, a, b])?;
                scalarize(t, y, seed)
            },
            &[uniform_away_from_zero(Shape4::new(2, 6, 3, 2), 10.0 * FD_STEP, &mut r)],
        )?,
    ));
    for (name, groups) in [("shuffle 2 groups", 2), ("shuffle 3 groups", 3)] {
        out.push((
            name,
            check(
                |t, v| {
                    let y = t.channel_shuffle(v[0], groups)?;
                    scalarize(t, y, seed)
                },
                std::slice::from_ref(&x),
            )?,
        ));
    }
    out.push(("sum", check(|t, v| t.sum(v[0]), std::slice::from_ref(&x))?));

    let logits = Tensor4::random_uniform(Shape4::new(2, 3, 3, 3), -2.0, 2.0, &mut r);
    let labels: Vec<u8> = (0..18)
        .map(|k| if k % 7 == 3 { IGNORE_INDEX } else { r.gen_range(0..3) })
        .collect();
    out.push(("cross entropy", check(|t, v| t.cross_entropy(v[0], &labels, IGNORE_INDEX), &[logits])?));
    Ok(out)
}

/// Worst relative error over the input and all 20 learnable tensors of one
/// factorized block, with batch statistics and with running statistics.
pub fn fcb_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let dilation = [1, 2, 5][seed as usize % 3];
    let mut p = FcbParams::random(4, dilation, &mut r)?;
    for n in p.half_norms.iter_mut().chain([&mut p.depthwise_norm, &mut p.pointwise_norm]) {
        n.gamma.iter_mut().for_each(|g| *g = r.gen_range(0.5..1.5));
        n.beta.iter_mut().for_each(|b| *b = r.gen_range(-0.3..0.3));
        n.running_mean.iter_mut().for_each(|m| *m = r.gen_range(-0.3..0.3));
        n.running_var.iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
    }
    let mut inputs = vec![uniform(Shape4::new(2, 4, 5, 6), &mut r)];
    inputs.extend(p.tensors());
    // biases of the 1x3, depthwise and pointwise convs each feed a norm
    let inert = [4, 10, 14, 18];
    let mut out = Vec::new();
    for (name, training) in [("batch statistics", true), ("running statistics", false)] {
        let e = check_block(
            |t, v| {
                let fv = p.vars(&v[1..], training)?;
                let (y, _) = fcb_block(t, v[0], &fv)?;
                scalarize(t, y, seed)
            },
            &inputs,
            if training { &inert } else { &[] },
        )?;
        out.push((name, e));
    }
    Ok(out)
}

/// Worst relative errors of the key extraction op, the reduced attention op
/// and the whole block with its bottleneck norm in both modes.
pub fn svn_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let cfg = SvnConfig::new(4, vec![RegionGrid::new(2, 2), RegionGrid::new(1, 1)]);
    let mut out = Vec::new();

    let f = uniform(Shape4::new(2, 4, 4, 6), &mut r);
    out.push((
        "key extraction",
        check(
            |t, v| {
                let b = t.svn_keys(v[0], &cfg)?;
                scalarize(t, b, seed)
            },
            std::slice::from_ref(&f),
        )?,
    ));
    let bank = uniform(Shape4::new(2, 4, 1, 5), &mut r);
    out.push((
        "reduced attention",
        check(
            |t, v| {
                let y = t.reduced_nonlocal(v[0], v[1])?;
                scalarize(t, y, seed)
            },
            &[f.clone(), bank],
        )?,
    ));

    let inputs = [
        uniform(Shape4::new(2, 6, 4, 4), &mut r),
        Tensor4::random_uniform(Shape4::new(4, 6, 1, 1), -0.8, 0.8, &mut r),
        channel_vec(4, -0.2, 0.2, &mut r),
        channel_vec(4, 0.5, 1.5, &mut r),
        channel_vec(4, 0.0, 0.5, &mut r),
        Tensor4::random_uniform(Shape4::new(6, 4, 1, 1), -0.8, 0.8, &mut r),
        channel_vec(6, -0.2, 0.2, &mut r),
    ];
    let mean: Vec<f64> = (0..4).map(|_| r.gen_range(-0.3..0.3)).collect();
    let var: Vec<f64> = (0..4).map(|_| r.gen_range(0.5..2.0)).collect();
    for (name, training) in [("block, batch statistics", true), ("block, running statistics", false)] {
        let e = check_block(
            |t, v| {
                let vars = lrnnet::attention::SvnVars {
                    conv1_weight: v[1],
                    conv1_bias: v[2],
                    norm: Some((v[3], v[4], &mean, &var)),
                    conv2_weight: v[5],
                    conv2_bias: v[6],
                };
                let (y, _) = lrnnet::attention::svn_block(t, v[0], &vars, &cfg, training, BN_EPSILON)?;
                scalarize(t, y, seed)
            },
            &inputs,
            // the bottleneck conv bias feeds the norm
            if training { &[2] } else { &[] },
        )?;
        out.push((name, e));
    }
    Ok(out)
}
