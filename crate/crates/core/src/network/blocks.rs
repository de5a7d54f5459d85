//! Factorized convolution block and downsampling unit as standalone ops.

use crate::error::{config_err, Result};
use crate::tensor::{BatchStats, ConvGeometry, NormParams, Shape4, Tape, Tensor4, Var, BN_EPSILON};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub geom: ConvGeometry,
}

/// Affine terms of a norm; `running` holds (mean, var) for inference mode,
/// `None` normalizes with batch statistics.
#[derive(Clone, Copy, Debug)]
pub struct NormVars<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub running: Option<(&'a [f64], &'a [f64])>,
}

pub(crate) fn apply_conv(tape: &mut Tape, x: Var, c: &ConvVars) -> Result<Var> {
    tape.conv2d(x, c.weight, Some(c.bias), c.geom)
}

pub(crate) fn apply_norm(tape: &mut Tape, x: Var, n: &NormVars<'_>) -> Result<(Var, Option<BatchStats>)> {
    match n.running {
        None => {
            let (y, st) = tape.batch_norm_train(x, n.gamma, n.beta, BN_EPSILON)?;
            Ok((y, Some(st)))
        }
        Some((mean, var)) => Ok((tape.batch_norm_eval(x, n.gamma, n.beta, mean, var, BN_EPSILON)?, None)),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FcbVars<'a> {
    /// `[half][3x1, 1x3]`
    pub halves: [[ConvVars; 2]; 2],
    pub half_norms: [NormVars<'a>; 2],
    pub depthwise: ConvVars,
    pub depthwise_norm: NormVars<'a>,
    pub pointwise: ConvVars,
    pub pointwise_norm: NormVars<'a>,
}

/// Factorized block: split channels; each half 3x1 conv, relu, 1x3 conv,
/// norm, relu; concat; depthwise dilated 3x3, norm, relu; pointwise 1x1,
/// norm; add the input; relu; shuffle with 2 groups.
///
/// Batch statistics come back in the order half 0, half 1, depthwise,
/// pointwise.
pub fn fcb_block(tape: &mut Tape, x: Var, v: &FcbVars<'_>) -> Result<(Var, [Option<BatchStats>; 4])> {
    let (a, b) = tape.channel_split(x)?;
    let mut outs = [a, b];
    let mut stats: [Option<BatchStats>; 4] = Default::default();
    for (k, h) in outs.iter_mut().enumerate() {
        let t = apply_conv(tape, *h, &v.halves[k][0])?;
        let t = tape.relu(t)?;
        let t = apply_conv(tape, t, &v.halves[k][1])?;
        let (t, st) = apply_norm(tape, t, &v.half_norms[k])?;
        stats[k] = st;
        *h = tape.relu(t)?;
    }
    let cat = tape.concat(&outs)?;
    let d = apply_conv(tape, cat, &v.depthwise)?;
    let (d, st) = apply_norm(tape, d, &v.depthwise_norm)?;
    stats[2] = st;
    let d = tape.relu(d)?;
    let p = apply_conv(tape, d, &v.pointwise)?;
    let (p, st) = apply_norm(tape, p, &v.pointwise_norm)?;
    stats[3] = st;
    let r = tape.add(p, x)?;
    let r = tape.relu(r)?;
    Ok((tape.channel_shuffle(r, 2)?, stats))
}

/// Stride-2 3x3 conv producing the extra channels, concatenated with the
/// 2x2 max pool of the input (before the norm).
pub fn downsample_features(tape: &mut Tape, x: Var, conv: &ConvVars) -> Result<Var> {
    let a = apply_conv(tape, x, conv)?;
    let p = tape.max_pool2d(x)?;
    tape.concat(&[a, p])
}

pub fn downsample_block(tape: &mut Tape, x: Var, conv: &ConvVars, norm: &NormVars<'_>) -> Result<(Var, Option<BatchStats>)> {
    let cat = downsample_features(tape, x, conv)?;
    let (y, st) = apply_norm(tape, cat, norm)?;
    Ok((tape.relu(y)?, st))
}

/// Owned weights of one factorized block.
#[derive(Clone, Debug)]
pub struct FcbParams {
    pub channels: usize,
    pub dilation: usize,
    /// `[half][3x1, 1x3]` as (weight, bias) with bias `(1, c, 1, 1)`.
    pub halves: [[(Tensor4, Tensor4); 2]; 2],
    pub half_norms: [NormParams; 2],
    pub depthwise: (Tensor4, Tensor4),
    pub depthwise_norm: NormParams,
    pub pointwise: (Tensor4, Tensor4),
    pub pointwise_norm: NormParams,
}

fn he_uniform(shape: Shape4, rng: &mut impl Rng) -> Tensor4 {
    let bound = (6.0 / (shape.c * shape.h * shape.w) as f64).sqrt();
    Tensor4::random_uniform(shape, -bound, bound, rng)
}

impl FcbParams {
    /// He-uniform weights, small random biases, identity norms.
    pub fn random(channels: usize, dilation: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return config_err(format!("factorized block needs an even channel count, got {channels}"));
        }
        if dilation == 0 {
            return config_err("dilation must be at least 1");
        }
        let h = channels / 2;
        let conv = |shape: Shape4, rng: &mut _| {
            let w = he_uniform(shape, rng);
            let b = Tensor4::random_uniform(Shape4::new(1, shape.n, 1, 1), -0.1, 0.1, rng);
            (w, b)
        };
        let halves = [
            [conv(Shape4::new(h, h, 3, 1), rng), conv(Shape4::new(h, h, 1, 3), rng)],
            [conv(Shape4::new(h, h, 3, 1), rng), conv(Shape4::new(h, h, 1, 3), rng)],
        ];
        let depthwise = conv(Shape4::new(channels, 1, 3, 3), rng);
        let pointwise = conv(Shape4::new(channels, channels, 1, 1), rng);
        Ok(Self {
            channels,
            dilation,
            halves,
            half_norms: [NormParams::identity(h), NormParams::identity(h)],
            depthwise,
            depthwise_norm: NormParams::identity(channels),
            pointwise,
            pointwise_norm: NormParams::identity(channels),
        })
    }

    /// Learnable tensors in a fixed order: per half (3x1 w, b, 1x3 w, b,
    /// gamma, beta), depthwise (w, b, gamma, beta), pointwise (w, b, gamma, beta).
    pub fn tensors(&self) -> Vec<Tensor4> {
        let chan = |v: &[f64]| Tensor4::from_vec(Shape4::new(1, v.len(), 1, 1), v.to_vec()).expect("channel vector");
        let mut out = Vec::with_capacity(20);
        for k in 0..2 {
            for (w, b) in &self.halves[k] {
                out.push(w.clone());
                out.push(b.clone());
            }
            out.push(chan(&self.half_norms[k].gamma));
            out.push(chan(&self.half_norms[k].beta));
        }
        for ((w, b), n) in [(&self.depthwise, &self.depthwise_norm), (&self.pointwise, &self.pointwise_norm)] {
            out.push(w.clone());
            out.push(b.clone());
            out.push(chan(&n.gamma));
            out.push(chan(&n.beta));
        }
        out
    }

    /// Tape handles for vars laid out as in [`FcbParams::tensors`].
    pub fn vars<'a>(&'a self, v: &[Var], training: bool) -> Result<FcbVars<'a>> {
        if v.len() != 20 {
            return config_err(format!("factorized block takes 20 tensors, got {}", v.len()));
        }
        let norm = |g: Var, b: Var, p: &'a NormParams| NormVars {
            gamma: g,
            beta: b,
            running: (!training).then(|| (p.running_mean.as_slice(), p.running_var.as_slice())),
        };
        let d = self.dilation;
        let same = |k: (usize, usize), dil: usize, groups: usize| ConvGeometry::same(k, (dil, dil), groups);
        let cv = |w: Var, b: Var, geom: ConvGeometry| ConvVars { weight: w, bias: b, geom };
        Ok(FcbVars {
            halves: [
                [cv(v[0], v[1], same((3, 1), 1, 1)), cv(v[2], v[3], same((1, 3), 1, 1))],
                [cv(v[6], v[7], same((3, 1), 1, 1)), cv(v[8], v[9], same((1, 3), 1, 1))],
            ],
            half_norms: [norm(v[4], v[5], &self.half_norms[0]), norm(v[10], v[11], &self.half_norms[1])],
            depthwise: cv(v[12], v[13], same((3, 3), d, self.channels)),
            depthwise_norm: norm(v[14], v[15], &self.depthwise_norm),
            pointwise: cv(v[16], v[17], ConvGeometry::default()),
            pointwise_norm: norm(v[18], v[19], &self.pointwise_norm),
        })
    }
}

/// Plain forward pass of one block. Training mode uses batch statistics and
/// does not update the running ones.
pub fn fcb_forward(x: &Tensor4, p: &FcbParams, training: bool) -> Result<Tensor4> {
    if x.shape().c != p.channels {
        return config_err(format!("block expects {} channels, input has {}", p.channels, x.shape().c));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars: Vec<Var> = p.tensors().into_iter().map(|t| tape.constant(t)).collect();
    let fv = p.vars(&vars, training)?;
    let (y, _) = fcb_block(&mut tape, xv, &fv)?;
    Ok(tape.value(y)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{channel_shuffle, relu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_leave_shuffled_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = FcbParams::random(8, 2, &mut rng).unwrap();
        for pair in p.halves.iter_mut().flatten().chain([&mut p.depthwise, &mut p.pointwise]) {
            pair.0 = Tensor4::zeros(pair.0.shape());
            pair.1 = Tensor4::zeros(pair.1.shape());
        }
        let x = Tensor4::random_uniform(Shape4::new(2, 8, 5, 6), -1.0, 1.0, &mut rng);
        let expect = channel_shuffle(&relu(&x), 2).unwrap();
        assert_eq!(fcb_forward(&x, &p, false).unwrap(), expect);
        assert_eq!(fcb_forward(&x, &p, true).unwrap(), expect);
    }

    #[test]
    fn shape_preserved_for_all_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in [1, 2, 5, 9, 17] {
            let p = FcbParams::random(4, r, &mut rng).unwrap();
            let x = Tensor4::random_uniform(Shape4::new(1, 4, 7, 11), -1.0, 1.0, &mut rng);
            assert_eq!(fcb_forward(&x, &p, true).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn odd_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(FcbParams::random(5, 1, &mut rng).is_err());
        let p = FcbParams::random(4, 1, &mut rng).unwrap();
        assert!(fcb_forward(&Tensor4::zeros(Shape4::new(1, 6, 4, 4)), &p, false).is_err());
    }
}
