use super::ops::{self, BatchStats, ConvGeometry};
use super::{Shape4, Tensor4};
use crate::error::{dim_err, Error, Result};
use std::sync::atomic::{AtomicU32, Ordering};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Reverse rule of one recorded operation. Returns one optional gradient per
/// input, in input order.
pub(crate) trait BackwardOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>>;
}

pub(crate) struct BackwardCtx<'a> {
    nodes: &'a [Node],
    inputs: &'a [usize],
    output: &'a Tensor4,
}

impl BackwardCtx<'_> {
    pub fn input(&self, k: usize) -> &Tensor4 {
        &self.nodes[self.inputs[k]].value
    }

    pub fn needs(&self, k: usize) -> bool {
        self.nodes[self.inputs[k]].requires_grad
    }

    pub fn output(&self) -> &Tensor4 {
        self.output
    }
}

struct Node {
    value: Tensor4,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
}

/// Append-only record of a forward pass. Node order is a topological order,
/// so the reverse sweep is a single backwards scan.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that requested them, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor4> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor4> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::TapeIntegrity(format!(
                "variable {v:?} is not recorded on tape {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Vec::new(), None)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor4> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor4,
        requires_grad: bool,
        inputs: Vec<usize>,
        op: Option<Box<dyn BackwardOp>>,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            op,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Records `value` as the output of `op` applied to `inputs`.
    pub(crate) fn record(
        &mut self,
        value: Tensor4,
        inputs: &[Var],
        op: impl BackwardOp + 'static,
    ) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let rg = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let op: Option<Box<dyn BackwardOp>> = if rg { Some(Box::new(op)) } else { None };
        Ok(self.push(value, rg, idx, op))
    }

    /// Copy of `v` that does not propagate gradients.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xv = self.value(x)?;
        let wv = self.value(weight)?;
        let bv = match bias {
            Some(b) => Some(self.value(b)?.data()),
            None => None,
        };
        let y = ops::conv2d_forward(xv, wv, bv, &geom)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(y, &inputs, ConvOp { geom })
    }

    /// Training-mode batch normalization; `gamma` and `beta` are `(1, c, 1, 1)`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (y, stats) = ops::bn_train_forward(self.value(x)?, self.value(gamma)?.data(), self.value(beta)?.data(), eps)?;
        let out = self.record(y, &[x, gamma, beta], BnTrainOp { stats: stats.clone() })?;
        Ok((out, stats))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let y = ops::bn_eval_forward(self.value(x)?, self.value(gamma)?.data(), self.value(beta)?.data(), mean, var, eps)?;
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.record(
            y,
            &[x, gamma, beta],
            BnEvalOp {
                mean: mean.to_vec(),
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x)?);
        self.record(y, &[x], ReluOp)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a)?.add(self.value(b)?)?;
        self.record(y, &[a, b], AddOp)
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let in_shape = xv.shape();
        let (y, argmax) = ops::max_pool2d_with_argmax(xv)?;
        self.record(y, &[x], PoolOp { in_shape, argmax })
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let in_shape = xv.shape();
        let y = ops::upsample_bilinear(xv, factor)?;
        self.record(y, &[x], UpsampleOp { in_shape, factor })
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let in_shape = xv.shape();
        let y = ops::channel_slice(xv, start, end)?;
        self.record(y, &[x], SliceOp { in_shape, start })
    }

    pub fn channel_split(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.value(x)?.shape().c;
        if c % 2 != 0 || c == 0 {
            return Err(Error::Config(format!("channel split needs an even channel count, got {c}")));
        }
        Ok((self.channel_slice(x, 0, c / 2)?, self.channel_slice(x, c / 2, c)?))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let channels = vals.iter().map(|v| v.shape().c).collect();
        let y = ops::channel_concat(&vals)?;
        self.record(y, parts, ConcatOp { channels })
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let perm = ops::shuffle_permutation(xv.shape().c, groups)?;
        let y = ops::permute_channels(xv, &perm);
        self.record(y, &[x], PermuteOp { src_of: perm })
    }

    /// Sum of all elements as a `1x1x1x1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let shape = xv.shape();
        let y = Tensor4::full(Shape4::new(1, 1, 1, 1), xv.sum());
        self.record(y, &[x], SumOp { shape })
    }

    /// `sum(x * weights)` with constant weights; used to probe gradients in
    /// random directions.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor4) -> Result<Var> {
        let xv = self.value(x)?;
        xv.expect_shape(weights.shape())?;
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let y = Tensor4::full(Shape4::new(1, 1, 1, 1), s);
        self.record(y, &[x], WeightedSumOp { weights: weights.clone() })
    }

    /// Reverse sweep from `root`. `seed` defaults to ones and must match the
    /// root's shape. Gradients are returned for leaves that require them.
    pub fn backward(&self, root: Var, seed: Option<Tensor4>) -> Result<Gradients> {
        let r = self.check(root)?;
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.nodes[r].value.shape() {
                    return dim_err(format!(
                        "seed shape {} does not match output shape {}",
                        s.shape(),
                        self.nodes[r].value.shape()
                    ));
                }
                s
            }
            None => Tensor4::full(self.nodes[r].value.shape(), 1.0),
        };
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[r] = Some(seed);
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            for &inp in &node.inputs {
                if inp >= i {
                    return Err(Error::TapeIntegrity(format!(
                        "node {i} consumes node {inp} recorded after it"
                    )));
                }
            }
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                inputs: &node.inputs,
                output: &node.value,
            };
            let input_grads = op.backward(&ctx, &g)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::TapeIntegrity(format!(
                    "node {i} returned {} gradients for {} inputs",
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        // Only leaves keep their gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn channel_vec(v: Vec<f64>) -> Tensor4 {
    let c = v.len();
    Tensor4::from_vec(Shape4::new(1, c, 1, 1), v).expect("channel vector")
}

struct ConvOp {
    geom: ConvGeometry,
}

impl BackwardOp for ConvOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let has_bias = ctx.inputs.len() == 3;
        let need = (ctx.needs(0), ctx.needs(1), has_bias && ctx.needs(2));
        let g = ops::conv2d_backward(ctx.input(0), ctx.input(1), grad, &self.geom, need);
        let mut out = vec![g.input, g.weight];
        if has_bias {
            out.push(g.bias.map(channel_vec));
        }
        Ok(out)
    }
}

struct BnTrainOp {
    stats: BatchStats,
}

impl BackwardOp for BnTrainOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let (gx, gg, gb) = ops::bn_train_backward(ctx.input(0), ctx.input(1).data(), &self.stats, grad);
        Ok(vec![Some(gx), Some(channel_vec(gg)), Some(channel_vec(gb))])
    }
}

struct BnEvalOp {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BackwardOp for BnEvalOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let x = ctx.input(0);
        let gamma = ctx.input(1).data();
        let s = x.shape();
        let mut gx = Vec::with_capacity(s.numel());
        let mut gg = vec![0.0; s.c];
        let mut gb = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let (m, is) = (self.mean[c], self.inv_std[c]);
                for (&v, &g) in x.plane(n, c).iter().zip(grad.plane(n, c)) {
                    gx.push(gamma[c] * is * g);
                    gg[c] += g * (v - m) * is;
                    gb[c] += g;
                }
            }
        }
        Ok(vec![
            Some(Tensor4::from_vec(s, gx)?),
            Some(channel_vec(gg)),
            Some(channel_vec(gb)),
        ])
    }
}

struct ReluOp;

impl BackwardOp for ReluOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(ops::relu_backward(ctx.output(), grad))])
    }
}

struct AddOp;

impl BackwardOp for AddOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![
            ctx.needs(0).then(|| grad.clone()),
            ctx.needs(1).then(|| grad.clone()),
        ])
    }
}

struct PoolOp {
    in_shape: Shape4,
    argmax: Vec<u32>,
}

impl BackwardOp for PoolOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(ops::max_pool2d_backward(self.in_shape, &self.argmax, grad))])
    }
}

struct UpsampleOp {
    in_shape: Shape4,
    factor: usize,
}

impl BackwardOp for UpsampleOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(ops::upsample_bilinear_backward(self.in_shape, self.factor, grad))])
    }
}

struct SliceOp {
    in_shape: Shape4,
    start: usize,
}

impl BackwardOp for SliceOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let s = self.in_shape;
        let p = s.plane();
        let gc = grad.shape().c;
        let mut gx = Tensor4::zeros(s);
        let data = gx.data_mut();
        for n in 0..s.n {
            let dst = (n * s.c + self.start) * p;
            data[dst..dst + gc * p].copy_from_slice(grad.sample(n));
        }
        Ok(vec![Some(gx)])
    }
}

struct ConcatOp {
    channels: Vec<usize>,
}

impl BackwardOp for ConcatOp {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (k, &c) in self.channels.iter().enumerate() {
            out.push(if ctx.needs(k) {
                Some(ops::channel_slice(grad, start, start + c)?)
            } else {
                None
            });
            start += c;
        }
        Ok(out)
    }
}

struct PermuteOp {
    src_of: Vec<usize>,
}

impl BackwardOp for PermuteOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        let mut inverse = vec![0; self.src_of.len()];
        for (dst, &src) in self.src_of.iter().enumerate() {
            inverse[src] = dst;
        }
        Ok(vec![Some(ops::permute_channels(grad, &inverse))])
    }
}

struct SumOp {
    shape: Shape4,
}

impl BackwardOp for SumOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(Tensor4::full(self.shape, grad.data()[0]))])
    }
}

struct WeightedSumOp {
    weights: Tensor4,
}

impl BackwardOp for WeightedSumOp {
    fn backward(&self, _: &BackwardCtx<'_>, grad: &Tensor4) -> Result<Vec<Option<Tensor4>>> {
        Ok(vec![Some(self.weights.scale(grad.data()[0]))])
    }
}
