use super::blocks::{apply_norm, downsample_block, fcb_block, ConvVars, FcbVars, NormVars};
use super::spec::NetworkSpec;
use crate::attention::{svn_block, SvnConfig, SvnVars};
use crate::error::{config_err, Result};
use crate::tensor::{BatchStats, ConvGeometry, Shape4, Tape, Tensor4, Var, BN_EPSILON, BN_MOMENTUM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named learnable tensor. Biases, gammas and betas are `(1, c, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
}

/// Running statistics of one batch-norm layer (not learnable).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    geom: ConvGeometry,
}

#[derive(Clone, Copy, Debug)]
struct NormSlot {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    Downsample {
        name: String,
        conv: ConvSlot,
        norm: NormSlot,
    },
    Factorized {
        name: String,
        /// `[half][3x1, 1x3]`
        halves: [[ConvSlot; 2]; 2],
        half_norms: [NormSlot; 2],
        depthwise: ConvSlot,
        depthwise_norm: NormSlot,
        pointwise: ConvSlot,
        pointwise_norm: NormSlot,
    },
    Svn {
        name: String,
        conv1: ConvSlot,
        norm: Option<NormSlot>,
        conv2: ConvSlot,
        cfg: SvnConfig,
    },
    Classifier {
        name: String,
        conv: ConvSlot,
        norm: NormSlot,
        head: ConvSlot,
        upsample: usize,
    },
}

impl Layer {
    fn name(&self) -> &str {
        match self {
            Layer::Downsample { name, .. }
            | Layer::Factorized { name, .. }
            | Layer::Svn { name, .. }
            | Layer::Classifier { name, .. } => name,
        }
    }
}

/// One primitive of a layer, with the sizes needed to cost it.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanOp {
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        groups: usize,
        bias: bool,
        output: Shape4,
    },
    Norm { name: String, channels: usize, elems: usize },
    Relu { elems: usize },
    Add { elems: usize },
    MaxPool { out_elems: usize },
    Upsample { out_elems: usize },
    Attention {
        batch: usize,
        channels: usize,
        pixels: usize,
        regions: usize,
        scales: usize,
        power_iters: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub input: Shape4,
    pub output: Shape4,
    pub ops: Vec<PlanOp>,
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Tape handle of each parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics of each norm layer (training mode only).
    pub batch_stats: Vec<Option<BatchStats>>,
    /// Output shape after each layer.
    pub trace: Vec<(String, Shape4)>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    stats: Vec<RunningStats>,
    layers: Vec<Layer>,
}

struct Builder {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
    rng: ChaCha8Rng,
}

/// Rounds through single precision so checkpoints round-trip exactly.
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor4) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: (usize, usize), geom: ConvGeometry) -> ConvSlot {
        let fan_in = (c_in / geom.groups) * kernel.0 * kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = Shape4::new(c_out, c_in / geom.groups, kernel.0, kernel.1);
        let rng = &mut self.rng;
        let w = Tensor4::from_fn(shape, |_, _, _, _| round_f32(rng.gen_range(-bound..bound)));
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor4::zeros(Shape4::new(1, c_out, 1, 1)));
        ConvSlot { weight, bias, geom }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormSlot {
        let gamma = self.push(format!("{name}.gamma"), Tensor4::full(Shape4::new(1, c, 1, 1), 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor4::zeros(Shape4::new(1, c, 1, 1)));
        self.stats.push(RunningStats {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        NormSlot {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn factorized(&mut self, name: &str, c: usize, dilation: usize) -> Layer {
        let h = c / 2;
        let conv_pair = |b: &mut Builder, half: usize| {
            [
                b.conv(&format!("{name}.half{half}.conv3x1"), h, h, (3, 1), ConvGeometry::same((3, 1), (1, 1), 1)),
                b.conv(&format!("{name}.half{half}.conv1x3"), h, h, (1, 3), ConvGeometry::same((1, 3), (1, 1), 1)),
            ]
        };
        let h0 = conv_pair(self, 0);
        let n0 = self.norm(&format!("{name}.half0.norm"), h);
        let h1 = conv_pair(self, 1);
        let n1 = self.norm(&format!("{name}.half1.norm"), h);
        let depthwise = self.conv(
            &format!("{name}.depthwise"),
            c,
            c,
            (3, 3),
            ConvGeometry::same((3, 3), (dilation, dilation), c),
        );
        let depthwise_norm = self.norm(&format!("{name}.depthwise_norm"), c);
        let pointwise = self.conv(&format!("{name}.pointwise"), c, c, (1, 1), ConvGeometry::default());
        let pointwise_norm = self.norm(&format!("{name}.pointwise_norm"), c);
        Layer::Factorized {
            name: name.to_string(),
            halves: [h0, h1],
            half_norms: [n0, n1],
            depthwise,
            depthwise_norm,
            pointwise,
            pointwise_norm,
        }
    }
}

fn stride2() -> ConvGeometry {
    ConvGeometry {
        stride: (2, 2),
        padding: (1, 1),
        ..ConvGeometry::default()
    }
}

/// Builds the network described by `spec` with He-uniform weights drawn
/// from `seed`, zero biases and identity norms.
pub fn build_lrnnet(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        stats: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut layers = Vec::new();
    let mut c_in = spec.input_channels;
    let stages = spec.stages();
    for (s, (&c, &blocks)) in spec.stage_channels.iter().zip(&spec.blocks_per_stage).enumerate() {
        let name = format!("down{}", s + 1);
        let conv = b.conv(&format!("{name}.conv"), c_in, c - c_in, (3, 3), stride2());
        let norm = b.norm(&format!("{name}.norm"), c);
        layers.push(Layer::Downsample { name, conv, norm });
        for k in 0..blocks {
            let dilation = if s + 1 == stages { spec.stage3_dilations[k] } else { 1 };
            layers.push(b.factorized(&format!("stage{}.block{k}", s + 1), c, dilation));
        }
        c_in = c;
    }
    if let Some(cfg) = &spec.svn {
        let cb = cfg.bottleneck_channels;
        let conv1 = b.conv("svn.conv1", c_in, cb, (1, 1), ConvGeometry::default());
        let norm = cfg.bottleneck_norm.then(|| b.norm("svn.norm", cb));
        let conv2 = b.conv("svn.conv2", cb, c_in, (1, 1), ConvGeometry::default());
        layers.push(Layer::Svn {
            name: "svn".into(),
            conv1,
            norm,
            conv2,
            cfg: cfg.clone(),
        });
    }
    let cc = spec.classifier_channels;
    let conv = b.conv("classifier.conv", c_in, cc, (3, 3), ConvGeometry::same((3, 3), (1, 1), 1));
    let norm = b.norm("classifier.norm", cc);
    let head = b.conv("classifier.head", cc, spec.num_classes, (1, 1), ConvGeometry::default());
    layers.push(Layer::Classifier {
        name: "classifier".into(),
        conv,
        norm,
        head,
        upsample: spec.output_stride(),
    });
    Ok(Network {
        spec: spec.clone(),
        params: b.params,
        stats: b.stats,
        layers,
    })
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: &'a [Var],
    net: &'a Network,
    training: bool,
    batch_stats: Vec<Option<BatchStats>>,
}

impl<'a> Ctx<'a> {
    fn conv(&mut self, x: Var, c: ConvSlot) -> Result<Var> {
        self.tape.conv2d(x, self.vars[c.weight], Some(self.vars[c.bias]), c.geom)
    }

    fn norm(&mut self, x: Var, n: NormSlot) -> Result<Var> {
        let nv = self.norm_vars(n);
        let (y, st) = apply_norm(self.tape, x, &nv)?;
        self.store(n, st);
        Ok(y)
    }

    fn conv_vars(&self, c: ConvSlot) -> ConvVars {
        ConvVars {
            weight: self.vars[c.weight],
            bias: self.vars[c.bias],
            geom: c.geom,
        }
    }

    fn norm_vars(&self, n: NormSlot) -> NormVars<'a> {
        let rs = &self.net.stats[n.stats];
        NormVars {
            gamma: self.vars[n.gamma],
            beta: self.vars[n.beta],
            running: (!self.training).then(|| (rs.mean.as_slice(), rs.var.as_slice())),
        }
    }

    fn store(&mut self, n: NormSlot, st: Option<BatchStats>) {
        if st.is_some() {
            self.batch_stats[n.stats] = st;
        }
    }

    fn layer(&mut self, x: Var, layer: &Layer) -> Result<Var> {
        match layer {
            Layer::Downsample { conv, norm, .. } => {
                let cv = self.conv_vars(*conv);
                let nv = self.norm_vars(*norm);
                let (y, st) = downsample_block(self.tape, x, &cv, &nv)?;
                self.store(*norm, st);
                Ok(y)
            }
            Layer::Factorized {
                halves,
                half_norms,
                depthwise,
                depthwise_norm,
                pointwise,
                pointwise_norm,
                ..
            } => {
                let v = FcbVars {
                    halves: halves.map(|pair| pair.map(|c| self.conv_vars(c))),
                    half_norms: half_norms.map(|n| self.norm_vars(n)),
                    depthwise: self.conv_vars(*depthwise),
                    depthwise_norm: self.norm_vars(*depthwise_norm),
                    pointwise: self.conv_vars(*pointwise),
                    pointwise_norm: self.norm_vars(*pointwise_norm),
                };
                let (y, stats) = fcb_block(self.tape, x, &v)?;
                let slots = [half_norms[0], half_norms[1], *depthwise_norm, *pointwise_norm];
                for (n, st) in slots.into_iter().zip(stats) {
                    self.store(n, st);
                }
                Ok(y)
            }
            Layer::Svn {
                conv1, norm, conv2, cfg, ..
            } => {
                let net = self.net;
                let norm_vars = norm.map(|n| {
                    let rs = &net.stats[n.stats];
                    (self.vars[n.gamma], self.vars[n.beta], rs.mean.as_slice(), rs.var.as_slice())
                });
                let vars = SvnVars {
                    conv1_weight: self.vars[conv1.weight],
                    conv1_bias: self.vars[conv1.bias],
                    norm: norm_vars,
                    conv2_weight: self.vars[conv2.weight],
                    conv2_bias: self.vars[conv2.bias],
                };
                let (y, st) = svn_block(self.tape, x, &vars, cfg, self.training, BN_EPSILON)?;
                if let (Some(n), Some(st)) = (norm, st) {
                    self.batch_stats[n.stats] = Some(st);
                }
                Ok(y)
            }
            Layer::Classifier {
                conv, norm, head, upsample, ..
            } => {
                let t = self.conv(x, *conv)?;
                let t = self.norm(t, *norm)?;
                let t = self.tape.relu(t)?;
                let t = self.conv(t, *head)?;
                self.tape.upsample_bilinear(t, *upsample)
            }
        }
    }
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Learnable scalar count (conv weights, biases, norm affine terms).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(Layer::name).collect()
    }

    pub fn check_input(&self, s: Shape4) -> Result<()> {
        let stride = self.spec.output_stride();
        if s.c != self.spec.input_channels {
            return config_err(format!("expected {} input channels, got {}", self.spec.input_channels, s.c));
        }
        if s.h == 0 || s.w == 0 || s.h % stride != 0 || s.w % stride != 0 {
            return config_err(format!("input {}x{} is not divisible by {stride}", s.h, s.w));
        }
        Ok(())
    }

    /// Records a forward pass of `x` on `tape`. Parameters become leaves that
    /// require gradients when `trainable`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, training: bool, trainable: bool) -> Result<ForwardPass> {
        self.check_input(tape.value(x)?.shape())?;
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            net: self,
            training,
            batch_stats: vec![None; self.stats.len()],
        };
        let mut h = x;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = ctx.layer(h, layer)?;
            trace.push((layer.name().to_string(), ctx.tape.value(h)?.shape()));
        }
        let batch_stats = ctx.batch_stats;
        Ok(ForwardPass {
            logits: h,
            params: vars,
            batch_stats,
            trace,
        })
    }

    /// Momentum update of the running statistics from one training pass.
    pub fn update_running_stats(&mut self, batch_stats: &[Option<BatchStats>]) {
        for (rs, st) in self.stats.iter_mut().zip(batch_stats) {
            if let Some(st) = st {
                st.update_running(&mut rs.mean, &mut rs.var, BN_MOMENTUM);
            }
        }
    }

    /// Per-layer shapes and primitive sizes for an input of shape `input`,
    /// derived without running the network.
    pub fn plan(&self, input: Shape4) -> Result<Vec<LayerPlan>> {
        self.check_input(input)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut s = input;
        let conv_op = |p: &[Param], name: &str, c: ConvSlot, x: Shape4| -> Result<(PlanOp, Shape4)> {
            let w = p[c.weight].value.shape();
            let (oh, ow) = c.geom.output_hw(x.h, x.w, w.h, w.w)?;
            let output = Shape4::new(x.n, w.n, oh, ow);
            let op = PlanOp::Conv {
                name: name.to_string(),
                c_in: x.c,
                c_out: w.n,
                kernel: (w.h, w.w),
                groups: c.geom.groups,
                bias: true,
                output,
            };
            Ok((op, output))
        };
        let norm_op = |st: &[RunningStats], n: NormSlot, x: Shape4| PlanOp::Norm {
            name: st[n.stats].name.clone(),
            channels: x.c,
            elems: x.numel(),
        };
        for layer in &self.layers {
            let mut ops = Vec::new();
            let input = s;
            match layer {
                Layer::Downsample { name, conv, norm } => {
                    let (op, a) = conv_op(&self.params, &format!("{name}.conv"), *conv, s)?;
                    ops.push(op);
                    let pooled = Shape4::new(s.n, s.c, s.h.div_ceil(2), s.w.div_ceil(2));
                    ops.push(PlanOp::MaxPool { out_elems: pooled.numel() });
                    s = Shape4::new(s.n, a.c + s.c, a.h, a.w);
                    ops.push(norm_op(&self.stats, *norm, s));
                    ops.push(PlanOp::Relu { elems: s.numel() });
                }
                Layer::Factorized {
                    name,
                    halves,
                    half_norms,
                    depthwise,
                    depthwise_norm,
                    pointwise,
                    pointwise_norm,
                } => {
                    let half = s.with_c(s.c / 2);
                    for k in 0..2 {
                        let (op, t) = conv_op(&self.params, &format!("{name}.half{k}.conv3x1"), halves[k][0], half)?;
                        ops.push(op);
                        ops.push(PlanOp::Relu { elems: t.numel() });
                        let (op, t) = conv_op(&self.params, &format!("{name}.half{k}.conv1x3"), halves[k][1], t)?;
                        ops.push(op);
                        ops.push(norm_op(&self.stats, half_norms[k], t));
                        ops.push(PlanOp::Relu { elems: t.numel() });
                    }
                    let (op, d) = conv_op(&self.params, &format!("{name}.depthwise"), *depthwise, s)?;
                    ops.push(op);
                    ops.push(norm_op(&self.stats, *depthwise_norm, d));
                    ops.push(PlanOp::Relu { elems: d.numel() });
                    let (op, p) = conv_op(&self.params, &format!("{name}.pointwise"), *pointwise, d)?;
                    ops.push(op);
                    ops.push(norm_op(&self.stats, *pointwise_norm, p));
                    ops.push(PlanOp::Add { elems: p.numel() });
                    ops.push(PlanOp::Relu { elems: p.numel() });
                    s = p;
                }
                Layer::Svn {
                    conv1, norm, conv2, cfg, ..
                } => {
                    let (op, f) = conv_op(&self.params, "svn.conv1", *conv1, s)?;
                    ops.push(op);
                    if let Some(n) = norm {
                        ops.push(norm_op(&self.stats, *n, f));
                        ops.push(PlanOp::Relu { elems: f.numel() });
                    }
                    ops.push(PlanOp::Attention {
                        batch: f.n,
                        channels: f.c,
                        pixels: f.plane(),
                        regions: cfg.total_regions(),
                        scales: cfg.scales.len(),
                        power_iters: cfg.power_iters,
                    });
                    let (op, y) = conv_op(&self.params, "svn.conv2", *conv2, f)?;
                    ops.push(op);
                    ops.push(PlanOp::Add { elems: y.numel() });
                    s = y;
                }
                Layer::Classifier {
                    conv, norm, head, upsample, ..
                } => {
                    let (op, t) = conv_op(&self.params, "classifier.conv", *conv, s)?;
                    ops.push(op);
                    ops.push(norm_op(&self.stats, *norm, t));
                    ops.push(PlanOp::Relu { elems: t.numel() });
                    let (op, t) = conv_op(&self.params, "classifier.head", *head, t)?;
                    ops.push(op);
                    s = Shape4::new(t.n, t.c, t.h * upsample, t.w * upsample);
                    ops.push(PlanOp::Upsample { out_elems: s.numel() });
                }
            }
            out.push(LayerPlan {
                name: layer.name().to_string(),
                input,
                output: s,
                ops,
            });
        }
        Ok(out)
    }

    /// Names of the parameters a layer owns, by layer-name prefix.
    pub fn params_of(&self, layer: &str) -> Vec<&Param> {
        let prefix = format!("{layer}.");
        self.params.iter().filter(|p| p.name.starts_with(&prefix)).collect()
    }
}

/// Logits of `x` at input resolution. Training mode normalizes with batch
/// statistics and leaves the running statistics untouched.
pub fn network_forward(net: &Network, x: &Tensor4, training: bool) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pass = net.forward_on_tape(&mut tape, xv, training, false)?;
    Ok(tape.value(pass.logits)?.clone())
}
