mod common;

use common::*;
use lrnnet::network::{
    build_lrnnet, downsample_features, network_forward, Checkpoint, ConvVars, ModelVariant, Network, NetworkSpec,
    PlanOp,
};
use lrnnet::tensor::{max_pool2d, ConvGeometry, Tape};
use lrnnet::train::IGNORE_INDEX;
use lrnnet::{Error, Shape4, Tensor4};
use rand::seq::index::sample;
use rand::Rng;
use std::collections::BTreeMap;

fn toy(v: ModelVariant, classes: usize) -> Network {
    build_lrnnet(&NetworkSpec::toy(v, classes), 7).unwrap()
}

#[test]
fn full_size_output_shape() {
    let net = build_lrnnet(&NetworkSpec::full_size(ModelVariant::C, 19), 0).unwrap();
    let x = Tensor4::random_uniform(Shape4::new(1, 3, 512, 1024), 0.0, 1.0, &mut rng(1));
    let y = network_forward(&net, &x, false).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 19, 512, 1024));
    assert!(y.all_finite());
}

#[test]
fn encoder_and_bottleneck_shapes_at_full_size() {
    let net = build_lrnnet(&NetworkSpec::full_size(ModelVariant::C, 19), 0).unwrap();
    let plan = net.plan(Shape4::new(1, 3, 512, 1024)).unwrap();
    let enc = plan.iter().find(|l| l.name == "stage3.block7").unwrap();
    assert_eq!(enc.output, Shape4::new(1, 128, 64, 128));
    let svn = plan.iter().find(|l| l.name == "svn").unwrap();
    let att = svn
        .ops
        .iter()
        .find_map(|op| match op {
            PlanOp::Attention {
                channels,
                pixels,
                regions,
                ..
            } => Some((*channels, *pixels, *regions)),
            _ => None,
        })
        .unwrap();
    assert_eq!(att, (32, 64 * 128, 80));
    assert_eq!(plan.last().unwrap().output, Shape4::new(1, 19, 512, 1024));
}

#[test]
fn toy_logits_are_finite() {
    for v in ModelVariant::ALL {
        let net = build_lrnnet(&NetworkSpec::toy(v, 19), 3).unwrap();
        let x = Tensor4::random_uniform(Shape4::new(1, 3, 64, 128), 0.0, 1.0, &mut rng(2));
        for training in [true, false] {
            let y = network_forward(&net, &x, training).unwrap();
            assert_eq!(y.shape(), Shape4::new(1, 19, 64, 128));
            assert!(y.all_finite());
        }
    }
}

#[test]
fn blocks_preserve_shape_and_plan_matches_forward() {
    let net = toy(ModelVariant::C, 5);
    let input = Shape4::new(2, 3, 32, 64);
    let x = Tensor4::random_uniform(input, 0.0, 1.0, &mut rng(3));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pass = net.forward_on_tape(&mut tape, xv, true, false).unwrap();
    let plan = net.plan(input).unwrap();
    assert_eq!(plan.len(), pass.trace.len());
    for (p, (name, shape)) in plan.iter().zip(&pass.trace) {
        assert_eq!(&p.name, name);
        assert_eq!(p.output, *shape, "{name}");
        if name.contains(".block") || name == "svn" {
            assert_eq!(p.input, p.output, "{name} changes shape");
        }
    }
}

#[test]
fn zeroed_projection_reproduces_the_plain_model() {
    let a = toy(ModelVariant::A, 5);
    for v in [ModelVariant::B, ModelVariant::C] {
        let mut c = toy(v, 5);
        for p in a.params() {
            c.param_mut(&p.name).unwrap().value = p.value.clone();
        }
        for name in ["svn.conv2.weight", "svn.conv2.bias"] {
            let p = c.param_mut(name).unwrap();
            p.value = Tensor4::zeros(p.value.shape());
        }
        let x = Tensor4::random_uniform(Shape4::new(2, 3, 32, 64), 0.0, 1.0, &mut rng(4));
        for training in [true, false] {
            assert_eq!(network_forward(&a, &x, training).unwrap(), network_forward(&c, &x, training).unwrap());
        }
    }
}

#[test]
fn parameter_names_are_deterministic_and_unique() {
    for v in ModelVariant::ALL {
        let spec = NetworkSpec::full_size(v, 19);
        let map = |n: &Network| -> BTreeMap<String, [usize; 4]> {
            n.params().iter().map(|p| (p.name.clone(), p.value.shape().dims())).collect()
        };
        let (a, b) = (build_lrnnet(&spec, 1).unwrap(), build_lrnnet(&spec, 2).unwrap());
        assert_eq!(map(&a), map(&b));
        assert_eq!(map(&a).len(), a.params().len());
        let order: Vec<&str> = a.params().iter().map(|p| p.name.as_str()).collect();
        let order_b: Vec<&str> = b.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(order, order_b);
    }
}

#[test]
fn closed_form_weight_counts() {
    let net = build_lrnnet(&NetworkSpec::full_size(ModelVariant::A, 19), 0).unwrap();
    let weights = |layer: &str| -> usize {
        net.params_of(layer)
            .iter()
            .filter(|p| p.name.ends_with(".weight"))
            .map(|p| p.value.len())
            .sum()
    };
    for k in 0..8 {
        assert_eq!(weights(&format!("stage3.block{k}")), 66688);
    }
    assert_eq!(net.param("down1.conv.weight").unwrap().value.len(), 783);
    assert_eq!(net.param_count(), 678_079);
}

#[test]
fn pooled_channels_of_downsampling_equal_max_pool() {
    let mut r = rng(5);
    let x = Tensor4::random_uniform(Shape4::new(2, 3, 8, 10), -1.0, 1.0, &mut r);
    let w = Tensor4::random_uniform(Shape4::new(5, 3, 3, 3), -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let cv = ConvVars {
        weight: tape.constant(w),
        bias: tape.constant(Tensor4::zeros(Shape4::new(1, 5, 1, 1))),
        geom: ConvGeometry {
            stride: (2, 2),
            padding: (1, 1),
            ..ConvGeometry::default()
        },
    };
    let y = downsample_features(&mut tape, xv, &cv).unwrap();
    let y = tape.value(y).unwrap();
    assert_eq!(y.shape(), Shape4::new(2, 8, 4, 5));
    let pooled = max_pool2d(&x).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            assert_eq!(y.plane(n, 5 + c), pooled.plane(n, c));
        }
    }
}

#[test]
fn zero_weights_stay_finite_with_finite_input_gradient() {
    let mut net = toy(ModelVariant::C, 4);
    for p in net.params_mut() {
        p.value = Tensor4::zeros(p.value.shape());
    }
    let x = Tensor4::random_uniform(Shape4::new(2, 3, 16, 32), -1.0, 1.0, &mut rng(6));
    for training in [true, false] {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let pass = net.forward_on_tape(&mut tape, xv, training, true).unwrap();
        assert!(tape.value(pass.logits).unwrap().all_finite());
        let loss = tape.sum(pass.logits).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        assert!(grads.get(xv).unwrap().all_finite());
    }
}

#[test]
fn indivisible_input_is_a_config_error() {
    let net = toy(ModelVariant::A, 4);
    let x = Tensor4::zeros(Shape4::new(1, 3, 20, 32));
    assert!(matches!(network_forward(&net, &x, false), Err(Error::Config(_))));
    assert!(matches!(net.plan(Shape4::new(1, 3, 4, 4)), Err(Error::Config(_))));
    assert!(matches!(net.plan(Shape4::new(1, 4, 16, 16)), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let net = toy(ModelVariant::C, 5);
    let bytes = net.to_checkpoint(serde_json::json!({"note": "test"})).to_bytes().unwrap();
    let back = Network::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), Some(net.spec())).unwrap();
    let x = Tensor4::random_uniform(Shape4::new(1, 3, 16, 32), 0.0, 1.0, &mut rng(7));
    assert_eq!(network_forward(&net, &x, false).unwrap(), network_forward(&back, &x, false).unwrap());
    let other = NetworkSpec::toy(ModelVariant::A, 5);
    assert!(matches!(
        Network::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), Some(&other)),
        Err(Error::Checkpoint(_))
    ));
}

/// Conv biases whose output goes straight into a norm; with batch
/// statistics they cannot change the loss.
fn feeds_norm(name: &str) -> bool {
    name.ends_with(".bias") && !name.contains(".conv3x1.") && !name.starts_with("svn.conv2") && !name.starts_with("classifier.head")
}

fn ce_loss(net: &Network, x: &Tensor4, labels: &[u8], training: bool) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pass = net.forward_on_tape(&mut tape, xv, training, false).unwrap();
    let l = tape.cross_entropy(pass.logits, labels, IGNORE_INDEX).unwrap();
    tape.value(l).unwrap().data()[0]
}

/// Central difference at the largest step whose one-sided differences
/// agree, so that a relu switching inside the stencil does not count.
fn smooth_difference(net: &mut Network, k: usize, i: usize, x: &Tensor4, labels: &[u8], training: bool) -> f64 {
    let orig = net.params()[k].value.data()[i];
    let at = |v: f64, net: &mut Network| {
        net.params_mut()[k].value.data_mut()[i] = v;
        ce_loss(net, x, labels, training)
    };
    let centre = at(orig, net);
    let mut last = f64::NAN;
    for step in [BLOCK_STEP, BLOCK_STEP / 10.0, BLOCK_STEP / 100.0] {
        let (plus, minus) = (at(orig + step, net), at(orig - step, net));
        let (fwd, bwd) = ((plus - centre) / step, (centre - minus) / step);
        last = (plus - minus) / (2.0 * step);
        if lrnnet::tensor::relative_error(fwd, bwd) < 1e-2 {
            break;
        }
    }
    net.params_mut()[k].value.data_mut()[i] = orig;
    last
}

#[test]
fn end_to_end_gradient_on_sampled_parameters() {
    for (seed, training) in [(1u64, true), (2, true), (3, false), (4, false), (5, true)] {
        let mut net = build_lrnnet(&NetworkSpec::toy(ModelVariant::C, 4), seed).unwrap();
        let mut r = rng(seed + 100);
        // non-trivial running statistics for the inference-mode checks
        for rs in net.running_stats_mut() {
            rs.mean.iter_mut().for_each(|m| *m = r.gen_range(-0.2..0.2));
            rs.var.iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
        }
        let x = Tensor4::random_uniform(Shape4::new(1, 3, 16, 32), 0.0, 1.0, &mut r);
        let labels: Vec<u8> = (0..16 * 32).map(|_| r.gen_range(0..4)).collect();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = net.forward_on_tape(&mut tape, xv, training, true).unwrap();
        let loss = tape.cross_entropy(pass.logits, &labels, IGNORE_INDEX).unwrap();
        let grads = tape.backward(loss, None).unwrap();

        let candidates: Vec<(usize, usize)> = net
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| !(training && feeds_norm(&p.name)))
            .flat_map(|(k, p)| (0..p.value.len()).map(move |i| (k, i)))
            .collect();
        let mut worst = 0.0f64;
        for pick in sample(&mut r, candidates.len(), 20) {
            let (k, i) = candidates[pick];
            let analytic = grads.get(pass.params[k]).map_or(0.0, |g| g.data()[i]);
            let numeric = smooth_difference(&mut net, k, i, &x, &labels, training);
            worst = worst.max(lrnnet::tensor::relative_error(analytic, numeric));
        }
        assert!(worst < 1e-3, "seed {seed} training {training}: {worst:e}");
    }
}
