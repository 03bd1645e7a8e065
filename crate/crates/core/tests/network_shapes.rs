mod common;

use abseg::graph::Graph;
use abseg::losses::{one_hot, LossConfig, LossKind};
use abseg::network::{build, forward, shape_plan, softmax_head, Mode, Network, NetworkSpec, ParameterSet};
use abseg::rng::seeded;
use abseg::Tensor;
use common::*;

#[test]
fn default_plan_matches_reported_shapes() {
    let plan = shape_plan(&NetworkSpec::default(), [3, 128, 160, 112]).unwrap();
    assert_eq!(plan.bottleneck(), [320, 8, 10, 7]);
    assert_eq!(plan.output(), [5, 128, 160, 112]);
    assert!(plan.render().contains("bottleneck"));
}

#[test]
fn tiny_plan_halves_per_transition() {
    let plan = shape_plan(&NetworkSpec::tiny(5), [3, 32, 32, 32]).unwrap();
    assert_eq!(plan.bottleneck(), [40, 2, 2, 2]);
}

#[test]
fn indivisible_input_names_axis_and_multiple() {
    let err = shape_plan(&NetworkSpec::default(), [3, 128, 160, 100]).unwrap_err().to_string();
    assert!(err.contains('z') && err.contains("16"), "{err}");
}

#[test]
fn first_kernel_shape() {
    let p = build(&NetworkSpec::default(), 0).unwrap();
    assert_eq!(p.tensor("enc1.stem.conv.weight").unwrap().shape(), &[32, 3, 3, 3, 3]);
}

/// Parameter count worked out stage by stage from the architecture.
fn closed_form_count(spec: &NetworkSpec) -> usize {
    let k: usize = spec.kernel.iter().product();
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
    let conv_norm = |cin: usize, cout: usize| conv(cin, cout, k) + 2 * cout;
    let f = &spec.filters_per_level;
    let mut n = conv_norm(spec.in_channels, f[0]);
    for l in 0..spec.levels {
        if l > 0 {
            n += conv_norm(f[l - 1], f[l]);
        }
        n += spec.blocks_per_level[l] * 2 * conv_norm(f[l], f[l]);
    }
    for l in 0..spec.levels - 1 {
        let half = f[l + 1] / 2;
        let s: usize = spec.downsample_strides[l].iter().product();
        n += conv(f[l + 1], half, 1);
        n += half * f[l] * s + f[l];
        n += conv_norm(2 * f[l], f[l]);
    }
    n + (0..spec.deep_supervision_levels).map(|l| conv(f[l], spec.num_classes, 1)).sum::<usize>()
}

#[test]
fn parameter_count_matches_closed_form() {
    for spec in [NetworkSpec::tiny(5), NetworkSpec::default(), micro_spec(3)] {
        assert_eq!(build(&spec, 1).unwrap().count(), closed_form_count(&spec));
    }
}

#[test]
fn build_is_deterministic_per_seed() {
    let spec = NetworkSpec::tiny(5);
    assert_eq!(build(&spec, 4).unwrap(), build(&spec, 4).unwrap());
    assert_ne!(build(&spec, 4).unwrap(), build(&spec, 5).unwrap());
}

#[test]
fn tiny_forward_matches_plan() {
    let spec = NetworkSpec::tiny(5);
    let plan = shape_plan(&spec, [3, 32, 32, 32]).unwrap();
    let params = build(&spec, 2).unwrap();
    let mut rng = seeded(3, 0);
    let mut g = Graph::new();
    let x = g.input(random_input(&mut rng, &[1, 3, 32, 32, 32]));
    let out = forward(&mut g, &params, &spec, x, Mode::Train).unwrap();
    assert_eq!(out.stages.len() + 1, plan.stages.len()); // plan also lists the input
    for (name, node) in &out.stages {
        assert_eq!(&g.value(*node).shape()[1..], &plan.get(name).unwrap()[..], "{name}");
    }
    for (l, node) in out.logits.iter().enumerate() {
        assert!(g.value(*node).is_finite(), "level {l}");
    }
}

#[test]
fn zero_input_with_zero_heads_gives_uniform_probabilities() {
    let spec = NetworkSpec::tiny(4);
    let mut net = Network::new(spec, 0).unwrap();
    for (name, p) in net.params.iter_mut() {
        if name.starts_with("head") {
            p.value.data_mut().fill(0.0);
        }
    }
    let p = net.predict(&Tensor::zeros(&[3, 16, 16, 16])).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn identical_samples_give_identical_outputs() {
    let net = Network::new(NetworkSpec::tiny(3), 7).unwrap();
    let mut rng = seeded(8, 0);
    let one = random_input(&mut rng, &[3, 16, 16, 16]);
    let batch = Tensor::stack(&[one.clone(), one]).unwrap();
    let p = net.predict_batch(&batch).unwrap();
    assert_eq!(p.slice0(0), p.slice0(1));
}

#[test]
fn softmax_examples() {
    let equal = softmax_head(&Tensor::full(&[1, 4, 2, 1, 1], 0.7));
    assert!(equal.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let two = softmax_head(&Tensor::from_vec(&[1, 2, 1, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
    assert!((two.data()[0] - 0.25).abs() < 1e-15 && (two.data()[1] - 0.75).abs() < 1e-15);
    let logits = Tensor::from_vec(&[1, 3, 1, 1, 1], vec![0.1, -2.0, 1.5]).unwrap();
    let shifted = Tensor::from_vec(&[1, 3, 1, 1, 1], vec![1000.1, 998.0, 1001.5]).unwrap();
    assert!(softmax_head(&logits).max_abs_diff(&softmax_head(&shifted)) < 1e-12);
}

#[test]
fn unused_parameter_gets_exactly_zero_gradient() {
    let spec = micro_spec(3);
    let params = build(&spec, 5).unwrap();
    let mut rng = seeded(6, 0);
    let mut g = Graph::new();
    let x = g.input(random_input(&mut rng, &[1, 3, 3, 2, 2]));
    let out = forward(&mut g, &params, &spec, x, Mode::Train).unwrap();
    let p = g.softmax(out.logits[0]);
    let y = one_hot(&[random_labels(&mut rng, [3, 2, 2], 3)], 3).unwrap();
    let loss = g.loss(p, LossKind::Hybrid, &y, &LossConfig::default()).unwrap();
    let grads = g.backward(loss).unwrap();
    for name in ["head2.weight", "head2.bias"] {
        assert!(grads[name].data().iter().all(|&v| v == 0.0), "{name}");
    }
    assert!(grads["head1.weight"].data().iter().any(|&v| v != 0.0));
}

#[test]
fn pointwise_conv_gradient_is_channel_mean() {
    let mut rng = seeded(9, 0);
    let input = random_input(&mut rng, &[1, 3, 2, 3, 4]);
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.param("w", &random_input(&mut rng, &[1, 3, 1, 1, 1]));
    let b = g.param("b", &Tensor::zeros(&[1]));
    let y = g.conv3d(x, w, Some(b), [1; 3], [0; 3]).unwrap();
    let m = g.mean(y);
    let grads = g.backward(m).unwrap();
    for c in 0..3 {
        let mean: f64 = input.data()[c * 24..(c + 1) * 24].iter().sum::<f64>() / 24.0;
        assert!((grads["w"].data()[c] - mean).abs() < 1e-15);
    }
    assert!((grads["b"].data()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn residual_block_with_zero_kernels_passes_input_through() {
    let narrow = NetworkSpec {
        levels: 2,
        blocks_per_level: vec![1, 1],
        filters_per_level: vec![4, 6],
        downsample_strides: vec![[2, 2, 2]],
        deep_supervision_levels: 1,
        ds_weights: vec![1.0],
        num_classes: 3,
        ..NetworkSpec::default()
    };
    let deep = NetworkSpec {
        blocks_per_level: vec![1, 2],
        ..narrow.clone()
    };
    let mut params = build(&deep, 12).unwrap();
    for name in ["enc2.block1.conv2.conv.weight", "enc2.block1.conv2.conv.bias"] {
        params.get_mut(name).unwrap().value.data_mut().fill(0.0);
    }
    let mut reduced = ParameterSet::default();
    for (name, p) in params.iter().filter(|(n, _)| !n.starts_with("enc2.block1.")) {
        reduced.insert(name.clone(), p.clone()).unwrap();
    }
    let mut rng = seeded(13, 0);
    let input = random_input(&mut rng, &[2, 3, 4, 6, 4]);
    let run = |spec: &NetworkSpec, params: &ParameterSet| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = forward(&mut g, params, spec, x, Mode::Eval).unwrap();
        let b = out.stages.iter().find(|(n, _)| n == "bottleneck").unwrap().1;
        (g.value(b).clone(), g.value(out.logits[0]).clone())
    };
    assert_eq!(run(&deep, &params), run(&narrow, &reduced));
}
