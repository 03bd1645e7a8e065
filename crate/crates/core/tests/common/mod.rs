//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use abseg::graph::Graph;
use abseg::grid::{Grid3, Spacing};
use abseg::losses::{one_hot, LossConfig, LossKind};
use abseg::network::{forward, Mode, NetworkSpec, ParameterSet};
use abseg::rng::Rng;
use abseg::volume_io::LabelMap;
use abseg::Tensor;
use rand::Rng as _;

/// Three-level network of about 1.5k parameters for 3×2×2 patches.
pub fn micro_spec(num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels: 3,
        levels: 3,
        blocks_per_level: vec![1, 1, 1],
        filters_per_level: vec![2, 2, 2],
        downsample_strides: vec![[1, 2, 1], [1, 1, 2]],
        num_classes,
        deep_supervision_levels: 2,
        ds_weights: vec![2.0 / 3.0, 1.0 / 3.0],
        ..NetworkSpec::default()
    }
}

/// Nearest label downsampling, written out independently of the trainer.
pub fn subsample(g: &Grid3<u8>, s: [usize; 3]) -> Grid3<u8> {
    let sh = g.shape();
    Grid3::from_fn([sh[0] / s[0], sh[1] / s[1], sh[2] / s[2]], |x, y, z| g.get(x * s[0], y * s[1], z * s[2]))
}

/// Deep-supervised loss of `kind` through the graph, with gradients.
pub fn network_loss(
    params: &ParameterSet,
    spec: &NetworkSpec,
    input: &Tensor,
    labels: &[Grid3<u8>],
    kind: LossKind,
    cfg: &LossConfig,
) -> (f64, BTreeMap<String, Tensor>) {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = forward(&mut g, params, spec, x, Mode::Train).unwrap();
    let mut terms = Vec::new();
    for (l, &logits) in out.logits.iter().enumerate() {
        let s = spec.cumulative_stride(l);
        let t: Vec<Grid3<u8>> = labels.iter().map(|g| subsample(g, s)).collect();
        let y = one_hot(&t, spec.num_classes).unwrap();
        let p = g.softmax(logits);
        terms.push((g.loss(p, kind, &y, cfg).unwrap(), spec.ds_weights[l]));
    }
    let total = g.weighted_sum(&terms).unwrap();
    let grads = g.backward(total).unwrap();
    (g.value(total).item(), grads)
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every parameter entry. Entries whose gradients are both
/// below `floor` in magnitude are compared against `floor`.
pub fn fd_max_rel_error(
    params: &ParameterSet,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParameterSet) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for name in params.names() {
        let n = params.tensor(&name).unwrap().numel();
        for i in 0..n {
            let orig = p.tensor(&name).unwrap().data()[i];
            p.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
            let up = loss(&p);
            p.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
            let down = loss(&p);
            p.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = analytic[&name].data()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {ana:.6e}, numeric {num:.6e}"));
            }
        }
    }
    worst
}

pub fn random_input(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_labels(rng: &mut Rng, shape: [usize; 3], num_classes: usize) -> Grid3<u8> {
    Grid3::from_fn(shape, |_, _, _| rng.random_range(0..num_classes) as u8)
}

/// Union of a few random boxes and balls inside `shape`.
pub fn random_blobs(rng: &mut Rng, shape: [usize; 3], count: usize) -> Grid3<bool> {
    let mut g = Grid3::filled(shape, false);
    for _ in 0..count {
        let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..shape[a] as f64));
        let r: [f64; 3] = std::array::from_fn(|a| rng.random_range(1.0..(shape[a] as f64 / 3.0).max(1.5)));
        let ball = rng.random_bool(0.5);
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let d: [f64; 3] = std::array::from_fn(|a| ([x, y, z][a] as f64 - c[a]) / r[a]);
                    let inside = if ball {
                        d.iter().map(|v| v * v).sum::<f64>() <= 1.0
                    } else {
                        d.iter().all(|v| v.abs() <= 1.0)
                    };
                    if inside {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
    }
    g
}

pub fn mask_to_labels(m: &Grid3<bool>) -> LabelMap {
    LabelMap::new(m.map(|b| b as u8), 2).unwrap()
}

/// Boundary faces as (center in mm, area), enumerated directly.
fn faces(mask: &Grid3<bool>, sp: [f64; 3]) -> Vec<([f64; 3], f64)> {
    let s = mask.shape();
    let on = |p: [i64; 3]| (0..3).all(|a| p[a] >= 0 && p[a] < s[a] as i64) && mask.get(p[0] as usize, p[1] as usize, p[2] as usize);
    let mut out = Vec::new();
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                if !mask.get(x, y, z) {
                    continue;
                }
                let v = [x as f64, y as f64, z as f64];
                for a in 0..3 {
                    for d in [-1i64, 1] {
                        let mut n = [x as i64, y as i64, z as i64];
                        n[a] += d;
                        if on(n) {
                            continue;
                        }
                        let mut c = v;
                        c[a] += 0.5 * d as f64;
                        let area: f64 = (0..3).filter(|&b| b != a).map(|b| sp[b]).product();
                        out.push(([c[0] * sp[0], c[1] * sp[1], c[2] * sp[2]], area));
                    }
                }
            }
        }
    }
    out
}

/// Surface Dice by exhaustive face-to-face distances. The threshold is
/// inclusive, with 1e-9 of slack on the squared distance.
pub fn brute_force_surface_dice(pred: &Grid3<bool>, gt: &Grid3<bool>, tau: f64, spacing: Spacing) -> f64 {
    let (fp, fg) = (faces(pred, spacing.0), faces(gt, spacing.0));
    match (fp.is_empty(), fg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let limit = tau * tau + 1e-9;
    let within = |from: &[([f64; 3], f64)], to: &[([f64; 3], f64)]| -> f64 {
        from.iter()
            .filter(|(c, _)| {
                to.iter().any(|(d, _)| (0..3).map(|a| (c[a] - d[a]).powi(2)).sum::<f64>() <= limit)
            })
            .map(|(_, area)| area)
            .sum()
    };
    let total: f64 = fp.iter().chain(&fg).map(|f| f.1).sum();
    (within(&fp, &fg) + within(&fg, &fp)) / total
}
