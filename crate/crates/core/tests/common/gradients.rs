//! Finite-difference checks of every autodiff primitive.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigidreg::autodiff::{grad_check, grad_check_sampled, Bindings, Graph, NodeId, Tensor, CONTEXT_NORM_EPS};
use rigidreg::data::{gen_synthetic, GenConfig};
use rigidreg::estimators::CorrespondenceSet;
use rigidreg::regnet::{
    stage_prefix, HeadKind, LossConfig, Metric, NetGraph, PairTensors, RegNetConfig, RegNetParams, RotationMode,
};

const H: f64 = 1e-6;

/// `(label, max relative error)` of one finite-difference check.
pub type Outcome = (String, f64);

fn random(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts `out` against a fixed random tensor so that the check exercises
/// a generic vector-Jacobian product rather than the all-ones cotangent.
fn contract(g: &mut Graph, out: NodeId, dims: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let probe = g.constant(random(rng, dims, -1.0, 1.0));
    let prod = g.mul(out, probe);
    g.sum(prod)
}

struct Case {
    graph: Graph,
    loss: NodeId,
    values: Vec<(String, Tensor)>,
}

impl Case {
    fn check(&self, label: &str, out: &mut Vec<Outcome>) {
        let mut b = Bindings::new();
        for (name, t) in &self.values {
            b.bind(name, t);
        }
        let names: Vec<&str> = self.values.iter().map(|(n, _)| n.as_str()).collect();
        let report = grad_check(&self.graph, self.loss, &b, H, &names).unwrap();
        assert!(report.checked > 0);
        out.push((label.to_string(), report.max_rel_error));
    }
}

fn unary(
    out: &mut Vec<Outcome>,
    label: &str,
    in_dims: &[usize],
    out_dims: &[usize],
    range: (f64, f64),
    build: impl Fn(&mut Graph, NodeId) -> NodeId,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(label.len() as u64 * 7919);
    let mut graph = Graph::new();
    let x = graph.input("x");
    let y = build(&mut graph, x);
    let loss = contract(&mut graph, y, out_dims, &mut rng);
    let values = vec![("x".to_string(), random(&mut rng, in_dims, range.0, range.1))];
    Case { graph, loss, values }.check(label, out);
}

pub fn elementwise_primitives(out: &mut Vec<Outcome>) {
    unary(out, "relu", &[5, 4], &[5, 4], (-1.0, 1.0), |g, x| g.relu(x));
    unary(out, "tanh", &[5, 4], &[5, 4], (-2.0, 2.0), |g, x| g.tanh(x));
    unary(out, "sigmoid", &[5, 4], &[5, 4], (-4.0, 4.0), |g, x| g.sigmoid(x));
    unary(out, "abs", &[5, 4], &[5, 4], (-1.0, 1.0), |g, x| g.abs(x));
    unary(out, "square", &[5, 4], &[5, 4], (-1.0, 1.0), |g, x| g.square(x));
    unary(out, "recip", &[6], &[6], (0.5, 2.0), |g, x| g.recip(x));
    unary(out, "scale", &[6], &[6], (-1.0, 1.0), |g, x| g.scale(x, -2.5));
    unary(out, "geman_mcclure", &[7], &[7], (0.0, 3.0), |g, x| g.geman_mcclure(x, 0.3));
    unary(out, "threshold_mask", &[9], &[9], (0.0, 1.0), |g, x| g.threshold_mask(x, 0.5));
}

pub fn structural_primitives(out: &mut Vec<Outcome>) {
    unary(out, "transpose", &[3, 5], &[5, 3], (-1.0, 1.0), |g, x| g.transpose(x));
    unary(out, "reshape", &[3, 4], &[2, 6], (-1.0, 1.0), |g, x| g.reshape(x, &[2, -1]));
    unary(out, "slice", &[6, 2], &[3, 2], (-1.0, 1.0), |g, x| g.slice(x, 2, 3));
    unary(out, "sum_last", &[4, 3], &[4], (-1.0, 1.0), |g, x| g.sum_last(x));
    unary(out, "max_pool_rows", &[7, 5], &[5], (-1.0, 1.0), |g, x| g.max_pool_rows(x));
    unary(out, "context_norm", &[9, 4], &[9, 4], (-1.0, 1.0), |g, x| g.context_norm(x, CONTEXT_NORM_EPS));
    unary(out, "mean", &[4, 3], &[], (-1.0, 1.0), |g, x| g.mean(x));
    unary(out, "concat0", &[2, 3], &[5, 3], (-1.0, 1.0), |g, x| {
        let sq = g.square(x);
        let top = g.slice(sq, 0, 1);
        g.concat(&[x, top, sq], 0)
    });
    unary(out, "concat1", &[2, 3], &[2, 9], (-1.0, 1.0), |g, x| {
        let sq = g.square(x);
        g.concat(&[x, sq, x], 1)
    });
}

pub fn rotation_primitives(out: &mut Vec<Outcome>) {
    unary(out, "so3_exp", &[4, 3], &[4, 3, 3], (-1.5, 1.5), |g, x| g.so3_exp(x));
    unary(out, "so3_exp_tiny", &[2, 3], &[2, 3, 3], (-1e-5, 1e-5), |g, x| g.so3_exp(x));
    unary(out, "quat_to_rot", &[3, 4], &[3, 3, 3], (-1.0, 1.0), |g, x| g.quat_to_rot(x));
    unary(out, "svd_s", &[3, 3], &[3], (-1.0, 1.0), |g, x| g.svd3(x).1);
    // U and V carry a sign ambiguity per column; products of paired columns
    // do not, so probe them through U·diag(s)·Vᵀ pieces and the projection.
    unary(out, "svd_usv", &[3, 3], &[3, 3], (-1.0, 1.0), |g, x| {
        let (u, s, v) = g.svd3(x);
        let s2 = g.reshape(s, &[3]);
        let us = g.transpose(u);
        let us = g.scale_rows(us, s2);
        let us = g.transpose(us);
        let vt = g.transpose(v);
        let a = g.matmul(us, vt);
        g.square(a)
    });
    unary(out, "project_so3", &[3, 3], &[3, 3], (-1.0, 1.0), |g, x| g.project_so3(x));
}

fn binary(
    out: &mut Vec<Outcome>,
    label: &str,
    dims: (&[usize], &[usize]),
    out_dims: &[usize],
    build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(label.len() as u64 * 104729);
    let mut graph = Graph::new();
    let a = graph.input("a");
    let b = graph.param("b");
    let y = build(&mut graph, a, b);
    let loss = contract(&mut graph, y, out_dims, &mut rng);
    let values = vec![
        ("a".to_string(), random(&mut rng, dims.0, -1.0, 1.0)),
        ("b".to_string(), random(&mut rng, dims.1, 0.2, 1.0)),
    ];
    Case { graph, loss, values }.check(label, out);
}

pub fn binary_primitives(out: &mut Vec<Outcome>) {
    binary(out, "add", (&[3, 2], &[3, 2]), &[3, 2], |g, a, b| g.add(a, b));
    binary(out, "sub", (&[3, 2], &[3, 2]), &[3, 2], |g, a, b| g.sub(a, b));
    binary(out, "mul", (&[3, 2], &[3, 2]), &[3, 2], |g, a, b| g.mul(a, b));
    binary(out, "matmul", (&[3, 4], &[4, 2]), &[3, 2], |g, a, b| g.matmul(a, b));
    binary(out, "scale_by", (&[3, 4], &[]), &[3, 4], |g, a, b| g.scale_by(a, b));
    binary(out, "add_row", (&[5, 3], &[3]), &[5, 3], |g, a, b| g.add_row(a, b));
    binary(out, "scale_rows", (&[5, 3], &[5]), &[5, 3], |g, a, b| g.scale_rows(a, b));
    binary(out, "bce_with_logits", (&[6], &[6]), &[6], |g, a, b| g.bce_with_logits(a, b));
}

pub fn affine_and_conv(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut graph = Graph::new();
    let x = graph.input("x");
    let w = graph.param("w");
    let b = graph.param("b");
    let y = graph.affine(x, w, b);
    let loss = contract(&mut graph, y, &[6, 2], &mut rng);
    let values = vec![
        ("x".into(), random(&mut rng, &[6, 4], -1.0, 1.0)),
        ("w".into(), random(&mut rng, &[4, 2], -1.0, 1.0)),
        ("b".into(), random(&mut rng, &[2], -1.0, 1.0)),
    ];
    Case { graph, loss, values }.check("affine", out);

    let mut graph = Graph::new();
    let x = graph.input("x");
    let k = graph.param("k");
    let b = graph.param("b");
    let y = graph.conv2d(x, k, b, (1, 2));
    // [2, 5, 9] ⊛ [3, 2, 3, 3] with stride (1, 2) → [3, 3, 4].
    let loss = contract(&mut graph, y, &[3, 3, 4], &mut rng);
    let values = vec![
        ("x".into(), random(&mut rng, &[2, 5, 9], -1.0, 1.0)),
        ("k".into(), random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)),
        ("b".into(), random(&mut rng, &[3], -1.0, 1.0)),
    ];
    Case { graph, loss, values }.check("conv2d", out);
}


pub fn all_primitives() -> Vec<Outcome> {
    let mut out = Vec::new();
    elementwise_primitives(&mut out);
    structural_primitives(&mut out);
    rotation_primitives(&mut out);
    binary_primitives(&mut out);
    affine_and_conv(&mut out);
    out
}

/// Full objective against central differences at a random parameter point,
/// sampling a few elements of every parameter tensor whose name starts with
/// `only`.
fn check_loss(cfgs: &[RegNetConfig], loss: &LossConfig, set: &CorrespondenceSet, seed: u64, only: &str) -> f64 {
    let mut params = RegNetParams::init(cfgs, seed).unwrap();
    // Zero biases put the zero-weight rows of stage 2 exactly on ReLU kinks,
    // where central differences average the two one-sided slopes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, b) in params.tensors_mut() {
        if name.ends_with(".b") {
            b.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
    }
    for k in 0..cfgs.len() {
        // Shift the output bias so the Procrustes head selects a healthy subset.
        let b = params.get_mut(&format!("{}cls.out.b", stage_prefix(k))).unwrap();
        b.data_mut()[0] = 0.6;
    }
    let net = NetGraph::new(cfgs, Some(loss)).unwrap();
    let pair = PairTensors::new(set);
    let b = net.bindings(&params, &pair).unwrap();
    let names: Vec<&str> = params.tensors().keys().map(String::as_str).filter(|n| n.starts_with(only)).collect();
    let report = grad_check_sampled(net.graph(), net.loss_node().unwrap(), &b, 1e-5, &names, Some(4), seed).unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

/// Both heads, every rotation mode and metric at N = 16, C = 2, plus the
/// two-stage objective.
pub fn full_loss() -> Vec<Outcome> {
    let set = &gen_synthetic(&GenConfig {
        pairs: 1,
        n: 16,
        seed: 21,
        ..GenConfig::default()
    })
    .unwrap()[0];
    let small = || RegNetConfig {
        width: 16,
        hidden: 32,
        conv_channels: 4,
        ..RegNetConfig::with_blocks(2)
    };
    let mut out = Vec::new();
    for head in [HeadKind::Dnn, HeadKind::Procrustes] {
        for rotation in RotationMode::ALL {
            for metric in Metric::ALL {
                let cfg = RegNetConfig { head, rotation, ..small() };
                let loss = LossConfig { metric, beta: 1.0, ..LossConfig::default() };
                out.push((format!("{head:?}/{rotation:?}/{metric:?}"), check_loss(&[cfg], &loss, set, 3, "")));
            }
        }
    }
    let cascade = [small(), small()];
    let end_to_end = LossConfig { beta: 1.0, detach_stage_inputs: false, ..LossConfig::default() };
    out.push(("cascade".to_string(), check_loss(&cascade, &end_to_end, set, 4, "")));
    // With detached stage-2 inputs the stage-2 parameters see the same objective.
    let detached = LossConfig { beta: 1.0, ..LossConfig::default() };
    out.push(("cascade/detached".to_string(), check_loss(&cascade, &detached, set, 4, &stage_prefix(1))));
    out
}
