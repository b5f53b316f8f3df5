#[path = "common/gradients.rs"]
mod gradients;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigidreg::autodiff::{Tensor, CONTEXT_NORM_EPS};
use rigidreg::data::{gen_synthetic, GenConfig};
use rigidreg::estimators::{procrustes, umeyama, CorrespondenceSet, WeightVector};
use rigidreg::regnet::*;

fn pairs(count: usize, n: usize, seed: u64) -> Vec<CorrespondenceSet> {
    gen_synthetic(&GenConfig {
        pairs: count,
        n,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

fn small(blocks: usize, width: usize) -> RegNetConfig {
    RegNetConfig {
        width,
        hidden: 32,
        conv_channels: 4,
        ..RegNetConfig::with_blocks(blocks)
    }
}

// Plain-loop reimplementation of the network, used as an oracle.

type Mat = Vec<Vec<f64>>;

fn t<'a>(params: &'a RegNetParams, name: &str) -> &'a Tensor {
    params.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn dense(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (fi, fo) = (w.dims()[0], w.dims()[1]);
    x.iter()
        .map(|row| {
            (0..fo)
                .map(|j| b.data()[j] + (0..fi).map(|i| row[i] * w.data()[i * fo + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn norm_columns(x: &Mat) -> Mat {
    let n = x.len() as f64;
    let cols = x[0].len();
    let mut out = x.clone();
    for j in 0..cols {
        let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let s = (x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        for (o, r) in out.iter_mut().zip(x) {
            o[j] = (r[j] - m) / (s + CONTEXT_NORM_EPS);
        }
    }
    out
}

struct Oracle {
    weights: Vec<f64>,
    v: Vec<f64>,
    t: Vec<f64>,
}

fn oracle(cfg: &RegNetConfig, params: &RegNetParams, corrs: &CorrespondenceSet) -> Oracle {
    let pre = "s1.";
    let x: Mat = corrs.p.iter().zip(&corrs.q).map(|(p, q)| vec![p.x, p.y, p.z, q.x, q.y, q.z]).collect();
    let get = |n: &str| t(params, &format!("{pre}{n}"));
    let mut h = relu(dense(&x, get("cls.in.w"), get("cls.in.b")));
    let mut feats = vec![h.clone()];
    for c in 0..cfg.blocks {
        let mut u = h.clone();
        for j in 1..=2 {
            u = relu(dense(&norm_columns(&u), get(&format!("cls.block{c}.fc{j}.w")), get(&format!("cls.block{c}.fc{j}.b"))));
        }
        for (hr, ur) in h.iter_mut().zip(&u) {
            for (a, b) in hr.iter_mut().zip(ur) {
                *a += b;
            }
        }
        feats.push(h.clone());
    }
    let logits: Vec<f64> = dense(&h, get("cls.out.w"), get("cls.out.b")).into_iter().map(|r| r[0]).collect();
    let weights = logits.iter().map(|&o| o.max(0.0).tanh()).collect();
    // Head: pooled map → context norm over the stage axis → conv → two dense layers.
    let pooled: Mat = feats
        .iter()
        .map(|f| (0..cfg.width).map(|j| f.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).collect())
        .collect();
    let map = norm_columns(&pooled);
    let k = get("reg.conv.w");
    let kb = get("reg.conv.b");
    let [co, _, kh, kw] = k.dims().try_into().unwrap();
    let (sh, sw) = (cfg.conv_stride[0], cfg.conv_stride[1]);
    let (ho, wo) = ((map.len() - kh) / sh + 1, (cfg.width - kw) / sw + 1);
    let mut flat = Vec::new();
    for o in 0..co {
        for r in 0..ho {
            for c in 0..wo {
                let mut acc = kb.data()[o];
                for dr in 0..kh {
                    for dc in 0..kw {
                        acc += map[r * sh + dr][c * sw + dc] * k.data()[(o * kh + dr) * kw + dc];
                    }
                }
                flat.push(acc);
            }
        }
    }
    let h1 = relu(dense(&vec![flat], get("reg.fc1.w"), get("reg.fc1.b")));
    let out = dense(&h1, get("reg.fc2.w"), get("reg.fc2.b")).remove(0);
    let m = cfg.rotation.dim();
    Oracle {
        weights,
        v: out[..m].to_vec(),
        t: out[m..m + 3].to_vec(),
    }
}

fn oracle_rotation(v: &[f64], mode: RotationMode) -> Matrix3<f64> {
    match mode {
        RotationMode::Lie => *Rotation3::from_scaled_axis(Vector3::new(v[0], v[1], v[2])).matrix(),
        RotationMode::Quaternion => *UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]))
            .to_rotation_matrix()
            .matrix(),
        RotationMode::Linear => {
            let m = Matrix3::from_row_slice(v);
            let svd = m.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let d = (u * vt).determinant().signum();
            u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
        }
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    let set = &pairs(1, 40, 3)[0];
    for mode in RotationMode::ALL {
        let cfg = RegNetConfig {
            rotation: mode,
            ..small(3, 32)
        };
        let params = RegNetParams::init(std::slice::from_ref(&cfg), 11).unwrap();
        let want = oracle(&cfg, &params, set);
        let cls = forward_classify(&cfg, &params, set).unwrap();
        for (a, b) in cls.weights.as_slice().iter().zip(&want.weights) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let (v, tv) = forward_register_dnn(&cfg, &params, &cls.stage_features).unwrap();
        for (a, b) in v.iter().zip(&want.v).chain(tv.iter().zip(&want.t)) {
            assert!((a - b).abs() < 1e-6, "{mode:?}: {a} vs {b}");
        }
        let pose = decode_pose(&v, &tv, mode).unwrap();
        let r = oracle_rotation(&want.v, mode);
        assert!((pose.rotation - r).norm() < 1e-6, "{mode:?}");
        let full = NetGraph::new(std::slice::from_ref(&cfg), None).unwrap().forward(&params, set).unwrap();
        assert!((full.transform.rotation - r).norm() < 1e-6);
    }
}

#[test]
fn weights_are_in_unit_interval_and_equivariant() {
    let cfg = small(2, 32);
    let params = RegNetParams::init(std::slice::from_ref(&cfg), 1).unwrap();
    let net = NetGraph::new(std::slice::from_ref(&cfg), None).unwrap();
    let set = &pairs(1, 64, 8)[0];
    let base = net.forward(&params, set).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..set.len()).collect();
        perm.shuffle(&mut rng);
        let out = net.forward(&params, &set.select(&perm)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out.weights[0][k], base.weights[0][i]);
        }
        assert_eq!(out.transform, base.transform);
        assert!(out.weights[0].iter().all(|&w| (0.0..1.0).contains(&w)));
    }
}

#[test]
fn pooled_head_ignores_duplication() {
    // Duplicating every correspondence keeps column moments and maxima.
    let cfg = small(2, 32);
    let params = RegNetParams::init(std::slice::from_ref(&cfg), 4).unwrap();
    let net = NetGraph::new(std::slice::from_ref(&cfg), None).unwrap();
    let set = &pairs(1, 32, 9)[0];
    let twice: Vec<usize> = (0..set.len()).chain(0..set.len()).collect();
    let a = net.forward(&params, set).unwrap();
    let b = net.forward(&params, &set.select(&twice)).unwrap();
    assert!((a.transform.rotation - b.transform.rotation).norm() < 1e-9);
    assert!((a.transform.translation - b.transform.translation).norm() < 1e-9);
    for (x, y) in a.weights[0].iter().zip(&b.weights[0]) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn procrustes_head_matches_closed_form() {
    for (i, set) in pairs(20, 50, 12).iter().enumerate() {
        let labels = set.labels.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let w: Vec<f64> = labels.iter().map(|&y| if y { rng.random_range(0.5..0.99) } else { rng.random_range(0.0..0.5) }).collect();
        let w = WeightVector::new(w).unwrap();
        let head = forward_register_procrustes(set, &w, 0.5).unwrap();
        let masked: Vec<f64> = w.as_slice().iter().map(|&v| if v >= 0.5 { v } else { 0.0 }).collect();
        let direct = procrustes(set, &WeightVector::new(masked).unwrap()).unwrap();
        assert!((head.rotation - direct.rotation).norm() < 1e-9);
        assert!((head.translation - direct.translation).norm() < 1e-9);
        // Equal weights on the inliers reduce to Umeyama on the labels.
        let flat: Vec<f64> = labels.iter().map(|&y| if y { 0.7 } else { 0.1 }).collect();
        let head = forward_register_procrustes(set, &WeightVector::new(flat).unwrap(), 0.5).unwrap();
        let u = umeyama(set, labels).unwrap();
        assert!((head.rotation - u.rotation).norm() < 1e-9);
        assert!((head.translation - u.translation).norm() < 1e-9);
    }
    let set = &pairs(1, 10, 1)[0];
    let w = WeightVector::new(vec![0.9, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(forward_register_procrustes(set, &w, 0.5).is_err());
}

#[test]
fn cascade_composes_stage_transforms() {
    let cfgs = [small(2, 16), small(2, 16)];
    let params = RegNetParams::init(&cfgs, 5).unwrap();
    let set = &pairs(1, 30, 2)[0];
    let net = NetGraph::new(&cfgs, None).unwrap();
    let fwd = net.forward(&params, set).unwrap();
    let (t1, t2) = (fwd.stage_transforms[0], fwd.stage_transforms[1]);
    let composed = rigidreg::geom3d::compose(&t2, &t1);
    assert!((composed.rotation - fwd.transform.rotation).norm() < 1e-12);
    assert!((composed.translation - fwd.transform.translation).norm() < 1e-12);
    let refined = forward_refined(&cfgs, &params, set).unwrap();
    assert_eq!(refined.transform, fwd.transform);
    assert_eq!(refined.w1.as_slice(), &fwd.weights[0][..]);

    // Stage 1 equals the single network built from the same parameters.
    let single = NetGraph::new(&cfgs[..1], None).unwrap().forward(&params, set).unwrap();
    assert_eq!(single.transform, t1);
    assert_eq!(single.weights[0], fwd.weights[0]);

    // Stage 2 sees the stage-1-aligned, weight-scaled correspondences.
    let w = &fwd.weights[0];
    let p2: Vec<Vector3<f64>> = set.p.iter().zip(w).map(|(p, &wi)| t1.apply(p) * wi).collect();
    let q2: Vec<Vector3<f64>> = set.q.iter().zip(w).map(|(q, &wi)| q * wi).collect();
    let moved = CorrespondenceSet::new(set.pair_id, p2, q2).unwrap();
    let mut stage2 = RegNetParams::from_map(Default::default());
    for (k, v) in params.tensors() {
        if let Some(rest) = k.strip_prefix("s2.") {
            stage2.tensors_mut().insert(format!("s1.{rest}"), v.clone());
        }
    }
    let second = NetGraph::new(&cfgs[1..], None).unwrap().forward(&stage2, &moved).unwrap();
    assert!((second.transform.rotation - t2.rotation).norm() < 1e-9);
    assert!((second.transform.translation - t2.translation).norm() < 1e-9);
}

#[test]
fn identity_pair_keeps_cascade_consistent() {
    // With q = p every stage input is the same cloud twice.
    let cfgs = [small(2, 16), small(2, 16)];
    let params = RegNetParams::init(&cfgs, 6).unwrap();
    let mut set = pairs(1, 24, 4)[0].clone();
    set.q = set.p.clone();
    let fwd = NetGraph::new(&cfgs, None).unwrap().forward(&params, &set).unwrap();
    assert!(fwd.weights.iter().flatten().all(|w| (0.0..1.0).contains(w)));
    assert!(rigidreg::geom3d::is_rotation(&fwd.transform.rotation, 1e-9));
}

#[test]
fn full_loss_gradients_over_heads_modes_and_metrics() {
    let outcomes = gradients::full_loss();
    assert_eq!(outcomes.len(), 2 * 3 * 4 + 2);
    for (label, err) in outcomes {
        assert!(err < 1e-4, "{label}: {err}");
    }
}

#[test]
fn loss_graph_agrees_with_reference_functions() {
    let set = &pairs(1, 20, 30)[0];
    let cfg = small(2, 16);
    let params = RegNetParams::init(std::slice::from_ref(&cfg), 8).unwrap();
    for metric in Metric::ALL {
        let lc = LossConfig {
            metric,
            ..LossConfig::default()
        };
        let net = NetGraph::new(std::slice::from_ref(&cfg), Some(&lc)).unwrap();
        let fwd = net.forward(&params, set).unwrap();
        let (c, r, total) = fwd.losses.clone().unwrap();
        let want_c = loss_classification(&fwd.logits[0], set.labels.as_ref().unwrap()).unwrap();
        let want_r = loss_registration(set, &fwd.transform, metric, Some(&fwd.weights[0]), lc.mu).unwrap();
        assert!((c[0] - want_c).abs() < 1e-9);
        assert!((r[0] - want_r).abs() < 1e-9, "{metric:?}");
        assert!((total - loss_total(want_c, want_r, lc.alpha, lc.beta)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn registration_is_bit_exact_under_permutation(seed in 0u64..1000, n in 8usize..48) {
        let cfg = small(2, 16);
        let params = RegNetParams::init(std::slice::from_ref(&cfg), seed).unwrap();
        let net = NetGraph::new(std::slice::from_ref(&cfg), None).unwrap();
        let set = &pairs(1, n, seed)[0];
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let a = net.forward(&params, set).unwrap();
        let b = net.forward(&params, &set.select(&perm)).unwrap();
        prop_assert_eq!(a.transform, b.transform);
        prop_assert!(b.weights[0].iter().all(|&w| (0.0..1.0).contains(&w)));
    }

    #[test]
    fn decoded_poses_are_rotations(v in prop::collection::vec(-3.0f64..3.0, 9), t in prop::array::uniform3(-1.0f64..1.0)) {
        let tv = Vector3::from(t);
        for mode in RotationMode::ALL {
            let m = mode.dim();
            if mode == RotationMode::Quaternion && v[..4].iter().map(|x| x * x).sum::<f64>() < 1e-3 {
                continue;
            }
            let pose = decode_pose(&v[..m], &tv, mode).unwrap();
            prop_assert!(rigidreg::geom3d::is_rotation(&pose.rotation, 1e-9));
            prop_assert!((pose.rotation - oracle_rotation(&v[..m], mode)).norm() < 1e-9);
        }
    }
}
