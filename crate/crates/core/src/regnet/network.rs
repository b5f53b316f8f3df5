use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use super::loss::{build_classification_loss, build_registration_loss, build_total, class_balance, LossConfig};
use super::{stage_prefix, HeadKind, RegNetConfig, RegNetParams, RotationMode};
use crate::autodiff::{Bindings, Graph, NodeId, Tensor, Values, CONTEXT_NORM_EPS};
use crate::error::{Error, Result};
use crate::estimators::{CorrespondenceSet, WeightVector};
use crate::geom3d::{linear9_to_rot, quat_to_rot, so3_exp, RigidTransform};

#[derive(Clone, Debug)]
struct StageNodes {
    logits: NodeId,
    weights: NodeId,
    features: Vec<NodeId>,
    /// Raw head outputs `(v, t)`; absent for the Procrustes head.
    head: Option<(NodeId, NodeId)>,
    rotation: NodeId,
    translation: NodeId,
    cum_rotation: NodeId,
    cum_translation: NodeId,
}

#[derive(Clone, Debug)]
struct LossNodes {
    total: NodeId,
    classification: Vec<NodeId>,
    registration: Vec<NodeId>,
}

/// Input tensors of one correspondence set, laid out for graph binding.
#[derive(Clone, Debug)]
pub struct PairTensors {
    pub p: Tensor,
    pub q: Tensor,
    labels: Option<(Tensor, Tensor)>,
}

impl PairTensors {
    pub fn new(corrs: &CorrespondenceSet) -> Self {
        let rows = |v: &[Vector3<f64>]| {
            let data = v.iter().flat_map(|x| [x.x, x.y, x.z]).collect();
            Tensor::new(vec![v.len(), 3], data).expect("N×3 layout")
        };
        let labels = corrs.labels.as_ref().map(|l| {
            let y = l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            (Tensor::vector(y), Tensor::vector(class_balance(l)))
        });
        Self {
            p: rows(&corrs.p),
            q: rows(&corrs.q),
            labels,
        }
    }

    fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        b.bind("p", &self.p).bind("q", &self.q);
        if let Some((y, g)) = &self.labels {
            b.bind("labels", y).bind("gamma", g);
        }
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Classification weights of every stage.
    pub weights: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Transform estimated by each stage on its own input.
    pub stage_transforms: Vec<RigidTransform>,
    /// Composition of all stages.
    pub transform: RigidTransform,
    /// Per-stage classification and registration losses, when labels were bound.
    pub losses: Option<(Vec<f64>, Vec<f64>, f64)>,
}

/// A network or cascade compiled into one autodiff graph. Shapes depend only
/// on the configurations, so the graph is reused across correspondence sets
/// of any size.
#[derive(Clone, Debug)]
pub struct NetGraph {
    graph: Graph,
    configs: Vec<RegNetConfig>,
    stages: Vec<StageNodes>,
    loss: Option<LossNodes>,
}

impl NetGraph {
    pub fn new(configs: &[RegNetConfig], loss: Option<&LossConfig>) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::InvalidInput("no network configuration".into()));
        }
        for c in configs {
            c.validate()?;
        }
        if let Some(l) = loss {
            l.validate()?;
        }
        let mut g = Graph::new();
        let p = g.input("p");
        let q = g.input("q");
        let mut stages: Vec<StageNodes> = Vec::new();
        for (k, cfg) in configs.iter().enumerate() {
            let prefix = stage_prefix(k);
            let (pin, qin) = match stages.last() {
                None => (p, q),
                Some(prev) => {
                    let rt = g.transpose(prev.cum_rotation);
                    let moved = g.affine(p, rt, prev.cum_translation);
                    let (pin, qin) = (g.scale_rows(moved, prev.weights), g.scale_rows(q, prev.weights));
                    if loss.is_some_and(|l| l.detach_stage_inputs) {
                        (g.stop_gradient(pin), g.stop_gradient(qin))
                    } else {
                        (pin, qin)
                    }
                }
            };
            let x = g.concat(&[pin, qin], 1);
            let (logits, weights, features) = build_classifier(&mut g, cfg, &prefix, x);
            let (head, rotation, translation) = match cfg.head {
                HeadKind::Dnn => {
                    let (v, t) = build_dnn_head(&mut g, cfg, &prefix, &features);
                    (Some((v, t)), build_decode(&mut g, cfg.rotation, v), t)
                }
                HeadKind::Procrustes => {
                    let (r, t) = build_procrustes(&mut g, pin, qin, weights, cfg.threshold);
                    (None, r, t)
                }
            };
            let (cum_rotation, cum_translation) = match stages.last() {
                None => (rotation, translation),
                Some(prev) => {
                    let r = g.matmul(rotation, prev.cum_rotation);
                    let t_col = g.reshape(prev.cum_translation, &[3, 1]);
                    let rt = g.matmul(rotation, t_col);
                    let rt = g.reshape(rt, &[3]);
                    (r, g.add(rt, translation))
                }
            };
            stages.push(StageNodes {
                logits,
                weights,
                features,
                head,
                rotation,
                translation,
                cum_rotation,
                cum_translation,
            });
        }
        let loss = loss.map(|cfg| {
            let labels = g.input("labels");
            let gamma = g.input("gamma");
            let classification: Vec<NodeId> = stages
                .iter()
                .map(|s| build_classification_loss(&mut g, s.logits, labels, gamma))
                .collect();
            let registration: Vec<NodeId> = stages
                .iter()
                .map(|s| build_registration_loss(&mut g, p, q, s.cum_rotation, s.cum_translation, s.weights, cfg))
                .collect();
            LossNodes {
                total: build_total(&mut g, &classification, &registration, cfg),
                classification,
                registration,
            }
        });
        Ok(Self {
            graph: g,
            configs: configs.to_vec(),
            stages,
            loss,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn configs(&self) -> &[RegNetConfig] {
        &self.configs
    }

    /// Scalar training objective node, if the graph was built with a loss.
    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss.as_ref().map(|l| l.total)
    }

    /// Leaf bindings for one evaluation of [`Self::graph`].
    pub fn bindings<'a>(&self, params: &'a RegNetParams, pair: &'a PairTensors) -> Result<Bindings<'a>> {
        if self.loss.is_some() && pair.labels.is_none() {
            return Err(Error::InvalidInput("training graph needs labels".into()));
        }
        let mut b = Bindings::new();
        params.bind(&mut b);
        pair.bind(&mut b);
        Ok(b)
    }

    pub fn forward(&self, params: &RegNetParams, corrs: &CorrespondenceSet) -> Result<Forward> {
        self.forward_tensors(params, &PairTensors::new(corrs))
    }

    pub fn forward_tensors(&self, params: &RegNetParams, pair: &PairTensors) -> Result<Forward> {
        let values = self.graph.eval(&self.bindings(params, pair)?)?;
        self.collect(&values)
    }

    /// Objective value and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        params: &RegNetParams,
        pair: &PairTensors,
    ) -> Result<(Forward, BTreeMap<String, Tensor>)> {
        let loss = self
            .loss_node()
            .ok_or_else(|| Error::InvalidInput("graph was built without a loss".into()))?;
        let (values, mut grads) = self.graph.grad(loss, &self.bindings(params, pair)?)?;
        grads.retain(|k, _| params.get(k).is_some());
        Ok((self.collect(&values)?, grads))
    }

    /// Stage-`k` feature maps of an evaluated graph.
    pub fn stage_features(&self, values: &Values<'_>, k: usize) -> Vec<Tensor> {
        self.stages[k].features.iter().map(|&id| values.get(id).clone()).collect()
    }

    pub fn eval_values<'a>(&self, params: &'a RegNetParams, pair: &'a PairTensors) -> Result<Values<'a>> {
        self.graph.eval(&self.bindings(params, pair)?)
    }

    /// Raw `(v, t)` head outputs of stage `k`, if it has a DNN head.
    pub fn head_outputs(&self, values: &Values<'_>, k: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        self.stages[k]
            .head
            .map(|(v, t)| (values.get(v).data().to_vec(), values.get(t).data().to_vec()))
    }

    fn collect(&self, values: &Values<'_>) -> Result<Forward> {
        let transform = |r: NodeId, t: NodeId| {
            RigidTransform::new(
                Matrix3::from_row_slice(values.get(r).data()),
                Vector3::from_column_slice(values.get(t).data()),
            )
        };
        let last = self.stages.last().expect("at least one stage");
        let losses = self.loss.as_ref().map(|l| {
            let read = |ids: &[NodeId]| ids.iter().map(|&i| values.get(i).item()).collect();
            (read(&l.classification), read(&l.registration), values.get(l.total).item())
        });
        Ok(Forward {
            weights: self.stages.iter().map(|s| values.get(s.weights).data().to_vec()).collect(),
            logits: self.stages.iter().map(|s| values.get(s.logits).data().to_vec()).collect(),
            stage_transforms: self
                .stages
                .iter()
                .map(|s| transform(s.rotation, s.translation))
                .collect::<Result<_>>()?,
            transform: transform(last.cum_rotation, last.cum_translation)?,
            losses,
        })
    }
}

fn layer(g: &mut Graph, x: NodeId, prefix: &str, name: &str) -> NodeId {
    let w = g.param(&format!("{prefix}{name}.w"));
    let b = g.param(&format!("{prefix}{name}.b"));
    g.affine(x, w, b)
}

/// Returns `(logits [N], weights [N], stage features)`.
fn build_classifier(g: &mut Graph, cfg: &RegNetConfig, prefix: &str, x: NodeId) -> (NodeId, NodeId, Vec<NodeId>) {
    let h = layer(g, x, prefix, "cls.in");
    let mut h = g.relu(h);
    let mut features = vec![h];
    for c in 0..cfg.blocks {
        let mut u = h;
        for j in 1..=2 {
            let n = g.context_norm(u, CONTEXT_NORM_EPS);
            let a = layer(g, n, prefix, &format!("cls.block{c}.fc{j}"));
            u = g.relu(a);
        }
        h = g.add(h, u);
        features.push(h);
    }
    let o = layer(g, h, prefix, "cls.out");
    let logits = g.reshape(o, &[-1]);
    let r = g.relu(logits);
    let w = g.tanh(r);
    (logits, w, features)
}

fn build_dnn_head(g: &mut Graph, cfg: &RegNetConfig, prefix: &str, features: &[NodeId]) -> (NodeId, NodeId) {
    let w = cfg.width as isize;
    let rows: Vec<NodeId> = features
        .iter()
        .map(|&f| {
            let m = g.max_pool_rows(f);
            g.reshape(m, &[1, w])
        })
        .collect();
    let map = g.concat(&rows, 0);
    let map = g.context_norm(map, CONTEXT_NORM_EPS);
    let map = g.reshape(map, &[1, features.len() as isize, w]);
    let k = g.param(&format!("{prefix}reg.conv.w"));
    let kb = g.param(&format!("{prefix}reg.conv.b"));
    let conv = g.conv2d(map, k, kb, (cfg.conv_stride[0], cfg.conv_stride[1]));
    let flat = g.reshape(conv, &[1, -1]);
    let h = layer(g, flat, prefix, "reg.fc1");
    let h = g.relu(h);
    let out = layer(g, h, prefix, "reg.fc2");
    let out = g.reshape(out, &[-1]);
    let m = cfg.rotation.dim();
    (g.slice(out, 0, m), g.slice(out, m, 3))
}

fn build_decode(g: &mut Graph, mode: RotationMode, v: NodeId) -> NodeId {
    match mode {
        RotationMode::Lie => g.so3_exp(v),
        RotationMode::Quaternion => g.quat_to_rot(v),
        RotationMode::Linear => {
            let m = g.reshape(v, &[3, 3]);
            g.project_so3(m)
        }
    }
}

/// Weighted Procrustes over the correspondences whose weight reaches `tau`.
fn build_procrustes(g: &mut Graph, p: NodeId, q: NodeId, w: NodeId, tau: f64) -> (NodeId, NodeId) {
    let m = g.threshold_mask(w, tau);
    let m_row = g.reshape(m, &[1, -1]);
    let total = g.sum(m);
    let inv = g.recip(total);
    let centroid = |g: &mut Graph, x: NodeId| {
        let s = g.matmul(m_row, x);
        let s = g.reshape(s, &[3]);
        g.scale_by(s, inv)
    };
    let cp = centroid(g, p);
    let cq = centroid(g, q);
    let neg_cp = g.scale(cp, -1.0);
    let neg_cq = g.scale(cq, -1.0);
    let pc = g.add_row(p, neg_cp);
    let qc = g.add_row(q, neg_cq);
    let qw = g.scale_rows(qc, m);
    let qwt = g.transpose(qw);
    let h = g.matmul(qwt, pc);
    let r = g.project_so3(h);
    let cp_col = g.reshape(cp, &[3, 1]);
    let rcp = g.matmul(r, cp_col);
    let rcp = g.reshape(rcp, &[3]);
    (r, g.sub(cq, rcp))
}

/// Output of the classification block.
#[derive(Clone, Debug)]
pub struct Classification {
    pub weights: WeightVector,
    pub logits: Vec<f64>,
    /// `C+1` maps of shape `[N, width]`: the input layer, then each block.
    pub stage_features: Vec<Tensor>,
}

/// Runs the classification block of stage 1.
pub fn forward_classify(
    cfg: &RegNetConfig,
    params: &RegNetParams,
    corrs: &CorrespondenceSet,
) -> Result<Classification> {
    cfg.validate()?;
    let mut g = Graph::new();
    let p = g.input("p");
    let q = g.input("q");
    let x = g.concat(&[p, q], 1);
    let (logits, weights, features) = build_classifier(&mut g, cfg, &stage_prefix(0), x);
    let pair = PairTensors::new(corrs);
    let mut b = Bindings::new();
    params.bind(&mut b);
    pair.bind(&mut b);
    let values = g.eval(&b)?;
    Ok(Classification {
        weights: WeightVector::new(values.get(weights).data().to_vec())?,
        logits: values.get(logits).data().to_vec(),
        stage_features: features.iter().map(|&f| values.get(f).clone()).collect(),
    })
}

/// Runs the DNN registration head of stage 1 on precomputed stage features.
pub fn forward_register_dnn(
    cfg: &RegNetConfig,
    params: &RegNetParams,
    stage_features: &[Tensor],
) -> Result<(Vec<f64>, Vector3<f64>)> {
    cfg.validate()?;
    if cfg.head != HeadKind::Dnn {
        return Err(Error::InvalidInput("configuration has no DNN head".into()));
    }
    if stage_features.len() != cfg.blocks + 1 {
        return Err(Error::shape(
            "forward_register_dnn",
            format!("{} stage maps for C = {}", stage_features.len(), cfg.blocks),
        ));
    }
    let mut g = Graph::new();
    let names: Vec<String> = (0..stage_features.len()).map(|k| format!("feat{k}")).collect();
    let feats: Vec<NodeId> = names.iter().map(|n| g.input(n)).collect();
    let (v, t) = build_dnn_head(&mut g, cfg, &stage_prefix(0), &feats);
    let mut b = Bindings::new();
    params.bind(&mut b);
    b.extend(names.iter().map(String::as_str).zip(stage_features));
    let values = g.eval(&b)?;
    Ok((
        values.get(v).data().to_vec(),
        Vector3::from_column_slice(values.get(t).data()),
    ))
}

pub fn decode_pose(v: &[f64], t: &Vector3<f64>, mode: RotationMode) -> Result<RigidTransform> {
    if v.len() != mode.dim() {
        return Err(Error::shape("decode_pose", format!("{} values for {mode:?}", v.len())));
    }
    let r = match mode {
        RotationMode::Lie => so3_exp(&Vector3::from_column_slice(v)),
        RotationMode::Quaternion => quat_to_rot(&[v[0], v[1], v[2], v[3]])?,
        RotationMode::Linear => linear9_to_rot(&std::array::from_fn(|i| v[i]))?,
    };
    RigidTransform::new(r, *t)
}

/// Differentiable-head registration from given weights: correspondences with
/// `w_i ≥ tau` enter a weighted Procrustes fit.
pub fn forward_register_procrustes(
    corrs: &CorrespondenceSet,
    weights: &WeightVector,
    tau: f64,
) -> Result<RigidTransform> {
    if weights.len() != corrs.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} correspondences",
            weights.len(),
            corrs.len()
        )));
    }
    let selected: Vec<usize> = (0..weights.len()).filter(|&i| weights.as_slice()[i] >= tau).collect();
    if selected.len() < 3 {
        return Err(Error::TooFewInliers {
            needed: 3,
            got: selected.len(),
        });
    }
    // The estimator's degeneracy checks guard the SVD below.
    let sub = corrs.select(&selected);
    let w_sel: Vec<f64> = selected.iter().map(|&i| weights.as_slice()[i]).collect();
    crate::estimators::weighted_fit(&sub.p, &sub.q, &w_sel)?;
    let mut g = Graph::new();
    let p = g.input("p");
    let q = g.input("q");
    let w = g.input("w");
    let (r, t) = build_procrustes(&mut g, p, q, w, tau);
    let pair = PairTensors::new(corrs);
    let wt = Tensor::vector(weights.as_slice().to_vec());
    let mut b = Bindings::new();
    pair.bind(&mut b);
    b.bind("w", &wt);
    let values = g.eval(&b)?;
    RigidTransform::new(
        Matrix3::from_row_slice(values.get(r).data()),
        Vector3::from_column_slice(values.get(t).data()),
    )
}

#[derive(Clone, Debug)]
pub struct RefinedOutput {
    pub w1: WeightVector,
    pub w2: WeightVector,
    pub transform: RigidTransform,
}

/// Two-stage cascade: the second network sees the first stage's aligned and
/// weight-scaled correspondences; the result is `T² ∘ T¹`.
pub fn forward_refined(
    configs: &[RegNetConfig; 2],
    params: &RegNetParams,
    corrs: &CorrespondenceSet,
) -> Result<RefinedOutput> {
    let net = NetGraph::new(configs, None)?;
    let mut out = net.forward(params, corrs)?;
    let w2 = WeightVector::new(out.weights.pop().expect("two stages"))?;
    let w1 = WeightVector::new(out.weights.pop().expect("two stages"))?;
    Ok(RefinedOutput {
        w1,
        w2,
        transform: out.transform,
    })
}
