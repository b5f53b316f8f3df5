use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::ops::{Op, SvdPart};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

/// Named leaf tensors for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    entries: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Tensor) -> &mut Self {
        self.entries.insert(name, value);
        self
    }

    pub fn extend<I>(&mut self, items: I) -> &mut Self
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        for (k, v) in items {
            self.entries.insert(k, v);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.entries.get(name).copied()
    }
}

/// Forward values of every node. Leaves borrow their bound tensors.
#[derive(Clone, Debug)]
pub struct Values<'a> {
    values: Vec<Cow<'a, Tensor>>,
}

impl Values<'_> {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.values[id.0], Cow::Owned(Tensor::scalar(0.0))).into_owned()
    }
}

/// Static computation graph. Nodes are appended in topological order by
/// construction: every builder call only references existing nodes.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, op: Op) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(op, &[]);
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Data leaf; repeated calls with one name return the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Input(name.to_string()))
    }

    /// Learnable leaf; repeated calls with one name return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Param(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value), &[])
    }

    pub fn param_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].op, Op::Param(_)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn input_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].op, Op::Input(_)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine, &[x, w, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose, &[x])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), &[x])
    }
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.push(Op::ScaleBy, &[x, s])
    }
    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Recip, &[x])
    }
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddRow, &[x, b])
    }
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.push(Op::ScaleRows, &[x, s])
    }
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid, &[x])
    }
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square, &[x])
    }
    pub fn context_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.push(Op::ContextNorm { eps }, &[x])
    }
    pub fn max_pool_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPoolRows, &[x])
    }
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: (usize, usize)) -> NodeId {
        self.push(Op::Conv2d { stride }, &[x, kernel, bias])
    }
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, xs)
    }
    pub fn reshape(&mut self, x: NodeId, dims: &[isize]) -> NodeId {
        self.push(Op::Reshape(dims.to_vec()), &[x])
    }
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { start, len }, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, &[x])
    }
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumLast, &[x])
    }
    pub fn geman_mcclure(&mut self, squared: NodeId, mu: f64) -> NodeId {
        self.push(Op::GemanMcClure { mu }, &[squared])
    }
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::BceWithLogits, &[logits, targets])
    }
    /// Batched 3×3 SVD; returns `(U, s, V)` with `A = U diag(s) Vᵀ`.
    pub fn svd3(&mut self, x: NodeId) -> (NodeId, NodeId, NodeId) {
        let u = self.push(Op::Svd3(SvdPart::U), &[x]);
        let s = self.push(Op::Svd3(SvdPart::S), &[x]);
        let v = self.push(Op::Svd3(SvdPart::V), &[x]);
        (u, s, v)
    }
    pub fn det_correction(&mut self, u: NodeId, v: NodeId) -> NodeId {
        self.push(Op::DetCorrection, &[u, v])
    }
    pub fn so3_exp(&mut self, omega: NodeId) -> NodeId {
        self.push(Op::So3Exp, &[omega])
    }
    pub fn quat_to_rot(&mut self, q: NodeId) -> NodeId {
        self.push(Op::QuatToRot, &[q])
    }
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGradient, &[x])
    }
    pub fn threshold_mask(&mut self, x: NodeId, tau: f64) -> NodeId {
        self.push(Op::ThresholdMask { tau }, &[x])
    }

    /// Nearest rotation `U diag(1,1,det(UVᵀ)) Vᵀ` to a 3×3 node.
    pub fn project_so3(&mut self, m: NodeId) -> NodeId {
        let (u, _, v) = self.svd3(m);
        let d = self.det_correction(u, v);
        let ud = self.matmul(u, d);
        let vt = self.transpose(v);
        self.matmul(ud, vt)
    }

    /// Forward pass over all nodes.
    pub fn eval<'a>(&self, bindings: &Bindings<'a>) -> Result<Values<'a>> {
        self.forward_until(bindings, self.nodes.len())
    }

    fn forward_until<'a>(&self, bindings: &Bindings<'a>, end: usize) -> Result<Values<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(end);
        for (idx, node) in self.nodes[..end].iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) | Op::Param(name) => Cow::Borrowed(
                    bindings
                        .get(name)
                        .ok_or_else(|| Error::InvalidInput(format!("unbound leaf '{name}'")))?,
                ),
                Op::Const(t) => Cow::Owned(t.clone()),
                op => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &*values[i.0]).collect();
                    Cow::Owned(op.forward(&ins)?)
                }
            };
            if !value.all_finite() {
                return Err(Error::NonFinite(format!("{} (node {idx})", node.op.name())));
            }
            values.push(value);
        }
        Ok(Values { values })
    }

    /// Forward pass up to `loss` followed by reverse accumulation. Returns the
    /// forward values and gradients for every parameter and input leaf
    /// (zeros where the loss does not depend on the leaf).
    pub fn grad<'a>(&self, loss: NodeId, bindings: &Bindings<'a>) -> Result<(Values<'a>, BTreeMap<String, Tensor>)> {
        let end = loss.0 + 1;
        let values = self.forward_until(bindings, end)?;
        if values.get(loss).len() != 1 {
            return Err(Error::shape(
                "grad",
                format!("loss must be scalar, got {:?}", values.get(loss).dims()),
            ));
        }
        let needs = self.requires_grad(end);
        let mut grads: Vec<Option<Tensor>> = vec![None; end];
        grads[loss.0] = Some(Tensor::from_parts(values.get(loss).dims().to_vec(), vec![1.0]));
        for idx in (0..end).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &*values.values[i.0]).collect();
            let input_grads = node.op.backward(&ins, &values.values[idx], &g);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(ig), true) = (ig, needs[inp.0]) else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.leaves {
            if id.0 >= end {
                continue;
            }
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(values.values[id.0].dims()));
            out.insert(name.clone(), g);
        }
        Ok((values, out))
    }

    fn requires_grad(&self, end: usize) -> Vec<bool> {
        let mut needs = vec![false; end];
        for (idx, node) in self.nodes[..end].iter().enumerate() {
            needs[idx] = match node.op {
                Op::Input(_) | Op::Param(_) => true,
                Op::Const(_) | Op::DetCorrection | Op::StopGradient => false,
                _ => node.inputs.iter().any(|i| needs[i.0]),
            };
        }
        needs
    }
}
