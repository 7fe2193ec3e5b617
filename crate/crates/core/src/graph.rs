//! Static compute graph with reverse-mode differentiation.
//!
//! A graph is built once: inputs, parameters and primitive nodes are appended
//! in topological order and every node's shape is validated when it is added.
//! Inputs may be *batched*, meaning their runtime value carries an extra
//! leading axis of any size; shapes stored on nodes are the per-record
//! feature shapes. Parameters are never batched and are broadcast over the
//! batch where an operation mixes the two.
//!
//! The element type selects precision: `Graph<f32>` for training and
//! inference, `Graph<f64>` (usually via [`Graph::cast`]) for gradient
//! verification.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, TtvLayout, KERNEL_WIDTH};
use crate::tensor::{Element, Tensor};

/// Lower/upper clamp applied to probabilities before the BCE logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub batched: bool,
    pub dims: Vec<usize>,
}

impl NodeShape {
    fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    fn is_scalar(&self) -> bool {
        !self.batched && self.dims.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Ttv {
        tensor: NodeId,
        vector: NodeId,
        mode: usize,
    },
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool1d(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Dropout {
        input: NodeId,
        rate: f64,
    },
    Concat(NodeId, NodeId),
    Reshape(NodeId),
    ReduceMean(NodeId),
    Bce {
        prob: NodeId,
        target: NodeId,
    },
    BceLogits {
        logit: NodeId,
        target: NodeId,
    },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Ttv { tensor, vector, .. } => vec![tensor, vector],
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => vec![input, kernel, bias],
            Op::MaxPool1d(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Reshape(x)
            | Op::ReduceMean(x) => {
                vec![x]
            }
            Op::Dropout { input, .. } => vec![input],
            Op::Bce { prob, target } => vec![prob, target],
            Op::BceLogits { logit, target } => vec![logit, target],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Ttv { .. } => "ttv",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d(_) => "maxpool1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::ReduceMean(_) => "mean",
            Op::Bce { .. } => "bce",
            Op::BceLogits { .. } => "bce_logits",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    op: Op,
    shape: NodeShape,
    /// Depends on at least one parameter.
    trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    node: NodeId,
}

/// How dropout nodes behave during a forward pass. Training masks are a pure
/// function of `(seed, node)`, so replaying a seed replays the masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { seed: u64 },
}

/// Gradients keyed by parameter name.
pub type GradientMap<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: Vec<Param<T>>,
    outputs: BTreeMap<String, NodeId>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            params: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            inputs: self.inputs.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    node: p.node,
                })
                .collect(),
            outputs: self.outputs.clone(),
        }
    }

    fn push(&mut self, op: Op, shape: NodeShape) -> NodeId {
        let trainable = match op {
            Op::Param(_) => true,
            _ => op.operands().iter().any(|o| self.nodes[o.0].trainable),
        };
        let id = NodeId(self.nodes.len());
        let name = format!("{}#{}", op.kind(), id.0);
        self.nodes.push(Node {
            name,
            op,
            shape,
            trainable,
        });
        id
    }

    fn check(&self, id: NodeId) -> Result<&NodeShape> {
        self.nodes
            .get(id.0)
            .map(|n| &n.shape)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", id.0)))
    }

    /// Gives a node a human-readable name (used in diagnostics).
    pub fn label(&mut self, id: NodeId, name: impl Into<String>) -> NodeId {
        self.nodes[id.0].name = name.into();
        id
    }

    /// Last node carrying `name`.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().rposition(|n| n.name == name).map(NodeId)
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn node_shape(&self, id: NodeId) -> &NodeShape {
        &self.nodes[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, name: &str, dims: &[usize], batched: bool) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate input `{name}`")));
        }
        if dims.contains(&0) {
            return Err(Error::shape(name, "zero extent"));
        }
        let id = self.push(
            Op::Input,
            NodeShape {
                batched,
                dims: dims.to_vec(),
            },
        );
        self.label(id, name);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let id = self.push(
            Op::Param(self.params.len()),
            NodeShape {
                batched: false,
                dims: value.shape().to_vec(),
            },
        );
        self.label(id, name);
        self.params.push(Param {
            name: name.to_string(),
            value,
            node: id,
        });
        Ok(id)
    }

    pub fn output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.outputs.insert(name.to_string(), id);
        Ok(())
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn elementwise_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<NodeShape> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa.dims != sb.dims {
            return Err(Error::shape(ctx, format!("{:?} vs {:?}", sa.dims, sb.dims)));
        }
        Ok(NodeShape {
            batched: sa.batched || sb.batched,
            dims: sa.dims.clone(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    /// `a · b` over `a`'s last axis. `b` must be unbatched and either a matrix
    /// `[k, m]` (or `[m, k]` with `trans_b`) or a vector `[k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.clone(), self.check(b)?.clone());
        if sb.batched {
            return Err(Error::shape("matmul", "right operand must not be batched"));
        }
        let k = *sa
            .dims
            .last()
            .ok_or_else(|| Error::shape("matmul", "left operand is a scalar"))?;
        let (bk, m) = match (sb.dims.as_slice(), trans_b) {
            (&[r, c], false) => (r, Some(c)),
            (&[r, c], true) => (c, Some(r)),
            (&[r], false) => (r, None),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("bad right operand {:?}", sb.dims),
                ))
            }
        };
        if bk != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", sa.dims, sb.dims),
            ));
        }
        let mut dims = sa.dims[..sa.dims.len() - 1].to_vec();
        dims.extend(m);
        Ok(self.push(
            Op::MatMul { a, b, trans_b },
            NodeShape {
                batched: sa.batched,
                dims,
            },
        ))
    }

    /// Mode-`mode` tensor-times-vector contraction, applied per record.
    pub fn ttv(&mut self, tensor: NodeId, vector: NodeId, mode: usize) -> Result<NodeId> {
        let (st, sv) = (self.check(tensor)?.clone(), self.check(vector)?.clone());
        if mode >= st.dims.len() || sv.dims.len() != 1 || sv.dims[0] != st.dims[mode] {
            return Err(Error::shape(
                "ttv",
                format!("tensor {:?} mode {mode} with vector {:?}", st.dims, sv.dims),
            ));
        }
        let mut dims = st.dims.clone();
        dims.remove(mode);
        Ok(self.push(
            Op::Ttv {
                tensor,
                vector,
                mode,
            },
            NodeShape {
                batched: st.batched || sv.batched,
                dims,
            },
        ))
    }

    /// Same-padded width-3 convolution of `[c_in, len]` records.
    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let si = self.check(input)?.clone();
        let sk = self.check(kernel)?.clone();
        let sb = self.check(bias)?.clone();
        let ok = si.dims.len() == 2
            && sk.dims.len() == 3
            && !sk.batched
            && !sb.batched
            && sk.dims[2] == KERNEL_WIDTH
            && sk.dims[1] == si.dims[0]
            && sb.dims == [sk.dims[0]];
        if !ok {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    si.dims, sk.dims, sb.dims
                ),
            ));
        }
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                bias,
            },
            NodeShape {
                batched: si.batched,
                dims: vec![sk.dims[0], si.dims[1]],
            },
        ))
    }

    pub fn maxpool1d(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.check(input)?.clone();
        match s.dims.last() {
            Some(&len) if len >= 2 => {}
            _ => {
                return Err(Error::shape(
                    "maxpool1d",
                    format!("length < 2 in {:?}", s.dims),
                ))
            }
        }
        let mut dims = s.dims.clone();
        *dims.last_mut().unwrap() /= 2;
        Ok(self.push(
            Op::MaxPool1d(input),
            NodeShape {
                batched: s.batched,
                dims,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.clone();
        Ok(self.push(Op::Relu(x), s))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.clone();
        Ok(self.push(Op::Sigmoid(x), s))
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let s = self.check(x)?.clone();
        Ok(self.push(Op::Dropout { input: x, rate }, s))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.clone(), self.check(b)?.clone());
        let n = sa.dims.len();
        if n == 0
            || sb.dims.len() != n
            || sa.dims[..n - 1] != sb.dims[..n - 1]
            || sa.batched != sb.batched
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} ++ {:?}", sa.dims, sb.dims),
            ));
        }
        let mut dims = sa.dims.clone();
        dims[n - 1] += sb.dims[n - 1];
        Ok(self.push(
            Op::Concat(a, b),
            NodeShape {
                batched: sa.batched,
                dims,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let s = self.check(x)?.clone();
        if dims.iter().product::<usize>() != s.numel() || dims.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", s.dims)));
        }
        Ok(self.push(
            Op::Reshape(x),
            NodeShape {
                batched: s.batched,
                dims: dims.to_vec(),
            },
        ))
    }

    /// Mean over every element, batch axis included.
    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(
            Op::ReduceMean(x),
            NodeShape {
                batched: false,
                dims: vec![],
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, prob: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (self.check(prob)?.clone(), self.check(target)?.clone());
        if sp != st {
            return Err(Error::shape("bce", format!("{sp:?} vs {st:?}")));
        }
        Ok(self.push(
            Op::Bce { prob, target },
            NodeShape {
                batched: false,
                dims: vec![],
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logit)` against 0/1 targets,
    /// computed as `max(z, 0) − y·z + ln(1 + e^{−|z|})`. Finite for every
    /// finite logit, so no clamp is needed and the gradient `σ(z) − y` never
    /// vanishes on confidently wrong records.
    pub fn bce_logits(&mut self, logit: NodeId, target: NodeId) -> Result<NodeId> {
        let (sl, st) = (self.check(logit)?.clone(), self.check(target)?.clone());
        if sl != st {
            return Err(Error::shape("bce_logits", format!("{sl:?} vs {st:?}")));
        }
        Ok(self.push(
            Op::BceLogits { logit, target },
            NodeShape {
                batched: false,
                dims: vec![],
            },
        ))
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every node that some target depends on.
    fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut needed[id.0], true) {
                continue;
            }
            stack.extend(self.nodes[id.0].op.operands());
        }
        needed
    }

    /// Evaluates every node `targets` depend on.
    pub fn forward(
        &self,
        bindings: &[(&str, &Tensor<T>)],
        mode: Mode,
        targets: &[NodeId],
    ) -> Result<Evaluation<T>> {
        for t in targets {
            self.check(*t)?;
        }
        let needed = self.ancestors(targets);
        let mut batch: Option<usize> = None;
        for (name, value) in bindings {
            let id = *self
                .inputs
                .get(*name)
                .ok_or_else(|| Error::InvalidArgument(format!("no input named `{name}`")))?;
            let shape = &self.nodes[id.0].shape;
            let feature = if shape.batched {
                let b = *value.shape().first().unwrap_or(&0);
                if *batch.get_or_insert(b) != b {
                    return Err(Error::shape(
                        *name,
                        "inconsistent batch sizes across inputs",
                    ));
                }
                &value.shape()[1.min(value.rank())..]
            } else {
                value.shape()
            };
            if feature != shape.dims.as_slice() || (shape.batched && value.rank() == 0) {
                return Err(Error::shape(
                    *name,
                    format!(
                        "declared {:?} (batched: {}), bound {:?}",
                        shape.dims,
                        shape.batched,
                        value.shape()
                    ),
                ));
            }
        }
        let batch = batch.unwrap_or(1);

        let mut eval = Evaluation {
            values: vec![None; self.nodes.len()],
            argmax: vec![None; self.nodes.len()],
            masks: vec![None; self.nodes.len()],
            fresh: needed,
            batch,
            mode,
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if !eval.fresh[i] {
                continue;
            }
            let value = match node.op {
                Op::Input => {
                    let (_, v) = bindings
                        .iter()
                        .find(|(n, _)| *n == node.name)
                        .ok_or_else(|| Error::UnboundInput(node.name.clone()))?;
                    (*v).clone()
                }
                Op::Param(p) => self.params[p].value.clone(),
                _ => self.eval_node(i, node, &mut eval, mode)?,
            };
            self.store(&mut eval, i, value)?;
        }
        Ok(eval)
    }

    fn store(&self, eval: &mut Evaluation<T>, i: usize, value: Tensor<T>) -> Result<()> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                node: self.nodes[i].name.clone(),
            });
        }
        eval.values[i] = Some(Arc::new(value));
        Ok(())
    }

    /// Re-evaluates `base` after the parameters at indices `changed` were
    /// modified, recomputing only nodes downstream of them. Inputs and mode
    /// are those of `base`. The result equals a fresh [`Graph::forward`] over
    /// the nodes `base` evaluated.
    pub fn reforward(&self, base: &Evaluation<T>, changed: &[usize]) -> Result<Evaluation<T>> {
        if base.values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument(
                "evaluation belongs to a different graph".into(),
            ));
        }
        let mut dirty = vec![false; self.nodes.len()];
        for &p in changed {
            let param = self
                .params
                .get(p)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter index {p}")))?;
            dirty[param.node.0] = true;
        }
        let mut eval = base.clone();
        eval.fresh.iter_mut().for_each(|f| *f = false);
        for (i, node) in self.nodes.iter().enumerate() {
            if base.values[i].is_none() {
                continue;
            }
            if !dirty[i] {
                if !node.op.operands().iter().any(|o| dirty[o.0]) {
                    continue;
                }
                dirty[i] = true;
            }
            eval.fresh[i] = true;
            let value = match node.op {
                Op::Param(p) => self.params[p].value.clone(),
                Op::Input => unreachable!("inputs are never dirty"),
                _ => self.eval_node(i, node, &mut eval, base.mode)?,
            };
            self.store(&mut eval, i, value)?;
        }
        Ok(eval)
    }

    fn runtime_shape(&self, id: usize, batch: usize) -> Vec<usize> {
        let s = &self.nodes[id].shape;
        if s.batched {
            std::iter::once(batch)
                .chain(s.dims.iter().copied())
                .collect()
        } else {
            s.dims.clone()
        }
    }

    fn eval_node(
        &self,
        i: usize,
        node: &Node,
        eval: &mut Evaluation<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let shape = self.runtime_shape(i, eval.batch);
        let data = match node.op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => broadcast_zip(eval.get(a), eval.get(b), |x, y| x + y),
            Op::Mul(a, b) => broadcast_zip(eval.get(a), eval.get(b), |x, y| x * y),
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (eval.get(a), eval.get(b));
                let k = *self.nodes[a.0].shape.dims.last().unwrap();
                let m = vb.len() / k;
                kernels::matmul(va.data(), vb.data(), va.len() / k, k, m, trans_b)
            }
            Op::Ttv {
                tensor,
                vector,
                mode,
            } => {
                let l = self.ttv_layout(tensor, vector, mode, eval.batch);
                kernels::ttv(eval.get(tensor).data(), eval.get(vector).data(), l)
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let (cin, len) = self.conv_dims(input);
                let cout = self.nodes[kernel.0].shape.dims[0];
                let rows = self.rows(input, eval.batch);
                kernels::conv1d(
                    eval.get(input).data(),
                    eval.get(kernel).data(),
                    eval.get(bias).data(),
                    rows,
                    cin,
                    cout,
                    len,
                )
            }
            Op::MaxPool1d(x) => {
                let len = *self.nodes[x.0].shape.dims.last().unwrap();
                let v = eval.get(x);
                let (out, arg) = kernels::maxpool2(v.data(), v.len() / len, len);
                eval.argmax[i] = Some(Arc::new(arg));
                out
            }
            Op::Relu(x) => eval.get(x).data().iter().map(|&v| v.max(T::ZERO)).collect(),
            Op::Sigmoid(x) => eval
                .get(x)
                .data()
                .iter()
                .map(|&v| kernels::sigmoid(v))
                .collect(),
            Op::Dropout { input, rate } => match mode {
                Mode::Training { seed } if rate > 0.0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let keep = T::lit(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..eval.get(input).len())
                        .map(|_| {
                            if rng.gen::<f64>() >= rate {
                                keep
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    let out = eval
                        .get(input)
                        .data()
                        .iter()
                        .zip(&mask)
                        .map(|(&v, &m)| v * m)
                        .collect();
                    eval.masks[i] = Some(Arc::new(mask));
                    out
                }
                _ => eval.get(input).data().to_vec(),
            },
            Op::Concat(a, b) => {
                let (va, vb) = (eval.get(a), eval.get(b));
                let na = *self.nodes[a.0].shape.dims.last().unwrap();
                let nb = *self.nodes[b.0].shape.dims.last().unwrap();
                let mut out = Vec::with_capacity(va.len() + vb.len());
                for (ra, rb) in va.data().chunks(na).zip(vb.data().chunks(nb)) {
                    out.extend_from_slice(ra);
                    out.extend_from_slice(rb);
                }
                out
            }
            Op::Reshape(x) => eval.get(x).data().to_vec(),
            Op::ReduceMean(x) => {
                let v = eval.get(x);
                let s = v.data().iter().fold(T::ZERO, |acc, &e| acc + e);
                vec![s / T::lit(v.len() as f64)]
            }
            Op::Bce { prob, target } => {
                let (p, y) = (eval.get(prob), eval.get(target));
                let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
                let total = p
                    .data()
                    .iter()
                    .zip(y.data())
                    .fold(T::ZERO, |acc, (&p, &y)| {
                        let p = p.max(lo).min(hi);
                        acc - (y * p.ln() + (T::ONE - y) * (T::ONE - p).ln())
                    });
                vec![total / T::lit(p.len() as f64)]
            }
            Op::BceLogits { logit, target } => {
                let (z, y) = (eval.get(logit), eval.get(target));
                let total = z
                    .data()
                    .iter()
                    .zip(y.data())
                    .fold(T::ZERO, |acc, (&z, &y)| {
                        acc + z.max(T::ZERO) - y * z + (-z.abs()).exp().ln_1p()
                    });
                vec![total / T::lit(z.len() as f64)]
            }
        };
        Tensor::new(&shape, data)
            .map_err(|_| Error::shape(node.name.clone(), "internal shape error"))
    }

    /// Number of leading rows (batch included) in front of the per-record
    /// `[c, len]` block of a conv input.
    fn rows(&self, id: NodeId, batch: usize) -> usize {
        if self.nodes[id.0].shape.batched {
            batch
        } else {
            1
        }
    }

    fn conv_dims(&self, input: NodeId) -> (usize, usize) {
        let d = &self.nodes[input.0].shape.dims;
        (d[0], d[1])
    }

    fn ttv_layout(&self, tensor: NodeId, vector: NodeId, mode: usize, batch: usize) -> TtvLayout {
        let st = &self.nodes[tensor.0].shape;
        let sv = &self.nodes[vector.0].shape;
        let batched = st.batched || sv.batched;
        TtvLayout {
            batch: if batched { batch } else { 1 },
            tensor_batched: st.batched,
            vector_batched: sv.batched,
            outer: st.dims[..mode].iter().product(),
            n: st.dims[mode],
            inner: st.dims[mode + 1..].iter().product(),
        }
    }

    /// Which side of every non-differentiable point the pass took: ReLU
    /// input signs, max-pool winners and BCE clamp states, in node order,
    /// over the nodes that pass computed. Two evaluations of the same node set
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self, eval: &Evaluation<T>) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !eval.fresh[i] {
                continue;
            }
            match node.op {
                Op::Relu(x) => {
                    out.extend(eval.get(x).data().iter().map(|&v| u32::from(v > T::ZERO)))
                }
                Op::MaxPool1d(_) => {
                    out.extend(eval.argmax[i].iter().flat_map(|a| a.iter().copied()))
                }
                Op::Bce { prob, .. } => {
                    let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
                    out.extend(
                        eval.get(prob)
                            .data()
                            .iter()
                            .map(|&p| u32::from(p < lo) + 2 * u32::from(p > hi)),
                    );
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse-mode gradients of a scalar node with respect to every parameter
    /// it depends on.
    pub fn backward(&self, eval: &Evaluation<T>, loss: NodeId) -> Result<GradientMap<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", loss.0)))?;
        if !node.shape.is_scalar() {
            return Err(Error::NonScalarLoss(node.name.clone()));
        }
        if eval.values.get(loss.0).is_none_or(|v| v.is_none()) {
            return Err(Error::NotEvaluated(node.name.clone()));
        }
        let needed = self.ancestors(&[loss]);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !needed[i] || !node.trainable {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, node, &g, eval, &mut grads);
        }

        let mut out = GradientMap::new();
        for p in &self.params {
            if needed[p.node.0] {
                let g = grads[p.node.0]
                    .take()
                    .unwrap_or_else(|| vec![T::ZERO; p.value.len()]);
                out.insert(p.name.clone(), Tensor::new(p.value.shape(), g)?);
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn backprop_node(
        &self,
        i: usize,
        node: &Node,
        g: &[T],
        eval: &Evaluation<T>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let mut acc = |id: NodeId, delta: Vec<T>| accumulate(grads, id, delta);
        match node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(x) {
                        acc(x, reduce_to(g, eval.get(x).len()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (eval.get(a), eval.get(b));
                if self.wants(a) {
                    let d = broadcast_zip_slices(g, vb.data(), |g, y| g * y);
                    acc(a, reduce_to(&d, va.len()));
                }
                if self.wants(b) {
                    let d = broadcast_zip_slices(g, va.data(), |g, x| g * x);
                    acc(b, reduce_to(&d, vb.len()));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (eval.get(a), eval.get(b));
                let k = *self.nodes[a.0].shape.dims.last().unwrap();
                let m = vb.len() / k;
                let rows = va.len() / k;
                let mut da = self.wants(a).then(|| vec![T::ZERO; va.len()]);
                let mut db = self.wants(b).then(|| vec![T::ZERO; vb.len()]);
                kernels::matmul_backward(
                    va.data(),
                    vb.data(),
                    g,
                    rows,
                    k,
                    m,
                    trans_b,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = da {
                    acc(a, d);
                }
                if let Some(d) = db {
                    acc(b, d);
                }
            }
            Op::Ttv {
                tensor,
                vector,
                mode,
            } => {
                let (vt, vv) = (eval.get(tensor), eval.get(vector));
                let l = self.ttv_layout(tensor, vector, mode, eval.batch);
                let mut dt = self.wants(tensor).then(|| vec![T::ZERO; vt.len()]);
                let mut dv = self.wants(vector).then(|| vec![T::ZERO; vv.len()]);
                kernels::ttv_backward(
                    vt.data(),
                    vv.data(),
                    g,
                    l,
                    dt.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(d) = dt {
                    acc(tensor, d);
                }
                if let Some(d) = dv {
                    acc(vector, d);
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let (cin, len) = self.conv_dims(input);
                let cout = self.nodes[kernel.0].shape.dims[0];
                let rows = self.rows(input, eval.batch);
                let (vx, vk) = (eval.get(input), eval.get(kernel));
                let mut dx = self.wants(input).then(|| vec![T::ZERO; vx.len()]);
                let mut dk = self.wants(kernel).then(|| vec![T::ZERO; vk.len()]);
                let mut db = self.wants(bias).then(|| vec![T::ZERO; cout]);
                kernels::conv1d_backward(
                    vx.data(),
                    vk.data(),
                    g,
                    rows,
                    cin,
                    cout,
                    len,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (id, d) in [(input, dx), (kernel, dk), (bias, db)] {
                    if let Some(d) = d {
                        acc(id, d);
                    }
                }
            }
            Op::MaxPool1d(x) => {
                let mut dx = vec![T::ZERO; eval.get(x).len()];
                kernels::maxpool2_backward(g, eval.argmax[i].as_deref().unwrap(), &mut dx);
                acc(x, dx);
            }
            Op::Relu(x) => {
                let v = eval.get(x);
                let d = v
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
                    .collect();
                acc(x, d);
            }
            Op::Sigmoid(x) => {
                let y = eval.values[i].as_ref().unwrap();
                let d = y
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &g)| g * s * (T::ONE - s))
                    .collect();
                acc(x, d);
            }
            Op::Dropout { input, .. } => {
                let d = match &eval.masks[i] {
                    Some(mask) => g.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect(),
                    None => g.to_vec(),
                };
                acc(input, d);
            }
            Op::Concat(a, b) => {
                let na = *self.nodes[a.0].shape.dims.last().unwrap();
                let nb = *self.nodes[b.0].shape.dims.last().unwrap();
                let mut da = Vec::with_capacity(g.len() / (na + nb) * na);
                let mut db = Vec::with_capacity(g.len() / (na + nb) * nb);
                for row in g.chunks(na + nb) {
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                if self.wants(a) {
                    acc(a, da);
                }
                if self.wants(b) {
                    acc(b, db);
                }
            }
            Op::Reshape(x) => acc(x, g.to_vec()),
            Op::ReduceMean(x) => {
                let n = eval.get(x).len();
                acc(x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Bce { prob, target } => {
                let (p, y) = (eval.get(prob), eval.get(target));
                let n = T::lit(p.len() as f64);
                let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
                let d = p
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &y)| {
                        if p <= lo || p >= hi {
                            T::ZERO
                        } else {
                            g[0] * ((T::ONE - y) / (T::ONE - p) - y / p) / n
                        }
                    })
                    .collect();
                if self.wants(prob) {
                    acc(prob, d);
                }
            }
            Op::BceLogits { logit, target } => {
                let (z, y) = (eval.get(logit), eval.get(target));
                let n = T::lit(z.len() as f64);
                let d = z
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / n)
                    .collect();
                if self.wants(logit) {
                    acc(logit, d);
                }
            }
        }
    }

    /// Named output values of an evaluation (outputs that were not computed
    /// are omitted).
    pub fn output_values<'e>(&self, eval: &'e Evaluation<T>) -> BTreeMap<String, &'e Tensor<T>> {
        self.outputs
            .iter()
            .filter_map(|(name, id)| eval.value(*id).ok().map(|v| (name.clone(), v)))
            .collect()
    }
}

/// Node values produced by one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Evaluation<T = f32> {
    values: Vec<Option<Arc<Tensor<T>>>>,
    argmax: Vec<Option<Arc<Vec<u32>>>>,
    masks: Vec<Option<Arc<Vec<T>>>>,
    /// Nodes computed by the pass that produced this evaluation (all needed
    /// nodes for a forward, the downstream set for a re-evaluation).
    fresh: Vec<bool>,
    batch: usize,
    mode: Mode,
}

impl<T: Element> Evaluation<T> {
    fn get(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0]
            .as_deref()
            .expect("operand evaluated before its consumer")
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values
            .get(id.0)
            .and_then(Option::as_deref)
            .ok_or_else(|| Error::NotEvaluated(format!("node {}", id.0)))
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Elementwise op where the shorter operand repeats over the longer one
/// (an unbatched operand broadcast across the batch).
fn broadcast_zip<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.len() >= b.len() {
        broadcast_zip_slices(a.data(), b.data(), f)
    } else {
        broadcast_zip_slices(b.data(), a.data(), |y, x| f(x, y))
    }
}

fn broadcast_zip_slices<T: Element>(long: &[T], short: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let n = short.len();
    long.iter()
        .enumerate()
        .map(|(i, &x)| f(x, short[i % n]))
        .collect()
}

/// Sums a batched gradient down to an unbatched operand's size.
fn reduce_to<T: Element>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::ZERO; len];
    for chunk in g.chunks(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}
