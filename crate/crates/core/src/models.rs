//! The four downstream architectures and their parameter accounting.
//!
//! | kind     | topology                                                                 |
//! |----------|--------------------------------------------------------------------------|
//! | `fcn`    | x → dense block                                                          |
//! | `cnn`    | x → conv block → flatten → dense block                                   |
//! | `concat` | (x1 → conv block, x2 → conv block) → flatten → concatenate → dense block |
//! | `thama`  | (x1 → conv block, x2 → conv block) → flatten → project → core fusion → square → dense block |
//!
//! The dense block is `dense(128, ReLU) → dropout → dense(64, ReLU) →
//! dropout → dense(1, sigmoid)`. Each conv block is three stages of
//! `conv1d(k=3, same) → ReLU → maxpool(2)` with 64, 128 and 256 filters, and
//! the two views of the fusion kinds use separate conv weights.
//!
//! Trainable parameter counts, with `c(d) = 256·⌊⌊⌊d/2⌋/2⌋/2⌋` the flattened
//! conv width, `CONV = 123 520` the weights of one conv block and
//! `HEAD(n) = 128·n + 8 449` the dense block on an `n`-wide input:
//!
//! * `fcn`: `HEAD(d)`
//! * `cnn`: `CONV + HEAD(c(d))`
//! * `concat`: `2·CONV + HEAD(c(d1) + c(d2))`
//! * `thama`: `2·CONV + d_f·(c(d1) + c(d2)) + CORE + HEAD(d_f)`, where
//!   `CORE = d_f³` for a full core and `r1·r2·r3 + d_f·(r1 + r2 + r3)` for a
//!   factored one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, CoreKind, DEFAULT_FUSED_DIM};
use crate::graph::{GradientMap, Graph, Mode, NodeId};
use crate::layers::{self, Activation, Initializer, CONV_CHANNELS, DEFAULT_DROPOUT, HIDDEN_UNITS};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fcn,
    Cnn,
    Concat,
    Thama,
}

impl ModelKind {
    pub fn is_fusion(self) -> bool {
        matches!(self, ModelKind::Concat | ModelKind::Thama)
    }

    pub fn views(self) -> usize {
        if self.is_fusion() {
            2
        } else {
            1
        }
    }
}

fn default_d_f() -> usize {
    DEFAULT_FUSED_DIM
}

fn default_core() -> CoreKind {
    CoreKind::Full
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub d1: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<usize>,
    #[serde(default = "default_d_f")]
    pub d_f: usize,
    #[serde(default = "default_core")]
    pub core: CoreKind,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, d1: usize, d2: Option<usize>) -> Self {
        ModelSpec {
            kind,
            d1,
            d2,
            d_f: DEFAULT_FUSED_DIM,
            core: CoreKind::Full,
            dropout: DEFAULT_DROPOUT,
            seed: 0,
        }
    }

    pub fn fcn(d: usize) -> Self {
        Self::new(ModelKind::Fcn, d, None)
    }

    pub fn cnn(d: usize) -> Self {
        Self::new(ModelKind::Cnn, d, None)
    }

    pub fn concat(d1: usize, d2: usize) -> Self {
        Self::new(ModelKind::Concat, d1, Some(d2))
    }

    pub fn thama(d1: usize, d2: usize) -> Self {
        Self::new(ModelKind::Thama, d1, Some(d2))
    }

    pub fn with_d_f(mut self, d_f: usize) -> Self {
        self.d_f = d_f;
        self
    }

    pub fn with_core(mut self, core: CoreKind) -> Self {
        self.core = core;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.d1 == 0 {
            return bad("d1 must be positive".into());
        }
        match (self.kind.is_fusion(), self.d2) {
            (true, None) => return bad(format!("{:?} needs two input dims", self.kind)),
            (true, Some(0)) => return bad("d2 must be positive".into()),
            (false, Some(_)) => return bad(format!("{:?} takes a single view", self.kind)),
            _ => {}
        }
        if self.kind != ModelKind::Fcn {
            for d in [Some(self.d1), self.d2].into_iter().flatten() {
                if d < 8 {
                    return bad(format!(
                        "input dim {d} cannot survive three pooling stages (need >= 8)"
                    ));
                }
            }
        }
        if self.d_f == 0 {
            return bad("d_f must be >= 1".into());
        }
        if let CoreKind::Factored { ranks } = self.core {
            if ranks.iter().any(|&r| r == 0 || r > self.d_f) {
                return bad(format!("ranks {ranks:?} must lie in 1..={}", self.d_f));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Trainable parameter count from the closed-form shape formula.
    pub fn analytic_param_count(&self) -> usize {
        let conv_block: usize = CONV_CHANNELS
            .iter()
            .scan(1usize, |cin, &cout| {
                let n = cout * *cin * 3 + cout;
                *cin = cout;
                Some(n)
            })
            .sum();
        let head = |n: usize| {
            let [h1, h2] = HIDDEN_UNITS;
            n * h1 + h1 + h1 * h2 + h2 + h2 + 1
        };
        let c = layers::conv_block_output_dim;
        let d2 = self.d2.unwrap_or(0);
        match self.kind {
            ModelKind::Fcn => head(self.d1),
            ModelKind::Cnn => conv_block + head(c(self.d1)),
            ModelKind::Concat => 2 * conv_block + head(c(self.d1) + c(d2)),
            ModelKind::Thama => {
                let d_f = self.d_f;
                let core = match self.core {
                    CoreKind::Full => d_f * d_f * d_f,
                    CoreKind::Factored {
                        ranks: [r1, r2, r3],
                    } => r1 * r2 * r3 + d_f * (r1 + r2 + r3),
                };
                2 * conv_block + d_f * (c(self.d1) + c(d2)) + core + head(d_f)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Nodes {
    x1: NodeId,
    x2: Option<NodeId>,
    label: NodeId,
    prob: NodeId,
    loss: NodeId,
}

/// A built model: spec, compiled graph and the graph's parameters.
#[derive(Clone, Debug)]
pub struct ModelInstance<T = f32> {
    spec: ModelSpec,
    graph: Graph<T>,
    nodes: Nodes,
}

/// Builds the graph for `spec` with freshly initialised parameters: He-uniform
/// for layers feeding a ReLU, Glorot-uniform for projections, the core and the
/// output unit, zero biases. Initialisation depends only on `spec.seed`.
pub fn build_model<T: Element>(spec: &ModelSpec) -> Result<ModelInstance<T>> {
    spec.validate()?;
    let mut g = Graph::<T>::new();
    let mut init = Initializer::new(spec.seed);
    let x1 = g.input("x1", &[spec.d1], true)?;
    let x2 = match spec.d2 {
        Some(d2) => Some(g.input("x2", &[d2], true)?),
        None => None,
    };
    let label = g.input("label", &[1], true)?;

    let (features, width) = match spec.kind {
        ModelKind::Fcn => (x1, spec.d1),
        ModelKind::Cnn => layers::add_conv_block(&mut g, &mut init, x1, "", spec.d1)?,
        ModelKind::Concat | ModelKind::Thama => {
            let x2 = x2.expect("validated");
            let d2 = spec.d2.expect("validated");
            let (h1, w1) = layers::add_conv_block(&mut g, &mut init, x1, "view1.", spec.d1)?;
            let (h2, w2) = layers::add_conv_block(&mut g, &mut init, x2, "view2.", d2)?;
            if spec.kind == ModelKind::Concat {
                let c = g.concat(h1, h2)?;
                (g.label(c, "concat"), w1 + w2)
            } else {
                let f1 = fusion::add_projection(&mut g, &mut init, h1, "proj1", w1, spec.d_f)?;
                let f2 = fusion::add_projection(&mut g, &mut init, h2, "proj2", w2, spec.d_f)?;
                let core = fusion::init_core(&mut init, spec.d_f, &spec.core);
                let z = fusion::add_tucker_fusion(&mut g, f1, f2, core)?;
                (fusion::add_hadamard_square(&mut g, z)?, spec.d_f)
            }
        }
    };

    let [h1, h2] = HIDDEN_UNITS;
    let mut h = layers::add_dense(
        &mut g,
        &mut init,
        features,
        "fc1",
        width,
        h1,
        Activation::Relu,
    )?;
    h = g.dropout(h, spec.dropout)?;
    h = layers::add_dense(&mut g, &mut init, h, "fc2", h1, h2, Activation::Relu)?;
    h = g.dropout(h, spec.dropout)?;
    let logit = layers::add_dense(&mut g, &mut init, h, "out", h2, 1, Activation::Logit)?;
    let prob = g.sigmoid(logit)?;
    g.label(prob, "prob");
    let loss = g.bce_logits(logit, label)?;
    g.label(loss, "loss");
    g.output("prob", prob)?;
    g.output("loss", loss)?;

    Ok(ModelInstance {
        spec: spec.clone(),
        graph: g,
        nodes: Nodes {
            x1,
            x2,
            label,
            prob,
            loss,
        },
    })
}

/// One batch of aligned views, `[batch, d]` each, with optional 0/1 labels.
#[derive(Clone, Debug)]
pub struct BatchViews<'a, T = f32> {
    pub x1: &'a Tensor<T>,
    pub x2: Option<&'a Tensor<T>>,
}

impl<T: Element> ModelInstance<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    pub fn loss_node(&self) -> NodeId {
        self.nodes.loss
    }

    pub fn prob_node(&self) -> NodeId {
        self.nodes.prob
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn cast<U: Element>(&self) -> ModelInstance<U> {
        ModelInstance {
            spec: self.spec.clone(),
            graph: self.graph.cast(),
            nodes: self.nodes,
        }
    }

    fn check_views(&self, views: &BatchViews<'_, T>) -> Result<usize> {
        let check = |name: &str, x: &Tensor<T>, d: usize| {
            if x.rank() != 2 || x.shape()[1] != d {
                Err(Error::shape(
                    name,
                    format!("expected [batch, {d}], got {:?}", x.shape()),
                ))
            } else {
                Ok(x.shape()[0])
            }
        };
        let b = check("x1", views.x1, self.spec.d1)?;
        match (self.spec.d2, views.x2) {
            (Some(d2), Some(x2)) => {
                if check("x2", x2, d2)? != b {
                    return Err(Error::shape("x2", "batch size differs from x1"));
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::shape("views", "model expects two views, got one"))
            }
            (None, Some(_)) => {
                return Err(Error::shape("views", "model expects one view, got two"))
            }
        }
        Ok(b)
    }

    fn bindings<'a>(
        &self,
        views: &BatchViews<'a, T>,
        labels: Option<&'a Tensor<T>>,
    ) -> Vec<(&'static str, &'a Tensor<T>)> {
        let mut b = vec![("x1", views.x1)];
        if let Some(x2) = views.x2 {
            b.push(("x2", x2));
        }
        if let Some(l) = labels {
            b.push(("label", l));
        }
        b
    }

    /// Probability of the fake class per record (inference mode).
    pub fn predict_batch(&self, views: &BatchViews<'_, T>) -> Result<Vec<T>> {
        self.check_views(views)?;
        let eval = self.graph.forward(
            &self.bindings(views, None),
            Mode::Inference,
            &[self.nodes.prob],
        )?;
        Ok(eval.value(self.nodes.prob)?.data().to_vec())
    }

    fn label_tensor(&self, labels: &[u8], batch: usize) -> Result<Tensor<T>> {
        if labels.len() != batch {
            return Err(Error::shape(
                "labels",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        Tensor::new(
            &[batch, 1],
            labels.iter().map(|&l| T::lit(f64::from(l))).collect(),
        )
    }

    /// Batch-mean BCE without gradients.
    pub fn loss(&self, views: &BatchViews<'_, T>, labels: &[u8], mode: Mode) -> Result<T> {
        let b = self.check_views(views)?;
        let y = self.label_tensor(labels, b)?;
        let eval = self
            .graph
            .forward(&self.bindings(views, Some(&y)), mode, &[self.nodes.loss])?;
        Ok(eval.value(self.nodes.loss)?.data()[0])
    }

    /// Batch-mean BCE and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        views: &BatchViews<'_, T>,
        labels: &[u8],
        mode: Mode,
    ) -> Result<(T, GradientMap<T>)> {
        let b = self.check_views(views)?;
        let y = self.label_tensor(labels, b)?;
        let eval = self
            .graph
            .forward(&self.bindings(views, Some(&y)), mode, &[self.nodes.loss])?;
        let loss = eval.value(self.nodes.loss)?.data()[0];
        Ok((loss, self.graph.backward(&eval, self.nodes.loss)?))
    }

    /// Shapes every parameter must have for this spec, in graph order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.graph
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    #[doc(hidden)]
    pub fn input_nodes(&self) -> (NodeId, Option<NodeId>, NodeId) {
        (self.nodes.x1, self.nodes.x2, self.nodes.label)
    }
}
