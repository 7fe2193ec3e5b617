//! Central-difference verification of reverse-mode gradients (64-bit only).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Evaluation, GradientMap, Graph, Mode, NodeId};
use crate::models::{build_model, ModelSpec};
use crate::tensor::Tensor;

/// Above this many parameters only a random subset of coordinates is perturbed.
pub const EXHAUSTIVE_LIMIT: usize = 10_000;
/// Coordinates sampled per parameter tensor once sampling kicks in.
pub const SAMPLES_PER_TENSOR: usize = 256;
/// Step used by [`model_grad_check`].
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Records in the synthetic batch of [`model_grad_check`].
pub const MODEL_CHECK_BATCH: usize = 2;
/// Inputs of [`model_grad_check`] are drawn from `U(-s, s)` with this `s`.
pub const MODEL_CHECK_INPUT_SCALE: f64 = 0.5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Analytic and central-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Coordinates skipped because the ±ε passes took different branches.
    pub kinks: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `loss` with central differences.
///
/// A central difference is not a derivative estimate when the interval
/// `[θ − ε, θ + ε]` straddles a ReLU, max-pool or clamp switch. Such
/// coordinates are detected by comparing [`Graph::branch_pattern`] of the two
/// passes, skipped, and counted in [`GradCheckReport::kinks`].
///
/// `mode` is replayed unchanged for every perturbed forward pass, so dropout
/// masks stay fixed. `seed` drives coordinate sampling on large graphs.
pub fn grad_check(
    graph: &mut Graph<f64>,
    bindings: &[(&str, &Tensor<f64>)],
    loss: NodeId,
    epsilon: f64,
    mode: Mode,
    seed: u64,
) -> Result<GradCheckReport> {
    let eval = graph.forward(bindings, mode, &[loss])?;
    let analytic = graph.backward(&eval, loss)?;
    compare_gradients(graph, bindings, loss, &analytic, epsilon, mode, seed)
}

/// Like [`grad_check`] but against caller-supplied analytic gradients.
pub fn compare_gradients(
    graph: &mut Graph<f64>,
    bindings: &[(&str, &Tensor<f64>)],
    loss: NodeId,
    analytic: &GradientMap<f64>,
    epsilon: f64,
    mode: Mode,
    seed: u64,
) -> Result<GradCheckReport> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let sample = graph.param_count() > EXHAUSTIVE_LIMIT;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
        kinks: 0,
    };

    let base = graph.forward(bindings, mode, &[loss])?;
    for p in 0..graph.params().len() {
        let name = graph.params()[p].name.clone();
        let Some(grad) = analytic.get(&name) else {
            continue;
        };
        let len = graph.params()[p].value.len();
        let coords: Vec<usize> = if sample && len > SAMPLES_PER_TENSOR {
            let mut c = index::sample(&mut rng, len, SAMPLES_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..len).collect()
        };
        for i in coords {
            let original = graph.params()[p].value.data()[i];
            graph.params_mut()[p].value.data_mut()[i] = original + epsilon;
            let plus = scalar(graph, &base, p, loss);
            graph.params_mut()[p].value.data_mut()[i] = original - epsilon;
            let minus = scalar(graph, &base, p, loss);
            graph.params_mut()[p].value.data_mut()[i] = original;
            let ((plus, plus_branches), (minus, minus_branches)) = (plus?, minus?);
            if plus_branches != minus_branches {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grad.data()[i], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = grad.data()[i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Grad-checks a freshly initialised model in 64-bit mode on a small
/// synthetic batch.
///
/// Everything derives from `spec.seed`: the parameters, the inputs
/// (`MODEL_CHECK_BATCH` records, uniform in `±MODEL_CHECK_INPUT_SCALE`), the
/// dropout masks (training mode, so dropout is exercised) and coordinate
/// sampling. Labels alternate starting with fake.
///
/// The batch is small because the loss is a batch mean: per-coordinate
/// gradients shrink with the batch size while the rounding of the loss does
/// not, so a central difference at fixed ε loses relative precision as the
/// batch grows.
pub fn model_grad_check(spec: &ModelSpec, epsilon: f64) -> Result<GradCheckReport> {
    let mut model = build_model::<f64>(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut uniform = |d: usize| {
        let n = MODEL_CHECK_BATCH * d;
        let s = MODEL_CHECK_INPUT_SCALE;
        Tensor::new(
            &[MODEL_CHECK_BATCH, d],
            (0..n).map(|_| rng.gen_range(-s..s)).collect(),
        )
    };
    let x1 = uniform(spec.d1)?;
    let x2 = spec.d2.map(&mut uniform).transpose()?;
    let labels = (0..MODEL_CHECK_BATCH)
        .map(|i| if i % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    let y = Tensor::new(&[MODEL_CHECK_BATCH, 1], labels)?;
    let mut bindings = vec![("x1", &x1), ("label", &y)];
    if let Some(x2) = &x2 {
        bindings.push(("x2", x2));
    }
    let loss = model.loss_node();
    let mode = Mode::Training { seed: spec.seed };
    grad_check(model.graph_mut(), &bindings, loss, epsilon, mode, spec.seed)
}

fn scalar(
    graph: &Graph<f64>,
    base: &Evaluation<f64>,
    param: usize,
    loss: NodeId,
) -> Result<(f64, Vec<u32>)> {
    let eval = graph.reforward(base, &[param])?;
    Ok((eval.value(loss)?.data()[0], graph.branch_pattern(&eval)))
}
