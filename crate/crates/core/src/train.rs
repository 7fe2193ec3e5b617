//! Adam training with plateau LR reduction and early stopping, plus EER/ROC
//! metrics and the in-domain / cross-domain evaluation protocol.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    batch_iter, domain_tag, Batch, DomainSplits, ViewPair, LABEL_BONAFIDE, LABEL_FAKE,
};
use crate::error::{Error, Result};
use crate::graph::{GradientMap, Mode, Param, PROB_CLAMP};
use crate::models::{build_model, BatchViews, ModelInstance, ModelSpec};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Records scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

// ---------------------------------------------------------------------------
// Adam

/// First and second moments per parameter tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_params(params: &[Param<T>]) -> Self {
        Self::new(params.iter().map(|p| p.value.shape()))
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam",
            format!(
                "{} parameters, {} gradients, {} moment tensors",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam",
                format!(
                    "tensor {i}: param {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    state.m[i].shape()
                ),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let c1 = T::lit(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::lit(1.0 - ADAM_BETA2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPSILON));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::ONE - b1) * g;
            *v = b2 * *v + (T::ONE - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

/// EER in percent and the score threshold at the crossing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let mut neg = 0;
    let mut pos = 0;
    for &l in labels {
        match l {
            LABEL_BONAFIDE => neg += 1,
            LABEL_FAKE => pos += 1,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "metric labels must be 0 or 1, got {other}"
                )))
            }
        }
    }
    if neg == 0 || pos == 0 {
        return Err(Error::SingleClass);
    }
    Ok((neg, pos))
}

/// Sorted unique scores with, per score, the number of bonafide and fake
/// records holding it.
fn score_groups(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, usize, usize)>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metric",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "score {s} is not comparable"
        )));
    }
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, l) in pairs {
        if groups.last().is_none_or(|g| g.0 != s) {
            groups.push((s, 0, 0));
        }
        let g = groups.last_mut().expect("pushed above");
        if l == LABEL_FAKE {
            g.2 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok(groups)
}

/// Equal error rate with fake (label 1) as the positive class.
///
/// At threshold `t`, FPR is the fraction of bonafide scores `≥ t` and FNR the
/// fraction of fake scores `< t`. The sweep visits −∞, every unique score in
/// ascending order and +∞; the FPR/FNR crossing is linearly interpolated
/// between the two sweep points that bracket it. When the crossing lies past
/// the largest score the reported threshold is that score.
pub fn compute_eer(scores: &[f64], labels: &[u8]) -> Result<Eer> {
    let (neg, pos) = class_counts(labels)?;
    let groups = score_groups(scores, labels)?;
    let (nf, pf) = (neg as f64, pos as f64);

    // (threshold, FPR, FNR) at each sweep point.
    let mut sweep = Vec::with_capacity(groups.len() + 2);
    sweep.push((f64::NEG_INFINITY, 1.0, 0.0));
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    for &(s, n, p) in &groups {
        sweep.push((s, (neg - neg_below) as f64 / nf, pos_below as f64 / pf));
        neg_below += n;
        pos_below += p;
    }
    sweep.push((f64::INFINITY, 0.0, 1.0));

    for w in sweep.windows(2) {
        let (t0, fpr0, fnr0) = w[0];
        let (t1, fpr1, fnr1) = w[1];
        let d0 = fpr0 - fnr0;
        let d1 = fpr1 - fnr1;
        if d0 == 0.0 {
            return Ok(Eer {
                eer: 100.0 * fpr0,
                threshold: t0,
            });
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            let threshold = if t0.is_finite() && t1.is_finite() {
                t0 + a * (t1 - t0)
            } else if t0.is_finite() {
                t0
            } else {
                t1
            };
            return Ok(Eer {
                eer: 100.0 * (fpr0 + a * (fpr1 - fpr0)),
                threshold,
            });
        }
    }
    unreachable!("FPR − FNR goes from +1 to −1 across the sweep")
}

/// ROC curve as `(FPR, TPR)` from `(0, 0)` to `(1, 1)`, thresholds descending.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (neg, pos) = class_counts(labels)?;
    let groups = score_groups(scores, labels)?;
    let mut out = Vec::with_capacity(groups.len() + 1);
    out.push((0.0, 0.0));
    let (mut fp, mut tp) = (0usize, 0usize);
    for &(_, n, p) in groups.iter().rev() {
        fp += n;
        tp += p;
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

/// Trapezoidal area under a curve from [`roc_points`].
pub fn roc_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Mean binary cross-entropy of probabilities, clamped like the graph's loss.
pub fn mean_bce(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape(
            "bce",
            format!("{} probabilities, {} labels", probs.len(), labels.len()),
        ));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == LABEL_FAKE {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

// ---------------------------------------------------------------------------
// Training

/// What early stopping and LR reduction watch on the dev split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    #[default]
    Loss,
    Eer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    pub lr_factor: f64,
    /// Epochs without improvement before the LR is multiplied by `lr_factor`.
    pub lr_patience: usize,
    pub min_lr: f64,
    /// Smallest decrease of the monitored value that counts as improvement.
    pub min_delta: f64,
    pub monitor: Monitor,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            early_stop_patience: 10,
            lr_factor: 0.5,
            lr_patience: 5,
            min_lr: 1e-6,
            min_delta: 1e-5,
            monitor: Monitor::Loss,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0
            || self.epochs == 0
            || self.early_stop_patience == 0
            || self.lr_patience == 0
        {
            return bad("batch size, epochs and patiences must be positive".into());
        }
        if self.early_stop_patience >= self.epochs {
            return bad(format!(
                "early-stop patience {} must be below the epoch budget {}",
                self.early_stop_patience, self.epochs
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!(
                "lr factor must lie in (0, 1), got {}",
                self.lr_factor
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!("min lr must lie in [0, lr], got {}", self.min_lr));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad(format!("min delta must be ≥ 0, got {}", self.min_delta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Percent; absent when the dev split holds a single class.
    pub dev_eer: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored at the end.
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        h
    }
}

/// Anything the training loop can fit: trainable f32 parameters, batch
/// gradients and inference-mode scoring.
pub trait Learner {
    fn params(&self) -> &[Param<f32>];
    fn params_mut(&mut self) -> &mut [Param<f32>];
    fn loss_and_grads(&self, batch: &Batch, mode: Mode) -> Result<(f32, GradientMap<f32>)>;
    /// Probability of the fake class for every record of `pair`, in order.
    fn predict(&self, pair: &ViewPair) -> Result<Vec<f32>>;
}

impl ModelInstance<f32> {
    fn views<'a>(
        &self,
        x1: &'a Tensor<f32>,
        x2: Option<&'a Tensor<f32>>,
    ) -> Result<BatchViews<'a, f32>> {
        let x2 = if self.spec().kind.views() == 2 {
            Some(x2.ok_or_else(|| Error::shape("views", "fusion model needs a second view"))?)
        } else {
            None
        };
        Ok(BatchViews { x1, x2 })
    }
}

impl Learner for ModelInstance<f32> {
    fn params(&self) -> &[Param<f32>] {
        self.graph().params()
    }

    fn params_mut(&mut self) -> &mut [Param<f32>] {
        self.graph_mut().params_mut()
    }

    fn loss_and_grads(&self, batch: &Batch, mode: Mode) -> Result<(f32, GradientMap<f32>)> {
        let views = self.views(&batch.x1, batch.x2.as_ref())?;
        ModelInstance::loss_and_grads(self, &views, &batch.labels, mode)
    }

    fn predict(&self, pair: &ViewPair) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(pair.len());
        for batch in batch_iter(pair, EVAL_CHUNK, None)? {
            let views = self.views(&batch.x1, batch.x2.as_ref())?;
            out.extend(self.predict_batch(&views)?);
        }
        Ok(out)
    }
}

fn require_labels(pair: &ViewPair, split: &str) -> Result<()> {
    match pair
        .view1
        .records()
        .iter()
        .find(|r| r.label != LABEL_BONAFIDE && r.label != LABEL_FAKE)
    {
        Some(r) => Err(Error::Unlabeled {
            split: split.into(),
            id: r.id,
            label: r.label,
        }),
        None => Ok(()),
    }
}

/// Result of [`train`]: the learner holds the best epoch's parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
}

fn dev_metrics(learner: &impl Learner, dev: &ViewPair) -> Result<(f64, Option<f64>)> {
    let probs: Vec<f64> = learner.predict(dev)?.into_iter().map(f64::from).collect();
    let labels = dev.labels();
    let loss = mean_bce(&probs, &labels)?;
    let eer = match compute_eer(&probs, &labels) {
        Ok(e) => Some(e.eer),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok((loss, eer))
}

/// Fits `learner` on `train` with Adam and batch-mean BCE.
///
/// After each epoch the dev split is scored in inference mode. The LR is
/// multiplied by `lr_factor` (down to `min_lr`) after `lr_patience` epochs
/// without improvement, training stops after `early_stop_patience` such
/// epochs, and the best epoch's parameters are restored on return.
pub fn train(
    learner: &mut impl Learner,
    train_set: &ViewPair,
    dev: &ViewPair,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::InvalidArgument(
            "train and dev splits must be non-empty".into(),
        ));
    }
    require_labels(train_set, "train")?;
    require_labels(dev, "dev")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::<f32>::for_params(learner.params());
    let mut lr = config.lr;
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_dev_loss = f64::INFINITY;
    let mut best_params: Vec<Tensor<f32>> =
        learner.params().iter().map(|p| p.value.clone()).collect();
    let mut since_best = 0;
    let mut since_lr = 0;
    let mut records = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let shuffle_seed: u64 = rng.gen();
        let mut total = 0f64;
        for (b, batch) in batch_iter(train_set, config.batch_size, Some(shuffle_seed))?.enumerate()
        {
            let mode = Mode::Training { seed: rng.gen() };
            let (loss, grads) = match learner.loss_and_grads(&batch, mode) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { epoch, batch: b }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            total += f64::from(loss) * batch.labels.len() as f64;
            let names: Vec<String> = learner.params().iter().map(|p| p.name.clone()).collect();
            let zero: Vec<Tensor<f32>>;
            let grads: Vec<&Tensor<f32>> = if names.iter().all(|n| grads.contains_key(n)) {
                names.iter().map(|n| &grads[n]).collect()
            } else {
                zero = learner
                    .params()
                    .iter()
                    .map(|p| Tensor::zeros(p.value.shape()))
                    .collect();
                names
                    .iter()
                    .zip(&zero)
                    .map(|(n, z)| grads.get(n).unwrap_or(z))
                    .collect()
            };
            let mut params: Vec<&mut Tensor<f32>> = learner
                .params_mut()
                .iter_mut()
                .map(|p| &mut p.value)
                .collect();
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        let train_loss = total / train_set.len() as f64;
        let (dev_loss, dev_eer) = dev_metrics(learner, dev)?;
        if !dev_loss.is_finite() {
            return Err(Error::NanLoss { epoch, batch: 0 });
        }
        let monitored = match config.monitor {
            Monitor::Loss => dev_loss,
            Monitor::Eer => dev_eer.ok_or(Error::SingleClass)?,
        };
        if monitored < best - config.min_delta {
            best = monitored;
            best_epoch = epoch;
            best_dev_loss = dev_loss;
            best_params = learner.params().iter().map(|p| p.value.clone()).collect();
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_eer,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if since_best >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
        if since_lr >= config.lr_patience {
            lr = (lr * config.lr_factor).max(config.min_lr);
            since_lr = 0;
        }
    }

    for (p, best) in learner.params_mut().iter_mut().zip(best_params) {
        p.value = best;
    }
    Ok(TrainOutcome {
        history: TrainHistory {
            epochs: records,
            best_epoch,
            best_dev_loss,
            stopped_early,
        },
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
    /// Fraction correct when scores ≥ 0.5 are called fake.
    pub accuracy: f64,
    pub n_bonafide: usize,
    pub n_fake: usize,
    pub n_total: usize,
    pub train_domain: String,
    pub test_domain: String,
}

/// Scores `test` in inference mode and summarises EER and accuracy.
pub fn evaluate(
    learner: &impl Learner,
    test: &ViewPair,
    train_domain: &str,
    test_domain: &str,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    require_labels(test, "test")?;
    let probs: Vec<f64> = learner.predict(test)?.into_iter().map(f64::from).collect();
    let labels = test.labels();
    let eer = compute_eer(&probs, &labels)?;
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y == LABEL_FAKE))
        .count();
    let n_fake = labels.iter().filter(|&&l| l == LABEL_FAKE).count();
    Ok(EvalReport {
        eer: eer.eer,
        threshold: eer.threshold,
        accuracy: correct as f64 / labels.len() as f64,
        n_bonafide: labels.len() - n_fake,
        n_fake,
        n_total: labels.len(),
        train_domain: train_domain.into(),
        test_domain: test_domain.into(),
    })
}

/// Tag of the single domain a split was drawn from, or `mixed`.
pub fn split_domain(pair: &ViewPair) -> String {
    let mut domains = pair.view1.records().iter().map(|r| r.domain);
    match domains.next() {
        Some(d) if domains.all(|x| x == d) => domain_tag(d),
        Some(_) => "mixed".into(),
        None => "none".into(),
    }
}

#[derive(Clone, Debug)]
pub struct CrossDomainOutcome {
    pub model: ModelInstance<f32>,
    pub history: TrainHistory,
    pub in_domain: EvalReport,
    pub out_domain: EvalReport,
}

/// Trains once on domain `a` and evaluates the restored model on the test
/// splits of `a` and `b`.
pub fn cross_domain_run(
    spec: &ModelSpec,
    a: &DomainSplits,
    b: &DomainSplits,
    config: &TrainConfig,
) -> Result<CrossDomainOutcome> {
    let dims = |d: &DomainSplits| (d.train.view1.dim(), d.train.view2.as_ref().map(|v| v.dim()));
    if dims(a) != dims(b) {
        return Err(Error::shape(
            "cross-domain",
            format!("domain dims differ: {:?} vs {:?}", dims(a), dims(b)),
        ));
    }
    let mut model = build_model::<f32>(spec)?;
    let outcome = train(&mut model, &a.train, &a.dev, config)?;
    let (ta, tb) = (domain_tag(a.domain), domain_tag(b.domain));
    let in_domain = evaluate(&model, &a.test, &ta, &ta)?;
    let out_domain = evaluate(&model, &b.test, &ta, &tb)?;
    Ok(CrossDomainOutcome {
        model,
        history: outcome.history,
        in_domain,
        out_domain,
    })
}
