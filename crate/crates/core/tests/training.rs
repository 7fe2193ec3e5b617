use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thama_core::checkpoint::{
    load_checkpoint, load_checkpoint_as, save_checkpoint, CheckpointMeta,
};
use thama_core::data::{
    generate_synthetic, Batch, EmbeddingRecord, EmbeddingSet, SynthConfig, ViewPair, DOMAIN_E,
};
use thama_core::graph::{GradientMap, Param};
use thama_core::train::{evaluate, train, Learner, TrainConfig};
use thama_core::{build_model, Error, ErrorCategory, Mode, ModelInstance, ModelSpec};

fn random_set(rng: &mut ChaCha8Rng, dim: usize, labels: &[u8]) -> EmbeddingSet {
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| EmbeddingRecord {
            id: i as u64,
            label,
            domain: DOMAIN_E,
            vector: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
        })
        .collect();
    EmbeddingSet::from_records(dim, records).unwrap()
}

fn random_pair(seed: u64, n: usize, views: usize) -> ViewPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let v1 = random_set(&mut rng, 16, &labels);
    let v2 = (views == 2).then(|| random_set(&mut rng, 16, &labels));
    ViewPair::new(v1, v2).unwrap()
}

fn every_kind() -> [ModelSpec; 4] {
    [
        ModelSpec::fcn(16),
        ModelSpec::cnn(16),
        ModelSpec::concat(16, 16),
        ModelSpec::thama(16, 16).with_d_f(8),
    ]
}

/// Capacity check: regularisation is off so the recorded training-mode loss
/// measures fit alone.
#[test]
fn every_kind_memorizes_sixteen_records() {
    for spec in every_kind() {
        let pair = random_pair(1, 16, spec.kind.views());
        let mut model = build_model::<f32>(&spec.clone().with_seed(2).with_dropout(0.0)).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            early_stop_patience: 199,
            lr_patience: 199,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &pair, &pair, &cfg).unwrap().history;
        let best = h
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.01, "{:?}: best train loss {best}", spec.kind);
    }
}

/// Wraps a real model but scores every record 0.5, so dev loss never moves.
struct Sentinel {
    inner: ModelInstance<f32>,
    calls: Cell<usize>,
    nan_at: Option<usize>,
}

impl Sentinel {
    fn new(nan_at: Option<usize>) -> Self {
        Sentinel {
            inner: build_model(&ModelSpec::fcn(16)).unwrap(),
            calls: Cell::new(0),
            nan_at,
        }
    }
}

impl Learner for Sentinel {
    fn params(&self) -> &[Param<f32>] {
        self.inner.params()
    }

    fn params_mut(&mut self) -> &mut [Param<f32>] {
        self.inner.params_mut()
    }

    fn loss_and_grads(
        &self,
        batch: &Batch,
        mode: Mode,
    ) -> thama_core::Result<(f32, GradientMap<f32>)> {
        let call = self.calls.get();
        self.calls.set(call + 1);
        let (loss, grads) = Learner::loss_and_grads(&self.inner, batch, mode)?;
        Ok((
            if Some(call) == self.nan_at {
                f32::NAN
            } else {
                loss
            },
            grads,
        ))
    }

    fn predict(&self, pair: &ViewPair) -> thama_core::Result<Vec<f32>> {
        Ok(vec![0.5; pair.len()])
    }
}

#[test]
fn frozen_dev_loss_stops_at_patience() {
    let pair = random_pair(3, 8, 1);
    let mut s = Sentinel::new(None);
    let cfg = TrainConfig::default();
    let h = train(&mut s, &pair, &pair, &cfg).unwrap().history;
    assert!(h.stopped_early);
    assert_eq!(h.best_epoch, 1);
    assert_eq!(h.epochs.len(), 1 + cfg.early_stop_patience);
    let lrs: Vec<f64> = h.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs[..6], [1e-3; 6]);
    assert!(lrs[6..].iter().all(|&lr| lr == 5e-4), "{lrs:?}");
}

#[test]
fn nan_loss_names_epoch_and_batch() {
    let pair = random_pair(3, 8, 1);
    let mut s = Sentinel::new(Some(4));
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let err = train(&mut s, &pair, &pair, &cfg).unwrap_err();
    assert!(
        matches!(err, Error::NanLoss { epoch: 3, batch: 0 }),
        "{err}"
    );
    assert_eq!(err.category(), ErrorCategory::Numerical);
}

fn small_synth() -> Vec<thama_core::data::DomainSplits> {
    generate_synthetic(&SynthConfig {
        d1: 16,
        d2: 16,
        train: 200,
        dev: 60,
        test: 100,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn same_seed_same_history_and_report() {
    let data = small_synth();
    let spec = ModelSpec::thama(16, 16).with_d_f(4).with_seed(7);
    let cfg = TrainConfig {
        epochs: 12,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_model::<f32>(&spec).unwrap();
        let h = train(&mut m, &data[0].train, &data[0].dev, &cfg)
            .unwrap()
            .history;
        let r = evaluate(&m, &data[0].test, "E", "E").unwrap();
        (h.without_timing(), r)
    };
    let (h1, r1) = run();
    let (h2, r2) = run();
    assert_eq!(
        serde_json::to_string(&h1).unwrap(),
        serde_json::to_string(&h2).unwrap()
    );
    assert_eq!(r1, r2);
    assert!(h1
        .epochs
        .windows(2)
        .all(|w| w[1].lr <= w[0].lr && w[1].epoch == w[0].epoch + 1));
    assert_eq!(r1.n_bonafide + r1.n_fake, r1.n_total);
}

#[test]
fn best_epoch_parameters_are_restored() {
    let data = small_synth();
    let mut m = build_model::<f32>(&ModelSpec::concat(16, 16).with_seed(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let h = train(&mut m, &data[0].train, &data[0].dev, &cfg)
        .unwrap()
        .history;
    let probs: Vec<f64> = m
        .predict(&data[0].dev)
        .unwrap()
        .into_iter()
        .map(f64::from)
        .collect();
    let loss = thama_core::train::mean_bce(&probs, &data[0].dev.labels()).unwrap();
    assert!(
        (loss - h.best_dev_loss).abs() < 1e-12,
        "{loss} vs {}",
        h.best_dev_loss
    );
}

#[test]
fn checkpoint_round_trip_and_faults() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth();
    for spec in every_kind() {
        let m = build_model::<f32>(&spec.clone().with_seed(9)).unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = CheckpointMeta {
            best_epoch: Some(3),
            best_dev_loss: Some(0.25),
            train_domain: Some("E".into()),
        };
        save_checkpoint(&m, &meta, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        let test = &data[0].test;
        let pair = if spec.kind.views() == 2 {
            test.clone()
        } else {
            ViewPair::new(test.view1.clone(), None).unwrap()
        };
        let a: Vec<u32> = m
            .predict(&pair)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u32> = back
            .model
            .predict(&pair)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b, "{:?}", spec.kind);

        let mut again = Vec::new();
        thama_core::checkpoint::encode_checkpoint(&back.model, &back.meta, &mut again).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    let fcn = build_model::<f32>(&ModelSpec::fcn(16)).unwrap();
    let path = dir.path().join("fcn.ckpt");
    save_checkpoint(&fcn, &CheckpointMeta::default(), &path).unwrap();
    let err = load_checkpoint_as(&path, &ModelSpec::thama(16, 16)).unwrap_err();
    assert!(matches!(err, Error::SpecMismatch(_)), "{err}");

    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(err, Error::CorruptCheckpoint(_)),
            "cut {cut}: {err}"
        );
        assert_eq!(err.category(), ErrorCategory::Data);
    }
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::CorruptCheckpoint(_))
    ));
}

#[test]
fn unlabeled_records_are_refused() {
    let pair = random_pair(4, 8, 1);
    let mut records = pair.view1.clone().into_records();
    records[5].label = thama_core::data::LABEL_UNLABELED;
    let tainted = ViewPair::new(EmbeddingSet::from_records(16, records).unwrap(), None).unwrap();
    let mut m = build_model::<f32>(&ModelSpec::fcn(16)).unwrap();
    let err = train(&mut m, &tainted, &pair, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Unlabeled { id: 5, .. }), "{err}");
    assert_eq!(err.category(), ErrorCategory::Data);
    assert!(matches!(
        evaluate(&m, &tainted, "E", "E"),
        Err(Error::Unlabeled { .. })
    ));
}
