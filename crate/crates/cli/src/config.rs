//! Run configuration and the data it points at.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thama_core::data::{
    generate_synthetic, parse_domain, read_emb1, DomainSplits, SynthConfig, ViewPair, DOMAIN_C,
    DOMAIN_E,
};
use thama_core::fusion::{CoreKind, DEFAULT_FUSED_DIM, DEFAULT_RANKS};
use thama_core::layers::DEFAULT_DROPOUT;
use thama_core::train::{split_domain, TrainConfig};
use thama_core::{Error, ModelKind, ModelSpec, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CoreChoice {
    #[default]
    Full,
    Factored,
}

fn default_d_f() -> usize {
    DEFAULT_FUSED_DIM
}

fn default_ranks() -> [usize; 3] {
    DEFAULT_RANKS
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

/// Architecture choices. Input dims come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default = "default_d_f")]
    pub d_f: usize,
    #[serde(default)]
    pub core: CoreChoice,
    /// Used only with the factored core.
    #[serde(default = "default_ranks")]
    pub ranks: [usize; 3],
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSection {
    pub fn spec(&self, d1: usize, d2: Option<usize>) -> ModelSpec {
        let d2 = if self.kind.is_fusion() { d2 } else { None };
        let core = match self.core {
            CoreChoice::Full => CoreKind::Full,
            CoreChoice::Factored => CoreKind::Factored { ranks: self.ranks },
        };
        ModelSpec::new(self.kind, d1, d2)
            .with_d_f(self.d_f)
            .with_core(core)
            .with_dropout(self.dropout)
            .with_seed(self.seed)
    }
}

/// EMB1 files holding the two views of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub view1: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view2: Option<PathBuf>,
}

fn default_train_domain() -> String {
    "E".into()
}

/// Either a synthetic block or explicit EMB1 paths. Relative paths are
/// resolved against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    /// Synthetic domain to train on; the other one is the out-domain.
    #[serde(default = "default_train_domain")]
    pub train_domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<SplitPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<SplitPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<SplitPaths>,
    /// Test split of the other domain, for `xdomain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_test: Option<SplitPaths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub output: PathBuf,
}

impl RunConfig {
    /// Parses and validates a config file; `seed` overrides the model and
    /// training seeds. Relative paths become absolute.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        let d = &mut self.data;
        for split in [&mut d.train, &mut d.dev, &mut d.test, &mut d.out_test]
            .into_iter()
            .flatten()
        {
            fix(&mut split.view1);
            if let Some(v2) = &mut split.view2 {
                fix(v2);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        let any_paths =
            d.train.is_some() || d.dev.is_some() || d.test.is_some() || d.out_test.is_some();
        match (&d.synth, any_paths) {
            (Some(s), false) => {
                s.validate()?;
                if !matches!(parse_domain(&d.train_domain), Ok(DOMAIN_E | DOMAIN_C)) {
                    return Err(Error::Config(format!(
                        "train_domain must be E or C, got `{}`",
                        d.train_domain
                    )));
                }
            }
            (None, true) => {
                if d.train.is_none() || d.dev.is_none() {
                    return Err(Error::Config(
                        "data needs both `train` and `dev` paths".into(),
                    ));
                }
            }
            (Some(_), true) => {
                return Err(Error::Config(
                    "data has both a synth block and paths".into(),
                ))
            }
            (None, false) => return Err(Error::Config("data needs a synth block or paths".into())),
        }
        if self.model.kind.is_fusion() && !self.data_has_two_views() {
            return Err(Error::Config(format!(
                "{:?} needs two views in every split",
                self.model.kind
            )));
        }
        // Dims are checked against the data once it is loaded; here only the
        // dim-independent parts of the model spec are validated.
        self.model.spec(64, Some(64)).validate()
    }

    fn data_has_two_views(&self) -> bool {
        let d = &self.data;
        d.synth.is_some()
            || [&d.train, &d.dev, &d.test, &d.out_test]
                .into_iter()
                .flatten()
                .all(|s| s.view2.is_some())
    }
}

/// Splits a run works on, plus their domain tags.
pub struct RunData {
    pub train: ViewPair,
    pub dev: ViewPair,
    pub test: Option<ViewPair>,
    pub out_test: Option<ViewPair>,
    pub train_tag: String,
    pub out_tag: Option<String>,
    pub d1: usize,
    pub d2: Option<usize>,
}

fn read_split(paths: &SplitPaths, want_view2: bool) -> Result<ViewPair> {
    let v1 = read_emb1(&paths.view1)?;
    let v2 = match (&paths.view2, want_view2) {
        (Some(p), true) => Some(read_emb1(p)?),
        _ => None,
    };
    ViewPair::new(v1, v2)
}

fn single_view(pair: &ViewPair) -> ViewPair {
    ViewPair {
        view1: pair.view1.clone(),
        view2: None,
    }
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let fusion = cfg.model.kind.is_fusion();
        let d = &cfg.data;
        let data = if let Some(synth) = &d.synth {
            let domains: Vec<DomainSplits> = generate_synthetic(synth)?;
            let a = parse_domain(&d.train_domain)?;
            let (own, other) = if a == domains[0].domain {
                (&domains[0], &domains[1])
            } else {
                (&domains[1], &domains[0])
            };
            let view = |p: &ViewPair| if fusion { p.clone() } else { single_view(p) };
            RunData {
                train: view(&own.train),
                dev: view(&own.dev),
                test: Some(view(&own.test)),
                out_test: Some(view(&other.test)),
                train_tag: split_domain(&own.train),
                out_tag: Some(split_domain(&other.test)),
                d1: synth.d1,
                d2: fusion.then_some(synth.d2),
            }
        } else {
            let need =
                |s: &Option<SplitPaths>| s.as_ref().map(|p| read_split(p, fusion)).transpose();
            let train = need(&d.train)?.expect("validated");
            let dev = need(&d.dev)?.expect("validated");
            let test = need(&d.test)?;
            let out_test = need(&d.out_test)?;
            let out_tag = out_test.as_ref().map(split_domain);
            RunData {
                d1: train.view1.dim(),
                d2: train.view2.as_ref().map(|v| v.dim()),
                train_tag: split_domain(&train),
                train,
                dev,
                test,
                out_test,
                out_tag,
            }
        };
        data.check_dims()?;
        Ok(data)
    }

    fn check_dims(&self) -> Result<()> {
        let want = (self.d1, self.d2);
        let splits = [
            Some(&self.train),
            Some(&self.dev),
            self.test.as_ref(),
            self.out_test.as_ref(),
        ];
        for (name, pair) in ["train", "dev", "test", "out_test"].iter().zip(splits) {
            let Some(pair) = pair else { continue };
            pair.check_aligned()?;
            let got = (pair.view1.dim(), pair.view2.as_ref().map(|v| v.dim()));
            if got != want {
                return Err(Error::shape(
                    *name,
                    format!("view dims {got:?}, train split has {want:?}"),
                ));
            }
        }
        Ok(())
    }
}
