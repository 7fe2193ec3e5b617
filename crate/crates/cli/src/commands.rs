use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;
use thama_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use thama_core::data::{
    domain_tag, generate_synthetic, read_emb1, read_frm1, read_manifest, write_emb1, EmbeddingSet,
    SynthConfig, ViewPair, SPLITS,
};
use thama_core::fusion::{CoreKind, DEFAULT_FUSED_DIM, DEFAULT_RANKS};
use thama_core::gradcheck::{model_grad_check, GradCheckReport, TOLERANCE};
use thama_core::train::{evaluate, split_domain, train as fit, EvalReport, TrainHistory};
use thama_core::{build_model, Error, ModelKind, ModelSpec, Result};

use crate::config::{CoreChoice, RunConfig, RunData};
use crate::ModelArgs;

/// Fused width used by `gradcheck` when `--d-f` is absent.
const GRADCHECK_D_F: usize = 8;
/// Input width used by `params` and `gradcheck` when dims are absent.
const DEFAULT_DIM: usize = 64;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct SynthFile {
    domain: String,
    split: &'static str,
    view: usize,
    path: String,
    records: usize,
    dim: usize,
}

#[derive(Serialize)]
struct SynthManifest {
    config: SynthConfig,
    files: Vec<SynthFile>,
}

pub fn synth(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let domains = generate_synthetic(&cfg)?;

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for d in &domains {
        let tag = domain_tag(d.domain);
        for split in SPLITS {
            let pair = d.split(split).expect("known split");
            let views = [Some(&pair.view1), pair.view2.as_ref()];
            for (i, set) in views.into_iter().flatten().enumerate() {
                let name = format!("{tag}_{split}_view{}.emb1", i + 1);
                write_emb1(set, out.join(&name))?;
                files.push(SynthFile {
                    domain: tag.clone(),
                    split,
                    view: i + 1,
                    path: name,
                    records: set.len(),
                    dim: set.dim(),
                });
            }
        }
    }
    let manifest = SynthManifest { config: cfg, files };
    write_json(&out.join("manifest.json"), &manifest)?;
    print_json(&manifest)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PoolSummary {
    records: usize,
    dim: usize,
    output: PathBuf,
}

pub fn pool(
    frames: Option<&Path>,
    manifest: Option<&Path>,
    dim: Option<usize>,
    output: &Path,
) -> Result<ExitCode> {
    let set: EmbeddingSet = match (frames, manifest, dim) {
        (Some(f), None, _) => read_frm1(f)?.pool()?,
        (None, Some(m), Some(d)) => read_manifest(m, d)?,
        _ => {
            return Err(Error::Config(
                "pool needs --frames, or --manifest with --dim".into(),
            ))
        }
    };
    write_emb1(&set, output)?;
    print_json(&PoolSummary {
        records: set.len(),
        dim: set.dim(),
        output: output.to_path_buf(),
    })?;
    Ok(ExitCode::SUCCESS)
}

/// Loads config and data and builds the model spec; nothing is written yet.
fn prepare(config: &Path, seed: Option<u64>) -> Result<(RunConfig, RunData, ModelSpec)> {
    let cfg = RunConfig::load(config, seed)?;
    let data = RunData::load(&cfg)?;
    let spec = cfg.model.spec(data.d1, data.d2);
    spec.validate()?;
    Ok((cfg, data, spec))
}

fn checkpoint_meta(history: &TrainHistory, train_tag: &str) -> CheckpointMeta {
    CheckpointMeta {
        best_epoch: Some(history.best_epoch),
        best_dev_loss: Some(history.best_dev_loss),
        train_domain: Some(train_tag.into()),
    }
}

pub fn train(config: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let (cfg, data, spec) = prepare(config, seed)?;
    let mut model = build_model::<f32>(&spec)?;
    let history = fit(&mut model, &data.train, &data.dev, &cfg.train)?.history;
    let report = data
        .test
        .as_ref()
        .map(|t| evaluate(&model, t, &data.train_tag, &split_domain(t)))
        .transpose()?;

    fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("config.json"), &cfg)?;
    save_checkpoint(
        &model,
        &checkpoint_meta(&history, &data.train_tag),
        cfg.output.join("model.ckpt"),
    )?;
    write_json(&cfg.output.join("history.json"), &history)?;
    if let Some(r) = &report {
        write_json(&cfg.output.join("report.json"), r)?;
        print_json(r)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CrossDomainSummary<'a> {
    in_domain: &'a EvalReport,
    out_domain: &'a EvalReport,
}

pub fn xdomain(config: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let (cfg, data, spec) = prepare(config, seed)?;
    let (Some(test), Some(out_test)) = (&data.test, &data.out_test) else {
        return Err(Error::Config(
            "xdomain needs `test` and `out_test` splits".into(),
        ));
    };
    let out_tag = data
        .out_tag
        .clone()
        .unwrap_or_else(|| split_domain(out_test));
    let mut model = build_model::<f32>(&spec)?;
    let history = fit(&mut model, &data.train, &data.dev, &cfg.train)?.history;
    let in_domain = evaluate(&model, test, &data.train_tag, &split_domain(test))?;
    let out_domain = evaluate(&model, out_test, &data.train_tag, &out_tag)?;

    fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("config.json"), &cfg)?;
    save_checkpoint(
        &model,
        &checkpoint_meta(&history, &data.train_tag),
        cfg.output.join("model.ckpt"),
    )?;
    write_json(&cfg.output.join("history.json"), &history)?;
    write_json(&cfg.output.join("report_in.json"), &in_domain)?;
    write_json(&cfg.output.join("report_out.json"), &out_domain)?;
    print_json(&CrossDomainSummary {
        in_domain: &in_domain,
        out_domain: &out_domain,
    })?;
    Ok(ExitCode::SUCCESS)
}

pub fn eval(
    checkpoint: &Path,
    view1: &Path,
    view2: Option<&Path>,
    output: Option<&Path>,
    train_domain: Option<String>,
) -> Result<ExitCode> {
    let ckpt = load_checkpoint(checkpoint)?;
    let kind = ckpt.model.spec().kind;
    let v2 = match (kind.is_fusion(), view2) {
        (true, Some(p)) => Some(read_emb1(p)?),
        (true, None) => return Err(Error::Config(format!("{kind:?} checkpoint needs --view2"))),
        (false, _) => None,
    };
    let pair = ViewPair::new(read_emb1(view1)?, v2)?;
    let train_tag = train_domain
        .or(ckpt.meta.train_domain.clone())
        .unwrap_or_else(|| "unknown".into());
    let report = evaluate(&ckpt.model, &pair, &train_tag, &split_domain(&pair))?;
    if let Some(p) = output {
        write_json(p, &report)?;
    }
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn spec_from_args(args: &ModelArgs, default_d_f: usize) -> Result<ModelSpec> {
    let kind = args.kind.unwrap_or(ModelKind::Thama);
    let d1 = args.d1.unwrap_or(DEFAULT_DIM);
    let d2 = kind.is_fusion().then(|| args.d2.unwrap_or(DEFAULT_DIM));
    let ranks = match args.ranks.as_deref() {
        None => DEFAULT_RANKS,
        Some(&[a, b, c]) => [a, b, c],
        Some(r) => {
            return Err(Error::Config(format!(
                "--ranks takes three values, got {}",
                r.len()
            )))
        }
    };
    let core = match args.core.unwrap_or_default() {
        CoreChoice::Full => CoreKind::Full,
        CoreChoice::Factored => CoreKind::Factored { ranks },
    };
    let spec = ModelSpec::new(kind, d1, d2)
        .with_d_f(args.d_f.unwrap_or(default_d_f))
        .with_core(core)
        .with_seed(args.seed.unwrap_or(0));
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
struct ParamSummary<'a> {
    spec: &'a ModelSpec,
    params: usize,
}

pub fn params(config: Option<&Path>, args: &ModelArgs) -> Result<ExitCode> {
    let spec = match config {
        Some(c) => prepare(c, args.seed)?.2,
        None => spec_from_args(args, DEFAULT_FUSED_DIM)?,
    };
    let model = build_model::<f32>(&spec)?;
    print_json(&ParamSummary {
        spec: &spec,
        params: model.param_count(),
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradCheckSummary<'a> {
    spec: &'a ModelSpec,
    epsilon: f64,
    tolerance: f64,
    passed: bool,
    #[serde(flatten)]
    report: &'a GradCheckReport,
}

pub fn gradcheck(args: &ModelArgs, epsilon: f64) -> Result<ExitCode> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let spec = spec_from_args(args, GRADCHECK_D_F)?;
    let report = model_grad_check(&spec, epsilon)?;
    let passed = report.max_rel_error < TOLERANCE;
    print_json(&GradCheckSummary {
        spec: &spec,
        epsilon,
        tolerance: TOLERANCE,
        passed,
        report: &report,
    })?;
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    })
}
