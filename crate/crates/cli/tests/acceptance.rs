//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thama_core::checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use thama_core::data::{
    decode_emb1, decode_frm1, encode_emb1, encode_frm1, generate_synthetic, FrameMatrix,
    FrameRecord, FrameSet, SynthConfig,
};
use thama_core::fusion::{
    reconstruct_core, tucker_fuse_factored, tucker_fuse_full, TuckerCoreFactored,
};
use thama_core::train::{compute_eer, evaluate, train, TrainConfig, TrainHistory};
use thama_core::{build_model, ErrorCategory, ModelSpec, Tensor};

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn thama(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_thama"))
        .args(args)
        .output()
        .unwrap();
    let code = out.status.code().unwrap_or(-1);
    let value = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    if value.is_null() {
        eprintln!("thama {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    (code, value)
}

// ---------------------------------------------------------------------------

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in ["fcn", "cnn", "concat", "thama"] {
        let (code, r) = thama(&[
            "gradcheck",
            "--kind",
            kind,
            "--d1",
            "64",
            "--d2",
            "64",
            "--d-f",
            "8",
        ]);
        let err = r["max_rel_error"].as_f64().unwrap_or(f64::NAN);
        let ok = code == 0 && err < 1e-5;
        pass &= ok;
        parts.push(format!(
            "{kind} {err:.2e}{}",
            if ok { "" } else { " (over 1e-5)" }
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(
        pass,
        format!("{}; {secs:.1} s total (limit 60 s)", parts.join(", ")),
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `T` from the factors with a six-deep loop, then contracts it with
/// both inputs by a triple loop.
fn tucker_oracle(f1: &[f64], f2: &[f64], core: &TuckerCoreFactored<f64>) -> Vec<f64> {
    let d = core.fused_dim();
    let [r1, r2, r3] = core.ranks();
    let (g, a, b, c) = (core.g.data(), core.a.data(), core.b.data(), core.c.data());
    let t = |i: usize, j: usize, k: usize| {
        let mut s = 0.0;
        for p in 0..r1 {
            for q in 0..r2 {
                for r in 0..r3 {
                    s += g[(p * r2 + q) * r3 + r] * a[i * r1 + p] * b[j * r2 + q] * c[k * r3 + r];
                }
            }
        }
        s
    };
    (0..d)
        .map(|k| {
            let mut z = 0.0;
            for (i, x) in f1.iter().enumerate() {
                for (j, y) in f2.iter().enumerate() {
                    z += t(i, j, k) * x * y;
                }
            }
            z
        })
        .collect()
}

fn tucker_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut worst_ff, mut worst_oracle) = (0.0f64, 0.0f64);
    let trials = 150;
    for _ in 0..trials {
        let d = rng.gen_range(1..=8);
        let r = [
            rng.gen_range(1..=d),
            rng.gen_range(1..=d),
            rng.gen_range(1..=d),
        ];
        let core = TuckerCoreFactored::new(
            rand_tensor(&mut rng, &r),
            rand_tensor(&mut rng, &[d, r[0]]),
            rand_tensor(&mut rng, &[d, r[1]]),
            rand_tensor(&mut rng, &[d, r[2]]),
        )
        .unwrap();
        let f1 = rand_tensor(&mut rng, &[d]);
        let f2 = rand_tensor(&mut rng, &[d]);
        let factored = tucker_fuse_factored(&f1, &f2, &core).unwrap();
        let full = tucker_fuse_full(&f1, &f2, &reconstruct_core(&core)).unwrap();
        let expect = tucker_oracle(f1.data(), f2.data(), &core);
        for ((a, b), e) in factored.data().iter().zip(full.data()).zip(&expect) {
            worst_ff = worst_ff.max((a - b).abs());
            worst_oracle = worst_oracle.max((b - e).abs());
        }
    }
    outcome(
        worst_ff < 1e-5 && worst_oracle < 1e-5,
        format!("{trials} cores; factored vs full {worst_ff:.1e}, full vs loop oracle {worst_oracle:.1e} (limit 1e-5)"),
    )
}

/// Recounts FPR and FNR at every candidate threshold and interpolates
/// linearly across the sign change of FPR − FNR.
fn eer_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut ts = vec![f64::NEG_INFINITY];
    let mut u = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    ts.extend(u);
    ts.push(f64::INFINITY);
    let neg = labels.iter().filter(|&&l| l == 0).count() as f64;
    let pos = labels.len() as f64 - neg;
    let rates = |t: f64| {
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l == 0 && s >= t)
            .count() as f64;
        let fneg = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l == 1 && s < t)
            .count() as f64;
        (fp / neg, fneg / pos)
    };
    let k = (0..ts.len())
        .filter(|&i| rates(ts[i]).0 > rates(ts[i]).1)
        .max()
        .unwrap_or(0);
    let (p0, n0) = rates(ts[k]);
    let (p1, n1) = rates(ts[k + 1]);
    let a = (p0 - n0) / ((p0 - n0) - (p1 - n1));
    100.0 * (p0 + a * (p1 - p0))
}

fn eer_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sets = 1500;
    let mut worst = 0.0f64;
    for _ in 0..sets {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let levels = [4.0, 20.0, 1e6][rng.gen_range(0..3)];
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| ((rng.gen_range(0.0..1.0) + 0.3 * f64::from(l)) * levels).round() / levels)
            .collect();
        let got = compute_eer(&scores, &labels).unwrap().eer;
        worst = worst.max((got - eer_oracle(&scores, &labels)).abs());
    }
    let perfect = compute_eer(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])
        .unwrap()
        .eer;
    let same = compute_eer(&[0.3, 0.7, 0.5, 0.3, 0.7, 0.5], &[1, 1, 1, 0, 0, 0])
        .unwrap()
        .eer;
    let third = compute_eer(&[0.9, 0.6, 0.4, 0.5, 0.3, 0.1], &[1, 1, 1, 0, 0, 0])
        .unwrap()
        .eer;
    // 100/3 has no exact binary form; agreement to the last bits is required.
    let hand = perfect == 0.0 && same == 50.0 && (third - 100.0 / 3.0).abs() < 1e-12;
    outcome(
        worst <= 1e-9 && hand,
        format!("{sets} sets, max deviation {worst:.1e} (limit 1e-9); hand cases {perfect}, {same}, {third:.2}"),
    )
}

/// Closed-form count derived from the layer shapes: three conv layers
/// (kernel 3, channels 64/128/256, each halving the length), two d_f-wide
/// projections, a d_f³ core and a 128-64-1 head.
fn thama_param_oracle(d1: usize, d2: usize, d_f: usize) -> usize {
    let conv = (3 + 1) * 64 + (64 * 3 + 1) * 128 + (128 * 3 + 1) * 256;
    let flat = |d: usize| 256 * (d / 2 / 2 / 2);
    2 * conv
        + d_f * flat(d1)
        + d_f * flat(d2)
        + d_f.pow(3)
        + (d_f + 1) * 128
        + (128 + 1) * 64
        + 64
        + 1
}

fn parameter_budget() -> Outcome {
    let (code, r) = thama(&[
        "params", "--kind", "thama", "--d1", "1280", "--d2", "1280", "--d-f", "96",
    ]);
    let n = r["params"].as_u64().unwrap_or(0) as usize;
    let expect = thama_param_oracle(1280, 1280, 96);
    outcome(
        code == 0 && (5_500_000..=10_000_000).contains(&n) && n == expect,
        format!("{n} trainable parameters, analytic {expect}, range [5.5e6, 1e7]"),
    )
}

fn in_domain_eer(spec: &ModelSpec, sigma: f64) -> (f64, usize) {
    let data = generate_synthetic(&SynthConfig {
        sigma,
        ..SynthConfig::default()
    })
    .unwrap();
    let e = &data[0];
    let mut model = build_model::<f32>(spec).unwrap();
    let h = train(&mut model, &e.train, &e.dev, &TrainConfig::default())
        .unwrap()
        .history;
    (
        evaluate(&model, &e.test, "E", "E").unwrap().eer,
        h.epochs.len(),
    )
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let thama = ModelSpec::thama(64, 64);
    let concat = ModelSpec::concat(64, 64);
    let (t, te) = in_domain_eer(&thama, 0.5);
    let (c, ce) = in_domain_eer(&concat, 0.5);
    let (t0, _) = in_domain_eer(&thama, 0.0);
    let (c0, _) = in_domain_eer(&concat, 0.0);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        t <= 5.0 && t0 == 0.0 && c0 == 0.0 && secs < 600.0,
        format!(
            "THAMA {t:.2}% ({te} epochs, limit 5%), concat {c:.2}% ({ce} epochs); \
             sigma 0: THAMA {t0:.2}%, concat {c0:.2}%; {secs:.0} s (limit 600 s)"
        ),
    )
}

fn cross_domain(dir: &Path) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for theta in [90.0, 0.0] {
        for train_domain in ["E", "C"] {
            let name = format!("x{theta}{train_domain}");
            let cfg = json!({
                "model": {"kind": "thama"},
                "data": {"synth": {"theta_deg": theta}, "train_domain": train_domain},
                "output": name,
            });
            let path = dir.join(format!("{name}.json"));
            fs::write(&path, cfg.to_string()).unwrap();
            let (code, r) = thama(&["xdomain", "--config", path.to_str().unwrap()]);
            let eer_in = r["in_domain"]["eer"].as_f64().unwrap_or(f64::NAN);
            let eer_out = r["out_domain"]["eer"].as_f64().unwrap_or(f64::NAN);
            let ok = code == 0
                && if theta == 90.0 {
                    eer_out > eer_in
                } else {
                    (eer_out - eer_in).abs() < 2.0
                };
            pass &= ok;
            let other = if train_domain == "E" { "C" } else { "E" };
            parts.push(format!(
                "θ={theta} {train_domain}→{other}: in {eer_in:.2} out {eer_out:.2}"
            ));
        }
    }
    outcome(pass, parts.join("; "))
}

fn categorized_data_error<T>(r: thama_core::Result<T>) -> bool {
    matches!(r, Err(e) if e.category() == ErrorCategory::Data)
}

fn determinism_and_formats(dir: &Path) -> Outcome {
    let mut notes = Vec::new();
    let run = |name: &str| {
        let cfg = json!({
            "model": {"kind": "thama", "d_f": 8},
            "data": {"synth": {"d1": 16, "d2": 16, "train": 300, "dev": 100, "test": 200}},
            "train": {"epochs": 8, "early_stop_patience": 4},
            "output": name,
        });
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, cfg.to_string()).unwrap();
        let (code, _) = thama(&["train", "--config", path.to_str().unwrap(), "--seed", "3"]);
        let out = dir.join(name);
        let h: Option<TrainHistory> = fs::read(out.join("history.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let h = h.map(|h| serde_json::to_string(&h.without_timing()).unwrap());
        (
            code,
            h,
            fs::read(out.join("report.json")).ok(),
            fs::read(out.join("model.ckpt")).ok(),
        )
    };
    let (a, b) = (run("d1"), run("d2"));
    let same_run = a.0 == 0 && a.1.is_some() && a == b;
    notes.push(format!("repeat run identical: {same_run}"));

    let synth = generate_synthetic(&SynthConfig {
        d1: 8,
        d2: 8,
        train: 40,
        dev: 10,
        test: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut emb = Vec::new();
    encode_emb1(&synth[1].train.view1, &mut emb).unwrap();
    let back = decode_emb1(&mut emb.as_slice()).unwrap();
    let mut emb2 = Vec::new();
    encode_emb1(&back, &mut emb2).unwrap();
    let emb_ok = emb == emb2 && back == synth[1].train.view1;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = FrameSet {
        dim: 4,
        records: (0..5u64)
            .map(|i| FrameRecord {
                id: i,
                label: (i % 2) as u8,
                domain: 0,
                frames: FrameMatrix::new(
                    1 + i as usize,
                    4,
                    (0..4 * (1 + i)).map(|_| rng.gen()).collect(),
                )
                .unwrap(),
            })
            .collect(),
    };
    let mut frm = Vec::new();
    encode_frm1(&frames, &mut frm).unwrap();
    let fback = decode_frm1(&mut frm.as_slice()).unwrap();
    let mut frm2 = Vec::new();
    encode_frm1(&fback, &mut frm2).unwrap();
    let frm_ok = frm == frm2 && fback == frames;

    let model = build_model::<f32>(&ModelSpec::thama(8, 8).with_d_f(4)).unwrap();
    let ckpt_path = dir.join("rt.ckpt");
    save_checkpoint(&model, &CheckpointMeta::default(), &ckpt_path).unwrap();
    let ckpt_bytes = fs::read(&ckpt_path).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let mut ckpt2 = Vec::new();
    encode_checkpoint(&loaded.model, &loaded.meta, &mut ckpt2).unwrap();
    let ckpt_ok = ckpt_bytes == ckpt2;
    notes.push(format!(
        "round trips EMB1 {emb_ok}, FRM1 {frm_ok}, CKPT1 {ckpt_ok}"
    ));

    let mut bad_magic = emb.clone();
    bad_magic[0] = b'X';
    let corrupt_ok = categorized_data_error(decode_emb1(&mut &emb[..emb.len() - 1]))
        && categorized_data_error(decode_emb1(&mut bad_magic.as_slice()))
        && categorized_data_error(decode_frm1(&mut &frm[..frm.len() / 2]))
        && categorized_data_error(decode_checkpoint(&mut &ckpt_bytes[..ckpt_bytes.len() - 5]));
    notes.push(format!("corruption categorized: {corrupt_ok}"));

    outcome(
        same_run && emb_ok && frm_ok && ckpt_ok && corrupt_ok,
        notes.join("; "),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient verification", Box::new(gradient_verification)),
        ("tucker equivalence", Box::new(tucker_equivalence)),
        ("eer oracle", Box::new(eer_oracle_check)),
        ("parameter budget", Box::new(parameter_budget)),
        ("desk-scale end-to-end", Box::new(end_to_end)),
        (
            "cross-domain protocol",
            Box::new(|| cross_domain(dir.path())),
        ),
        (
            "determinism and formats",
            Box::new(|| determinism_and_formats(dir.path())),
        ),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
