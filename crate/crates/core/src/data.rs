//! Embedding containers, frame pooling, the synthetic two-view task and
//! mini-batching.
//!
//! Binary layouts (little-endian throughout):
//!
//! ```text
//! EMB1: "EMB1" | version u32 = 1 | dim u32 | count u64
//!       count × ( id u64 | label u8 | domain u8 | dim × f32 )
//! FRM1: "FRM1" | version u32 = 1 | dim u32 | count u64
//!       count × ( id u64 | label u8 | domain u8 | frames u32 | frames × dim × f32 )
//! ```
//!
//! Frames are stored row-major. Trailing bytes after the last record are an error.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const FRM1_MAGIC: &[u8; 4] = b"FRM1";
pub const FORMAT_VERSION: u32 = 1;

pub const LABEL_BONAFIDE: u8 = 0;
pub const LABEL_FAKE: u8 = 1;
pub const LABEL_UNLABELED: u8 = 255;

pub const DOMAIN_E: u8 = 0;
pub const DOMAIN_C: u8 = 1;

/// Human-readable tag for a domain byte: `E`, `C`, or the number itself.
pub fn domain_tag(domain: u8) -> String {
    match domain {
        DOMAIN_E => "E".into(),
        DOMAIN_C => "C".into(),
        d => d.to_string(),
    }
}

/// Inverse of [`domain_tag`].
pub fn parse_domain(tag: &str) -> Result<u8> {
    match tag.trim() {
        "E" | "e" => Ok(DOMAIN_E),
        "C" | "c" => Ok(DOMAIN_C),
        t => t
            .parse()
            .map_err(|_| Error::Corrupt(format!("unknown domain tag `{t}`"))),
    }
}

fn check_label(label: u8, context: impl FnOnce() -> String) -> Result<()> {
    match label {
        LABEL_BONAFIDE | LABEL_FAKE | LABEL_UNLABELED => Ok(()),
        l => Err(Error::Corrupt(format!("{}: invalid label {l}", context()))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub label: u8,
    pub domain: u8,
    pub vector: Vec<f32>,
}

/// Records of one dimension with unique ids, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Corrupt(format!(
                "embedding dim must be in 1..2^32, got {dim}"
            )));
        }
        Ok(Self {
            dim,
            records: Vec::new(),
        })
    }

    pub fn from_records(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut set = Self::new(dim)?;
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            set.check(i, r)?;
            if !seen.insert(r.id) {
                return Err(Error::Corrupt(format!("record {i}: duplicate id {}", r.id)));
            }
        }
        set.records = records;
        Ok(set)
    }

    fn check(&self, index: usize, r: &EmbeddingRecord) -> Result<()> {
        if r.vector.len() != self.dim {
            return Err(Error::Corrupt(format!(
                "record {index}: vector length {} in a set of dim {}",
                r.vector.len(),
                self.dim
            )));
        }
        check_label(r.label, || format!("record {index}"))
    }

    /// Appends a record. Id uniqueness is checked by a linear scan, so prefer
    /// [`EmbeddingSet::from_records`] for bulk construction.
    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        self.check(self.records.len(), &record)?;
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(Error::Corrupt(format!("duplicate id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Per-utterance hidden states, `n × d` row-major with `n ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("frame matrix has no frames".into()));
        }
        if dim == 0 || data.len() != frames * dim {
            return Err(Error::shape(
                "frame matrix",
                format!("{} values for {frames} frames of dim {dim}", data.len()),
            ));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("frame matrix", "ragged rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean over the frame axis, accumulated in f64.
pub fn pool_frames(frames: &FrameMatrix) -> Vec<f32> {
    let mut acc = vec![0f64; frames.dim];
    for i in 0..frames.frames {
        for (a, &x) in acc.iter_mut().zip(frames.row(i)) {
            *a += f64::from(x);
        }
    }
    let n = frames.frames as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub id: u64,
    pub label: u8,
    pub domain: u8,
    pub frames: FrameMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub dim: usize,
    pub records: Vec<FrameRecord>,
}

impl FrameSet {
    /// Pools every record into an embedding set with the same ids, labels and order.
    pub fn pool(&self) -> Result<EmbeddingSet> {
        let records = self
            .records
            .iter()
            .map(|r| EmbeddingRecord {
                id: r.id,
                label: r.label,
                domain: r.domain,
                vector: pool_frames(&r.frames),
            })
            .collect();
        EmbeddingSet::from_records(self.dim, records)
    }
}

// ---------------------------------------------------------------------------
// Binary containers

fn truncated(what: impl FnOnce() -> String) -> impl FnOnce(io::Error) -> Error {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(what())
        } else {
            Error::Io(e)
        }
    }
}

struct Header {
    dim: usize,
    count: u64,
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dim: usize, count: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(count as u64)?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<Header> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)
        .map_err(truncated(|| "header".into()))?;
    if &found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(truncated(|| "header".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(truncated(|| "header".into()))? as usize;
    if dim == 0 {
        return Err(Error::Corrupt("dim 0 in header".into()));
    }
    let count = r
        .read_u64::<LittleEndian>()
        .map_err(truncated(|| "header".into()))?;
    Ok(Header { dim, count })
}

fn read_f32s(r: &mut impl Read, n: usize, index: u64) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(truncated(|| format!("record {index}")))?;
    Ok(out)
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Corrupt(
            "trailing bytes after the last record".into(),
        )),
    }
}

pub fn encode_emb1(set: &EmbeddingSet, w: &mut impl Write) -> Result<()> {
    write_header(w, EMB1_MAGIC, set.dim, set.len())?;
    for r in &set.records {
        w.write_u64::<LittleEndian>(r.id)?;
        w.write_u8(r.label)?;
        w.write_u8(r.domain)?;
        for &x in &r.vector {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn decode_emb1(r: &mut impl Read) -> Result<EmbeddingSet> {
    let h = read_header(r, EMB1_MAGIC)?;
    let mut records = Vec::with_capacity(h.count.min(1 << 16) as usize);
    for i in 0..h.count {
        let id = r
            .read_u64::<LittleEndian>()
            .map_err(truncated(|| format!("record {i}")))?;
        let label = r.read_u8().map_err(truncated(|| format!("record {i}")))?;
        let domain = r.read_u8().map_err(truncated(|| format!("record {i}")))?;
        let vector = read_f32s(r, h.dim, i)?;
        records.push(EmbeddingRecord {
            id,
            label,
            domain,
            vector,
        });
    }
    expect_eof(r)?;
    EmbeddingSet::from_records(h.dim, records)
}

pub fn write_emb1(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_emb1(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_emb1(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    decode_emb1(&mut BufReader::new(File::open(path)?))
}

pub fn encode_frm1(set: &FrameSet, w: &mut impl Write) -> Result<()> {
    if set.dim == 0 || set.dim > u32::MAX as usize {
        return Err(Error::Corrupt(format!(
            "frame dim must be in 1..2^32, got {}",
            set.dim
        )));
    }
    write_header(w, FRM1_MAGIC, set.dim, set.records.len())?;
    for (i, r) in set.records.iter().enumerate() {
        if r.frames.dim() != set.dim {
            return Err(Error::Corrupt(format!(
                "record {i}: frame dim {} in a set of dim {}",
                r.frames.dim(),
                set.dim
            )));
        }
        let frames = u32::try_from(r.frames.frames())
            .map_err(|_| Error::Corrupt(format!("record {i}: too many frames")))?;
        w.write_u64::<LittleEndian>(r.id)?;
        w.write_u8(r.label)?;
        w.write_u8(r.domain)?;
        w.write_u32::<LittleEndian>(frames)?;
        for &x in r.frames.data() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn decode_frm1(r: &mut impl Read) -> Result<FrameSet> {
    let h = read_header(r, FRM1_MAGIC)?;
    let mut records = Vec::with_capacity(h.count.min(1 << 16) as usize);
    let mut seen = HashSet::new();
    for i in 0..h.count {
        let id = r
            .read_u64::<LittleEndian>()
            .map_err(truncated(|| format!("record {i}")))?;
        let label = r.read_u8().map_err(truncated(|| format!("record {i}")))?;
        let domain = r.read_u8().map_err(truncated(|| format!("record {i}")))?;
        let n = r
            .read_u32::<LittleEndian>()
            .map_err(truncated(|| format!("record {i}")))? as usize;
        check_label(label, || format!("record {i}"))?;
        if n == 0 {
            return Err(Error::Corrupt(format!("record {i}: zero frames")));
        }
        if !seen.insert(id) {
            return Err(Error::Corrupt(format!("record {i}: duplicate id {id}")));
        }
        let data = read_f32s(r, n * h.dim, i)?;
        records.push(FrameRecord {
            id,
            label,
            domain,
            frames: FrameMatrix::new(n, h.dim, data)?,
        });
    }
    expect_eof(r)?;
    Ok(FrameSet {
        dim: h.dim,
        records,
    })
}

pub fn write_frm1(set: &FrameSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_frm1(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_frm1(path: impl AsRef<Path>) -> Result<FrameSet> {
    decode_frm1(&mut BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// CSV manifest

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: u64,
    label: u8,
    domain: String,
    path: String,
}

/// Reads a CSV manifest with header `id,label,domain,path`.
///
/// Each path names a headerless little-endian f32 file holding one or more
/// frames of `dim` values; multi-frame files are mean-pooled. Relative paths
/// resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>, dim: usize) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "label", "domain", "path"] {
        return Err(Error::Corrupt(format!(
            "manifest header must be `id,label,domain,path`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Corrupt(format!("manifest row {i}: {e}")))?;
        let file = base.join(&row.path);
        let mut bytes = Vec::new();
        File::open(&file)?.read_to_end(&mut bytes)?;
        if bytes.is_empty() || bytes.len() % (4 * dim) != 0 {
            return Err(Error::Corrupt(format!(
                "manifest row {i}: {} holds {} bytes, not a positive multiple of {dim} f32 values",
                file.display(),
                bytes.len()
            )));
        }
        let mut data = vec![0f32; bytes.len() / 4];
        bytes.as_slice().read_f32_into::<LittleEndian>(&mut data)?;
        let frames = FrameMatrix::new(data.len() / dim, dim, data)?;
        records.push(EmbeddingRecord {
            id: row.id,
            label: row.label,
            domain: parse_domain(&row.domain)?,
            vector: pool_frames(&frames),
        });
    }
    EmbeddingSet::from_records(dim, records)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Corrupt(format!("manifest: {other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Synthetic task

/// Parameters of the synthetic two-view, two-domain sign-interaction task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub d1: usize,
    pub d2: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Per-coordinate standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    /// Rotation applied to the class directions in domain C, in degrees.
    pub theta_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d1: 64,
            d2: 64,
            train: 2730,
            dev: 910,
            test: 1750,
            sigma: 0.5,
            theta_deg: 30.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d1 < 2 || self.d2 < 2 {
            return Err(Error::Config("synthetic dims must be at least 2".into()));
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::Config("split counts must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be finite and ≥ 0, got {}",
                self.sigma
            )));
        }
        if !self.theta_deg.is_finite() {
            return Err(Error::Config("theta must be finite".into()));
        }
        Ok(())
    }
}

/// Two aligned views of the same records. Single-view models ignore `view2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: EmbeddingSet,
    pub view2: Option<EmbeddingSet>,
}

impl ViewPair {
    pub fn new(view1: EmbeddingSet, view2: Option<EmbeddingSet>) -> Result<Self> {
        let pair = Self { view1, view2 };
        pair.check_aligned()?;
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.view1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view1.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.view1.labels()
    }

    /// Views must list the same ids with the same labels in the same order.
    pub fn check_aligned(&self) -> Result<()> {
        let Some(v2) = &self.view2 else {
            return Ok(());
        };
        if v2.len() != self.view1.len() {
            return Err(Error::Misaligned(format!(
                "view1 has {} records, view2 has {}",
                self.view1.len(),
                v2.len()
            )));
        }
        for (i, (a, b)) in self.view1.records().iter().zip(v2.records()).enumerate() {
            if a.id != b.id || a.label != b.label {
                return Err(Error::Misaligned(format!(
                    "record {i}: view1 (id {}, label {}) vs view2 (id {}, label {})",
                    a.id, a.label, b.id, b.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub domain: u8,
    pub train: ViewPair,
    pub dev: ViewPair,
    pub test: ViewPair,
    /// Class directions used for this domain's view1 and view2.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl DomainSplits {
    pub fn split(&self, name: &str) -> Option<&ViewPair> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= n);
    x
}

/// A random unit direction and a unit direction orthogonal to it.
fn direction_pair(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let u = unit_gaussian(rng, d);
    let mut w = unit_gaussian(rng, d);
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= n);
    (u, w)
}

fn rotate(u: &[f64], perp: &[f64], theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    u.iter().zip(perp).map(|(a, b)| c * a + s * b).collect()
}

/// Generates domains E and C, each with train/dev/test splits.
///
/// Every record draws independent signs `a, b ∈ {−1, +1}`; the label is fake
/// iff `a·b > 0`. View 1 is `a·u + σ·N(0, I)`, view 2 is `b·v + σ·N(0, I)`.
/// Domain C rotates `u` and `v` by θ towards fixed orthogonal directions.
/// Ids are unique across all six splits.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<DomainSplits>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (u, u_perp) = direction_pair(&mut rng, config.d1);
    let (v, v_perp) = direction_pair(&mut rng, config.d2);
    let theta = config.theta_deg.to_radians();
    let mut next_id = 0u64;

    let mut out = Vec::with_capacity(2);
    for domain in [DOMAIN_E, DOMAIN_C] {
        let (du, dv) = if domain == DOMAIN_E {
            (u.clone(), v.clone())
        } else {
            (rotate(&u, &u_perp, theta), rotate(&v, &v_perp, theta))
        };
        let mut make = |n: usize| -> Result<ViewPair> {
            let mut r1 = Vec::with_capacity(n);
            let mut r2 = Vec::with_capacity(n);
            for _ in 0..n {
                let a = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let b = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let label = if a * b > 0.0 {
                    LABEL_FAKE
                } else {
                    LABEL_BONAFIDE
                };
                let mut view = |dir: &[f64], sign: f64| -> Vec<f32> {
                    dir.iter()
                        .map(|&d| {
                            let noise: f64 = rng.sample(StandardNormal);
                            (sign * d + config.sigma * noise) as f32
                        })
                        .collect()
                };
                let x1 = view(&du, a);
                let x2 = view(&dv, b);
                r1.push(EmbeddingRecord {
                    id: next_id,
                    label,
                    domain,
                    vector: x1,
                });
                r2.push(EmbeddingRecord {
                    id: next_id,
                    label,
                    domain,
                    vector: x2,
                });
                next_id += 1;
            }
            ViewPair::new(
                EmbeddingSet::from_records(config.d1, r1)?,
                Some(EmbeddingSet::from_records(config.d2, r2)?),
            )
        };
        let train = make(config.train)?;
        let dev = make(config.dev)?;
        let test = make(config.test)?;
        out.push(DomainSplits {
            domain,
            train,
            dev,
            test,
            u: du,
            v: dv,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batching

/// One mini-batch: `[batch, d]` view matrices plus ids and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub labels: Vec<u8>,
    pub x1: Tensor<f32>,
    pub x2: Option<Tensor<f32>>,
}

/// Iterator over the mini-batches of one epoch.
pub struct BatchIter<'a> {
    pair: &'a ViewPair,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Splits `pair` into batches of `batch_size` (the last may be shorter).
/// With a seed the record order is a seeded permutation, otherwise file order.
pub fn batch_iter(
    pair: &ViewPair,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    pair.check_aligned()?;
    let mut order: Vec<usize> = (0..pair.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        pair,
        order,
        batch_size,
        pos: 0,
    })
}

fn gather(set: &EmbeddingSet, idx: &[usize]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(idx.len() * set.dim());
    for &i in idx {
        data.extend_from_slice(&set.records()[i].vector);
    }
    Tensor::new(&[idx.len(), set.dim()], data).expect("consistent gather")
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let recs = self.pair.view1.records();
        Some(Batch {
            ids: idx.iter().map(|&i| recs[i].id).collect(),
            labels: idx.iter().map(|&i| recs[i].label).collect(),
            x1: gather(&self.pair.view1, idx),
            x2: self.pair.view2.as_ref().map(|v| gather(v, idx)),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}
