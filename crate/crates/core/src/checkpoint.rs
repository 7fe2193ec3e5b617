//! CKPT1 model checkpoints.
//!
//! ```text
//! "CKPT" | version u32 = 1 | header_len u32 | header (UTF-8 JSON: {"spec": .., "meta": ..})
//! params u32
//! params × ( name_len u32 | name | rank u32 | rank × extent u32 | Π extents × f32 )
//! ```
//!
//! All integers and floats are little-endian. Parameter records appear in
//! graph order and must match the shapes implied by the stored spec.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model, ModelInstance, ModelSpec};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

/// Training provenance stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub best_epoch: Option<usize>,
    pub best_dev_loss: Option<f64>,
    /// Domain tag of the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_domain: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelInstance<f32>,
    pub meta: CheckpointMeta,
}

fn corrupt(what: impl FnOnce() -> String) -> impl FnOnce(io::Error) -> Error {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::CorruptCheckpoint(format!("truncated in {}", what()))
        } else {
            Error::Io(e)
        }
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} does not fit in u32")))
}

pub fn encode_checkpoint(
    model: &ModelInstance<f32>,
    meta: &CheckpointMeta,
    w: &mut impl Write,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        meta: meta.clone(),
    })?;
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    w.write_u32::<LittleEndian>(len_u32(header.len(), "header length")?)?;
    w.write_all(&header)?;
    let params = model.graph().params();
    w.write_u32::<LittleEndian>(len_u32(params.len(), "parameter count")?)?;
    for p in params {
        w.write_u32::<LittleEndian>(len_u32(p.name.len(), "name length")?)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u32::<LittleEndian>(len_u32(p.value.rank(), "rank")?)?;
        for &e in p.value.shape() {
            w.write_u32::<LittleEndian>(len_u32(e, "extent")?)?;
        }
        for &x in p.value.data() {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn decode_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(corrupt(|| "magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: "CKPT".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(corrupt(|| "version".into()))?;
    if version != CKPT_VERSION {
        return Err(Error::Version {
            expected: CKPT_VERSION,
            found: version,
        });
    }
    let header_len = r
        .read_u32::<LittleEndian>()
        .map_err(corrupt(|| "header".into()))? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(corrupt(|| "header".into()))?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::CorruptCheckpoint(format!("header json: {e}")))?;

    let mut model = build_model::<f32>(&header.spec)
        .map_err(|e| Error::CorruptCheckpoint(format!("stored spec is invalid: {e}")))?;
    let expected = model.param_shapes();
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(corrupt(|| "parameter count".into()))? as usize;
    if count != expected.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameter records, spec implies {}",
            expected.len()
        )));
    }
    for (i, (name, shape)) in expected.into_iter().enumerate() {
        let at = || format!("parameter record {i}");
        let name_len = r.read_u32::<LittleEndian>().map_err(corrupt(at))? as usize;
        if name_len != name.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter record {i}: name length {name_len}, expected `{name}`"
            )));
        }
        let mut found = vec![0u8; name_len];
        r.read_exact(&mut found).map_err(corrupt(at))?;
        if found != name.as_bytes() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter record {i}: found `{}`, expected `{name}`",
                String::from_utf8_lossy(&found)
            )));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(corrupt(at))? as usize;
        if rank != shape.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "`{name}`: rank {rank}, expected {}",
                shape.len()
            )));
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.read_u32::<LittleEndian>().map_err(corrupt(at))? as usize);
        }
        if extents != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "`{name}`: shape {extents:?}, expected {shape:?}"
            )));
        }
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(corrupt(|| format!("`{name}` data")))?;
        *model
            .graph_mut()
            .param_value_mut(&name)
            .expect("name taken from the model") = Tensor::new(&shape, data)?;
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::CorruptCheckpoint(
            "trailing bytes after the last parameter".into(),
        ));
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn save_checkpoint(
    model: &ModelInstance<f32>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_checkpoint(model, meta, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Loads a checkpoint and requires its architecture to match `expected`.
/// Seed and dropout rate do not affect parameter shapes and are not compared.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelSpec) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.spec();
    let arch = |s: &ModelSpec| (s.kind, s.d1, s.d2, s.d_f, s.core.clone());
    if arch(found) != arch(expected) {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds {:?} d1={} d2={:?} d_f={} core={:?}, expected {:?} d1={} d2={:?} d_f={} core={:?}",
            found.kind,
            found.d1,
            found.d2,
            found.d_f,
            found.core,
            expected.kind,
            expected.d1,
            expected.d2,
            expected.d_f,
            expected.core
        )));
    }
    Ok(ckpt)
}
