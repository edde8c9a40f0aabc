//! Versioned binary container for model artifacts. One format serves
//! base weights, skill adapters, routers and fused models: a fixed
//! header, a config block, a kind-specific JSON meta block, then named
//! tensors as (name, dtype, shape, little-endian values).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adalora::SkillAdapter;
use crate::error::{Error, Result};
use crate::fusion::{FusedModel, Provenance};
use crate::model::{ModelConfig, TransformerWeights};
use crate::router::{RouterMode, RouterParams};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SAMK";
const VERSION: u32 = 1;

/// Hard cap on any length field read from disk, to fail fast on garbage.
const MAX_FIELD: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Base,
    Adapter,
    Router,
    Fused,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Base => 0,
            CheckpointKind::Adapter => 1,
            CheckpointKind::Router => 2,
            CheckpointKind::Fused => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<CheckpointKind> {
        match tag {
            0 => Some(CheckpointKind::Base),
            1 => Some(CheckpointKind::Adapter),
            2 => Some(CheckpointKind::Router),
            3 => Some(CheckpointKind::Fused),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Adapter => "adapter",
            CheckpointKind::Router => "router",
            CheckpointKind::Fused => "fused",
        }
    }
}

struct Container<T> {
    kind: CheckpointKind,
    config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<(String, Tensor<T>)>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| bad(path, format!("truncated {what}: {e}")))?;
    let v = u64::from_le_bytes(buf);
    if v > MAX_FIELD {
        return Err(bad(path, format!("{what} of {v} is implausible")));
    }
    Ok(v)
}

fn read_bytes(r: &mut impl Read, path: &Path, what: &str) -> Result<Vec<u8>> {
    let len = read_u64(r, path, what)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| bad(path, format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn write_container<T: Scalar>(path: &Path, c: &Container<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[c.kind.tag()])?;
    write_bytes(&mut w, &serde_json::to_vec(&c.config)?)?;
    write_bytes(&mut w, &serde_json::to_vec(&c.meta)?)?;
    write_u64(&mut w, c.tensors.len() as u64)?;
    for (name, t) in &c.tensors {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&[T::DTYPE.tag()])?;
        write_u64(&mut w, t.rows() as u64)?;
        write_u64(&mut w, t.cols() as u64)?;
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_container<T: Scalar>(path: &Path) -> Result<Container<T>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(path, format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(bad(path, "wrong magic bytes"));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)
        .map_err(|e| bad(path, format!("truncated version: {e}")))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)
        .map_err(|e| bad(path, format!("truncated kind: {e}")))?;
    let kind = CheckpointKind::from_tag(kind[0])
        .ok_or_else(|| bad(path, format!("unknown kind tag {}", kind[0])))?;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r, path, "config block")?)?;
    let meta: serde_json::Value = serde_json::from_slice(&read_bytes(&mut r, path, "meta block")?)?;
    let n = read_u64(&mut r, path, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(&mut r, path, "tensor name")?)
            .map_err(|_| bad(path, "tensor name is not UTF-8"))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)
            .map_err(|e| bad(path, format!("truncated dtype of `{name}`: {e}")))?;
        let dtype = Dtype::from_tag(tag[0])
            .ok_or_else(|| bad(path, format!("unknown dtype tag {} on `{name}`", tag[0])))?;
        if dtype != T::DTYPE {
            return Err(bad(
                path,
                format!(
                    "tensor `{name}` is {}, loader expects {}",
                    dtype.name(),
                    T::DTYPE.name()
                ),
            ));
        }
        let rows = read_u64(&mut r, path, "tensor rows")? as usize;
        let cols = read_u64(&mut r, path, "tensor cols")? as usize;
        let mut data = vec![0u8; rows * cols * dtype.size_bytes()];
        r.read_exact(&mut data)
            .map_err(|e| bad(path, format!("truncated data of `{name}`: {e}")))?;
        let t = Tensor::from_le_bytes(rows, cols, &data)
            .map_err(|e| bad(path, format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad(path, "trailing bytes after the last tensor"));
    }
    Ok(Container {
        kind,
        config,
        meta,
        tensors,
    })
}

fn expect_kind<T>(c: &Container<T>, path: &Path, want: CheckpointKind) -> Result<()> {
    if c.kind != want {
        return Err(bad(
            path,
            format!("holds a {} artifact, expected {}", c.kind.name(), want.name()),
        ));
    }
    Ok(())
}

fn take_tensor<T>(
    tensors: &mut Vec<(String, Tensor<T>)>,
    path: &Path,
    name: &str,
) -> Result<Tensor<T>> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| bad(path, format!("missing tensor `{name}`")))?;
    Ok(tensors.remove(pos).1)
}

/// Kind and dtype of a checkpoint without loading its tensors.
pub fn peek(path: impl AsRef<Path>) -> Result<(CheckpointKind, Dtype, ModelConfig)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(path, format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(bad(path, "wrong magic bytes"));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)
        .map_err(|e| bad(path, format!("truncated version: {e}")))?;
    if u32::from_le_bytes(version) != VERSION {
        return Err(bad(path, "unsupported format version"));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)
        .map_err(|e| bad(path, format!("truncated kind: {e}")))?;
    let kind = CheckpointKind::from_tag(kind[0])
        .ok_or_else(|| bad(path, format!("unknown kind tag {}", kind[0])))?;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r, path, "config block")?)?;
    serde_json::from_slice::<serde_json::Value>(&read_bytes(&mut r, path, "meta block")?)?;
    let n = read_u64(&mut r, path, "tensor count")?;
    let dtype = if n == 0 {
        Dtype::F64
    } else {
        read_bytes(&mut r, path, "tensor name")?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)
            .map_err(|e| bad(path, format!("truncated dtype: {e}")))?;
        Dtype::from_tag(tag[0]).ok_or_else(|| bad(path, "unknown dtype tag"))?
    };
    Ok((kind, dtype, config))
}

pub fn save_base<T: Scalar>(path: impl AsRef<Path>, w: &TransformerWeights<T>) -> Result<()> {
    let tensors = w
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    write_container(
        path.as_ref(),
        &Container {
            kind: CheckpointKind::Base,
            config: w.config,
            meta: serde_json::Value::Object(Default::default()),
            tensors,
        },
    )
}

fn into_map<T>(
    path: &Path,
    tensors: Vec<(String, Tensor<T>)>,
) -> Result<std::collections::BTreeMap<String, Tensor<T>>> {
    let mut map = std::collections::BTreeMap::new();
    for (name, t) in tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(bad(path, format!("duplicate tensor `{name}`")));
        }
    }
    Ok(map)
}

fn weights_from_tensors<T: Scalar>(
    path: &Path,
    config: ModelConfig,
    tensors: Vec<(String, Tensor<T>)>,
) -> Result<TransformerWeights<T>> {
    let mut map = into_map(path, tensors)?;
    TransformerWeights::from_named(config, &mut map).map_err(|e| bad(path, e.to_string()))
}

pub fn load_base<T: Scalar>(path: impl AsRef<Path>) -> Result<TransformerWeights<T>> {
    let path = path.as_ref();
    let c = read_container::<T>(path)?;
    expect_kind(&c, path, CheckpointKind::Base)?;
    weights_from_tensors(path, c.config, c.tensors)
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    skill_id: String,
    dropout_p: f64,
}

pub fn save_adapter<T: Scalar>(path: impl AsRef<Path>, a: &SkillAdapter<T>) -> Result<()> {
    let meta = serde_json::to_value(AdapterMeta {
        skill_id: a.skill_id.clone(),
        dropout_p: a.dropout_p,
    })?;
    write_container(
        path.as_ref(),
        &Container {
            kind: CheckpointKind::Adapter,
            config: a.config,
            meta,
            tensors: a.named_tensors(),
        },
    )
}

pub fn load_adapter<T: Scalar>(path: impl AsRef<Path>) -> Result<SkillAdapter<T>> {
    let path = path.as_ref();
    let c = read_container::<T>(path)?;
    expect_kind(&c, path, CheckpointKind::Adapter)?;
    let meta: AdapterMeta = serde_json::from_value(c.meta)?;
    let mut map = into_map(path, c.tensors)?;
    SkillAdapter::from_named(&meta.skill_id, &c.config, meta.dropout_p, &mut map)
        .map_err(|e| bad(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct RouterMeta {
    mode: RouterMode,
    tau: f64,
    skill_ids: Vec<String>,
}

/// Routers carry the ordered skill ids they were trained against, so a
/// loaded gate can be checked against the library it is applied to.
pub fn save_router<T: Scalar>(
    path: impl AsRef<Path>,
    params: &RouterParams<T>,
    config: &ModelConfig,
    skill_ids: &[String],
) -> Result<()> {
    let meta = serde_json::to_value(RouterMeta {
        mode: params.mode,
        tau: params.tau,
        skill_ids: skill_ids.to_vec(),
    })?;
    write_container(
        path.as_ref(),
        &Container {
            kind: CheckpointKind::Router,
            config: *config,
            meta,
            tensors: vec![
                ("a".to_string(), params.a.clone()),
                ("b".to_string(), params.b.clone()),
            ],
        },
    )
}

pub fn load_router<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(RouterParams<T>, ModelConfig, Vec<String>)> {
    let path = path.as_ref();
    let c = read_container::<T>(path)?;
    expect_kind(&c, path, CheckpointKind::Router)?;
    let meta: RouterMeta = serde_json::from_value(c.meta)?;
    let mut tensors = c.tensors;
    let a = take_tensor(&mut tensors, path, "a")?;
    let b = take_tensor(&mut tensors, path, "b")?;
    let params = RouterParams {
        mode: meta.mode,
        a,
        b,
        tau: meta.tau,
    };
    let k = meta.skill_ids.len();
    let f = match meta.mode {
        RouterMode::Static => 0,
        RouterMode::Feature => params.a.cols(),
    };
    params
        .validate(k, f)
        .map_err(|e| bad(path, format!("router inconsistent with its skill list: {e}")))?;
    Ok((params, c.config, meta.skill_ids))
}

pub fn save_fused<T: Scalar>(path: impl AsRef<Path>, m: &FusedModel<T>) -> Result<()> {
    let tensors = m
        .weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    write_container(
        path.as_ref(),
        &Container {
            kind: CheckpointKind::Fused,
            config: m.weights.config,
            meta: serde_json::to_value(&m.provenance)?,
            tensors,
        },
    )
}

pub fn load_fused<T: Scalar>(path: impl AsRef<Path>) -> Result<FusedModel<T>> {
    let path = path.as_ref();
    let c = read_container::<T>(path)?;
    expect_kind(&c, path, CheckpointKind::Fused)?;
    let provenance: Provenance = serde_json::from_value(c.meta)?;
    let weights = weights_from_tensors(path, c.config, c.tensors)?;
    Ok(FusedModel {
        weights,
        provenance,
    })
}
