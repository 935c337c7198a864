//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "CHPRUNE\0"
//! manifest   u32 length + UTF-8 text, one `key=value` per line
//! tensors    u32 count, then per tensor:
//!              u16 name length + UTF-8 name
//!              u8 rank + rank × u32 dims
//!              product(dims) × f32, row-major
//! digest     32 bytes  SHA-256 of everything above
//! ```
//!
//! Conv tensors are stored as `<layer>.weight` `[n_out, n_in, kh, kw]` and
//! `<layer>.bias`; dense tensors as `<layer>.weight` `[out, in]` and
//! `<layer>.bias`. Extra named tensors (e.g. ADMM auxiliaries) may follow.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ConvLayer, DenseLayer, Model, Pool};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CHPRUNE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMetadata {
    pub architecture: String,
    pub stage: String,
    pub seed: u64,
    pub epoch: u64,
    /// Additional manifest entries; keys must not contain `=` or newlines.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMetadata {
    pub fn new(architecture: impl Into<String>, stage: impl Into<String>, seed: u64, epoch: u64) -> Self {
        Self { architecture: architecture.into(), stage: stage.into(), seed, epoch, extra: BTreeMap::new() }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub metadata: CheckpointMetadata,
    /// Named tensors that are not model parameters: name → (shape, data).
    pub extra_tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn save_checkpoint(model: &Model, path: &Path, metadata: &CheckpointMetadata) -> Result<()> {
    save_checkpoint_with(model, path, metadata, &BTreeMap::new())
}

pub fn save_checkpoint_with(
    model: &Model,
    path: &Path,
    metadata: &CheckpointMetadata,
    extra_tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    let mut manifest = BTreeMap::new();
    for (k, v) in &metadata.extra {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Usage(format!("invalid manifest entry `{k}`")));
        }
        manifest.insert(k.clone(), v.clone());
    }
    manifest.insert("format-version".into(), FORMAT_VERSION.to_string());
    manifest.insert("architecture".into(), metadata.architecture.clone());
    manifest.insert("stage".into(), metadata.stage.clone());
    manifest.insert("seed".into(), metadata.seed.to_string());
    manifest.insert("epoch".into(), metadata.epoch.to_string());
    manifest.insert("model.name".into(), model.arch.clone());
    manifest.insert("model.input".into(), model.input.map(|d| d.to_string()).join("x"));
    manifest.insert("model.classes".into(), model.classes.to_string());
    manifest.insert("model.conv".into(), model.convs.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join(","));
    manifest.insert("model.dense".into(), model.dense.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join(","));
    for c in &model.convs {
        let pool = match c.pool {
            None => "none".to_string(),
            Some(Pool::Max(s)) => format!("max{s}"),
            Some(Pool::Avg(s)) => format!("avg{s}"),
        };
        manifest.insert(format!("layer.{}", c.id), format!("padding={};pool={pool}", c.padding));
    }
    let manifest_text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    for c in &model.convs {
        tensors.push((format!("{}.weight", c.id), c.weight.shape().to_vec(), c.weight.as_slice()));
        tensors.push((format!("{}.bias", c.id), vec![c.bias.len()], &c.bias));
    }
    for d in &model.dense {
        tensors.push((format!("{}.weight", d.id), vec![d.out_features, d.in_features], &d.weight));
        tensors.push((format!("{}.bias", d.id), vec![d.out_features], &d.bias));
    }
    for (name, (shape, data)) in extra_tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension { expected: shape.clone(), actual: vec![data.len()] });
        }
        tensors.push((name.clone(), shape.clone(), data));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest_text.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("truncated archive".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity(format!("{} is not a checkpoint archive", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity(format!("{}: digest mismatch", path.display())));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let manifest_len = r.u32()? as usize;
    let manifest_text = r.string(manifest_len)?;
    let manifest: BTreeMap<String, String> = manifest_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Integrity(format!("bad manifest line `{l}`")))
        })
        .collect::<Result<_>>()?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.insert(name, (shape, data));
    }
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after tensors".into()));
    }
    let get = |k: &str| manifest.get(k).ok_or_else(|| Error::Integrity(format!("manifest lacks `{k}`")));
    let version: u32 = get("format-version")?.parse().map_err(|_| Error::Integrity("bad format-version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!("unsupported format-version {version}")));
    }
    let parse_u64 = |k: &str| -> Result<u64> {
        get(k)?.parse().map_err(|_| Error::Integrity(format!("manifest `{k}` is not an integer")))
    };
    let mut extra = BTreeMap::new();
    for (k, v) in &manifest {
        let reserved = matches!(k.as_str(), "format-version" | "architecture" | "stage" | "seed" | "epoch")
            || k.starts_with("model.")
            || k.starts_with("layer.");
        if !reserved {
            extra.insert(k.clone(), v.clone());
        }
    }
    let metadata = CheckpointMetadata {
        architecture: get("architecture")?.clone(),
        stage: get("stage")?.clone(),
        seed: parse_u64("seed")?,
        epoch: parse_u64("epoch")?,
        extra,
    };

    let dims: Vec<usize> = get("model.input")?
        .split('x')
        .map(|d| d.parse().map_err(|_| Error::Integrity("bad model.input".into())))
        .collect::<Result<_>>()?;
    let input: [usize; 3] = dims.try_into().map_err(|_| Error::Integrity("model.input must have 3 dims".into()))?;
    let classes = parse_u64("model.classes")? as usize;
    let ids = |k: &str| -> Result<Vec<String>> {
        Ok(get(k)?.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
    };
    let mut take_tensor = |name: String| {
        tensors.remove(&name).ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")))
    };
    let mut convs = Vec::new();
    for id in ids("model.conv")? {
        let spec = get(&format!("layer.{id}"))?;
        let mut padding = 0;
        let mut pool = None;
        for part in spec.split(';') {
            match part.split_once('=') {
                Some(("padding", v)) => {
                    padding = v.parse().map_err(|_| Error::Integrity(format!("bad padding for `{id}`")))?
                }
                Some(("pool", "none")) => pool = None,
                Some(("pool", v)) => {
                    let (kind, size) = v.split_at(3);
                    let s = size.parse().map_err(|_| Error::Integrity(format!("bad pool for `{id}`")))?;
                    pool = Some(match kind {
                        "max" => Pool::Max(s),
                        "avg" => Pool::Avg(s),
                        _ => return Err(Error::Integrity(format!("bad pool for `{id}`"))),
                    });
                }
                _ => return Err(Error::Integrity(format!("bad layer spec for `{id}`"))),
            }
        }
        let (wshape, w) = take_tensor(format!("{id}.weight"))?;
        let (_, b) = take_tensor(format!("{id}.bias"))?;
        let shape: [usize; 4] =
            wshape.try_into().map_err(|_| Error::Integrity(format!("`{id}.weight` must be 4-D")))?;
        convs.push(ConvLayer::new(id, shape, w, b, padding, pool)?);
    }
    let mut dense = Vec::new();
    for id in ids("model.dense")? {
        let (wshape, w) = take_tensor(format!("{id}.weight"))?;
        let (_, b) = take_tensor(format!("{id}.bias"))?;
        if wshape.len() != 2 {
            return Err(Error::Integrity(format!("`{id}.weight` must be 2-D")));
        }
        dense.push(DenseLayer::new(id, wshape[1], wshape[0], w, b)?);
    }
    let model = Model::from_parts(get("model.name")?.clone(), input, classes, convs, dense)?;
    let report = crate::surgery::validate_structure(&model);
    if !report.is_empty() {
        return Err(Error::Structural(format!("checkpoint holds an inconsistent model: {report}")));
    }
    Ok(LoadedCheckpoint { model, metadata, extra_tensors: tensors })
}

/// Loads a checkpoint and rejects it unless its architecture name matches.
pub fn load_checkpoint_expecting(path: &Path, architecture: &str) -> Result<LoadedCheckpoint> {
    let loaded = load_checkpoint(path)?;
    if loaded.metadata.architecture != architecture {
        return Err(Error::Structural(format!(
            "checkpoint architecture `{}` does not match expected `{architecture}`",
            loaded.metadata.architecture
        )));
    }
    Ok(loaded)
}
