//! Versioned binary containers for model checkpoints and distill bundles.
//!
//! Layout: 8-byte magic, u16 version, u8 kind, u8 precision tag, u32
//! header length, JSON header (shapes/names manifest), raw little-endian
//! payload, and a trailing SHA-256 over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SampleKey;
use crate::distill::{BundleEntry, CombineHead, DistillBundle};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;
use crate::train::adam::Adam;

const MAGIC: &[u8; 8] = b"RDPDCKPT";
const VERSION: u16 = 1;
const KIND_MODEL: u8 = 1;
const KIND_BUNDLE: u8 = 2;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    head: Option<HeadMeta>,
    params: Vec<ParamEntry>,
    /// Optimizer step count; moments follow the parameters in the payload.
    adam_t: Option<u64>,
    run_config_hash: String,
    rng_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    scalar_bias: bool,
    n_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    temperature: f64,
    n_classes: usize,
    n_segments: usize,
    keys: Vec<SampleKey>,
}

/// A model checkpoint deserialized at its stored precision.
#[derive(Debug)]
pub struct ModelCheckpoint<F: Real> {
    pub model: Model<F>,
    pub head: Option<CombineHead<F>>,
    pub adam: Option<Adam<F>>,
    pub lr_for_adam: f64,
    pub run_config_hash: String,
    pub rng_seed: u64,
}

/// Checkpoints declare their own precision; loading dispatches on it.
#[derive(Debug)]
pub enum LoadedModel {
    F32(Box<ModelCheckpoint<f32>>),
    F64(Box<ModelCheckpoint<f64>>),
}

impl LoadedModel {
    pub fn precision(&self) -> Precision {
        match self {
            LoadedModel::F32(_) => Precision::F32,
            LoadedModel::F64(_) => Precision::F64,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            LoadedModel::F32(c) => &c.model.spec,
            LoadedModel::F64(c) => &c.model.spec,
        }
    }

    pub fn run_config_hash(&self) -> &str {
        match self {
            LoadedModel::F32(c) => &c.run_config_hash,
            LoadedModel::F64(c) => &c.run_config_hash,
        }
    }
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

fn write_container(path: &Path, kind: u8, precision: u8, header: &[u8], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(kind);
    bytes.push(precision);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

struct Container {
    kind: u8,
    precision: u8,
    header: Vec<u8>,
    payload: Vec<u8>,
}

fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt(format!(
            "{} is not a checkpoint container",
            path.display()
        )));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Corrupt(format!(
            "{} failed its checksum",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version > VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let kind = bytes[10];
    let precision = bytes[11];
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::Corrupt(format!(
            "{} header length overruns the file",
            path.display()
        )));
    }
    Ok(Container {
        kind,
        precision,
        header: bytes[16..16 + header_len].to_vec(),
        payload: bytes[16 + header_len..bytes.len() - 32].to_vec(),
    })
}

fn push_values<F: Real>(out: &mut Vec<u8>, values: &[F]) {
    for &v in values {
        v.write_le(out);
    }
}

fn read_values<F: Real>(payload: &[u8], offset_elems: usize, len: usize) -> Result<Vec<F>> {
    let width = F::PRECISION.bytes();
    let start = offset_elems * width;
    let end = start + len * width;
    if end > payload.len() {
        return Err(Error::Corrupt("parameter payload truncated".into()));
    }
    Ok(payload[start..end]
        .chunks_exact(width)
        .map(F::read_le)
        .collect())
}

/// Writes a model (optionally with combine head and optimizer state) to
/// a versioned container at the model's native precision.
pub fn save_model<F: Real>(
    path: &Path,
    model: &Model<F>,
    head: Option<&CombineHead<F>>,
    adam: Option<&Adam<F>>,
    run_config_hash: &str,
    rng_seed: u64,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0usize;

    let mut push_param = |entries: &mut Vec<ParamEntry>, payload: &mut Vec<u8>, name: &str, t: &Tensor<F>| {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
            len: t.len(),
        });
        push_values(payload, &t.data);
        offset += t.len();
    };

    for (name, tensor) in model.param_names().iter().zip(model.params()) {
        push_param(&mut entries, &mut payload, name, tensor);
    }
    if let Some(head) = head {
        for (name, tensor) in head.param_names().iter().zip(head.params()) {
            push_param(&mut entries, &mut payload, name, tensor);
        }
    }
    let adam_t = adam.map(|a| {
        let (m, v) = a.state_flat();
        push_values(&mut payload, &m);
        push_values(&mut payload, &v);
        a.t
    });

    let header = ModelHeader {
        spec: model.spec.clone(),
        head: head.map(|h| HeadMeta {
            scalar_bias: h.scalar_bias,
            n_classes: h.n_classes,
        }),
        params: entries,
        adam_t,
        run_config_hash: run_config_hash.to_string(),
        rng_seed,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Corrupt(format!("header serialization failed: {e}")))?;
    write_container(path, KIND_MODEL, precision_tag(F::PRECISION), &header_bytes, &payload)
}

fn fill_tensor<F: Real>(entry: &ParamEntry, expected_name: &str, tensor: &mut Tensor<F>, payload: &[u8]) -> Result<()> {
    if entry.name != expected_name {
        return Err(Error::Corrupt(format!(
            "checkpoint tensor {:?} where {expected_name:?} expected",
            entry.name
        )));
    }
    if entry.shape != tensor.shape || entry.len != tensor.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint tensor {:?} has shape {:?}, model expects {:?}",
            entry.name, entry.shape, tensor.shape
        )));
    }
    tensor.data = read_values::<F>(payload, entry.offset, entry.len)?;
    Ok(())
}

fn load_model_at<F: Real>(header: &ModelHeader, payload: &[u8], lr_for_adam: f64) -> Result<ModelCheckpoint<F>> {
    let mut model: Model<F> = Model::init(&header.spec, 0)?;
    let mut head = header
        .head
        .as_ref()
        .map(|meta| CombineHead::<F>::init(meta.n_classes, meta.scalar_bias));

    let n_model = model.params().len();
    let n_head = head.as_ref().map_or(0, |h| h.params().len());
    if header.params.len() != n_model + n_head {
        return Err(Error::Corrupt(format!(
            "checkpoint lists {} tensors, model needs {}",
            header.params.len(),
            n_model + n_head
        )));
    }
    for ((entry, name), tensor) in header.params[..n_model]
        .iter()
        .zip(model.param_names())
        .zip(model.params_mut())
    {
        fill_tensor(entry, name, tensor, payload)?;
    }
    if let Some(head) = head.as_mut() {
        for ((entry, name), tensor) in header.params[n_model..]
            .iter()
            .zip(head.param_names())
            .zip(head.params_mut())
        {
            fill_tensor(entry, name, tensor, payload)?;
        }
    }
    let total: usize = header.params.iter().map(|p| p.len).sum();

    let adam = match header.adam_t {
        Some(t) => {
            let sizes: Vec<usize> = header.params.iter().map(|p| p.len).collect();
            let m = read_values::<F>(payload, total, total)?;
            let v = read_values::<F>(payload, 2 * total, total)?;
            Some(Adam::restore(lr_for_adam, &sizes, t, &m, &v)?)
        }
        None => None,
    };

    Ok(ModelCheckpoint {
        model,
        head,
        adam,
        lr_for_adam,
        run_config_hash: header.run_config_hash.clone(),
        rng_seed: header.rng_seed,
    })
}

/// Loads a model checkpoint at its stored precision.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    load_model_with_lr(path, 0.001)
}

/// Same as [`load_model`] but restores optimizer state with a given
/// learning rate (the container stores moments, not hyperparameters).
pub fn load_model_with_lr(path: &Path, lr: f64) -> Result<LoadedModel> {
    let container = read_container(path)?;
    if container.kind != KIND_MODEL {
        return Err(Error::Corrupt(format!(
            "{} holds a bundle, not a model checkpoint",
            path.display()
        )));
    }
    let header: ModelHeader = serde_json::from_slice(&container.header)
        .map_err(|e| Error::Corrupt(format!("bad checkpoint header: {e}")))?;
    match container.precision {
        4 => Ok(LoadedModel::F32(Box::new(load_model_at::<f32>(
            &header,
            &container.payload,
            lr,
        )?))),
        8 => Ok(LoadedModel::F64(Box::new(load_model_at::<f64>(
            &header,
            &container.payload,
            lr,
        )?))),
        other => Err(Error::Corrupt(format!("unknown precision tag {other}"))),
    }
}

/// Writes a distill bundle (teacher soft labels + attention per sample).
pub fn save_bundle(path: &Path, bundle: &DistillBundle) -> Result<()> {
    let keys: Vec<SampleKey> = bundle.keys().cloned().collect();
    let (mut n_classes, mut n_segments) = (0, 0);
    let mut payload = Vec::new();
    for key in &keys {
        let entry = bundle.get(key).expect("key listed by the bundle itself");
        n_classes = entry.soft.len();
        n_segments = entry.attention.len();
        for &v in entry.soft.iter().chain(&entry.attention) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = BundleHeader {
        temperature: bundle.temperature(),
        n_classes,
        n_segments,
        keys,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Corrupt(format!("header serialization failed: {e}")))?;
    write_container(path, KIND_BUNDLE, 8, &header_bytes, &payload)
}

pub fn load_bundle(path: &Path) -> Result<DistillBundle> {
    let container = read_container(path)?;
    if container.kind != KIND_BUNDLE {
        return Err(Error::Corrupt(format!(
            "{} holds a model checkpoint, not a bundle",
            path.display()
        )));
    }
    let header: BundleHeader = serde_json::from_slice(&container.header)
        .map_err(|e| Error::Corrupt(format!("bad bundle header: {e}")))?;
    let mut bundle = DistillBundle::new(header.temperature)?;
    let record = header.n_classes + header.n_segments;
    if container.payload.len() != header.keys.len() * record * 8 {
        return Err(Error::Corrupt("bundle payload truncated".into()));
    }
    for (i, key) in header.keys.iter().enumerate() {
        let base = i * record * 8;
        let mut values = container.payload[base..base + record * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let soft: Vec<f64> = values.by_ref().take(header.n_classes).collect();
        let attention: Vec<f64> = values.collect();
        bundle.insert(key.clone(), BundleEntry { soft, attention })?;
    }
    Ok(bundle)
}
