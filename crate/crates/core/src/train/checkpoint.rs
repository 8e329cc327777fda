//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `SLOTSWAP`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor back to back as
//! little-endian floats in the header's dtype. The header indexes tensors by
//! name and element offset.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{build_models, ModelParams, NetworkConfig};
use crate::schema::AttributeSchema;
use crate::slots::AverageVectorRegistry;

use super::adam::{Adam, Moments};
use super::config::TrainConfig;
use super::step::{TrainState, TrainStats};

pub const MAGIC: &[u8; 8] = b"SLOTSWAP";
pub const FORMAT_VERSION: u32 = 1;
pub const LATEST_FILE: &str = "latest";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal, since it does not fit in a JSON number.
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    stats: TrainStats,
    adam_eg_steps: BTreeMap<String, u64>,
    adam_d_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: AttributeSchema,
    network: NetworkConfig,
    param_count: usize,
    dtype: String,
    registry_decay: f64,
    registry_counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainMeta>,
    tensors: Vec<TensorEntry>,
}

/// A model ready for inference: weights, schema and the frozen registry.
#[derive(Debug)]
pub struct Checkpoint {
    pub schema: AttributeSchema,
    pub models: ModelParams,
    pub registry: AverageVectorRegistry,
    /// Training iteration the weights come from, if saved by the trainer.
    pub iteration: Option<u64>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

struct Writer {
    dtype: DType,
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn push(&mut self, name: String, t: &Tensor) -> Result<()> {
        let flat = t.to_dtype(self.dtype)?.flatten_all()?;
        match self.dtype {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| self.blob.extend(v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| self.blob.extend(v.to_le_bytes())),
        }
        self.entries.push(TensorEntry {
            name,
            shape: t.dims().to_vec(),
            offset: self.offset,
        });
        self.offset += t.elem_count();
        Ok(())
    }
}

fn collect_model(w: &mut Writer, models: &ModelParams) -> Result<()> {
    for (name, var) in models.named_params() {
        w.push(format!("param/{name}"), var.as_tensor())?;
    }
    for (name, t) in models.buffers() {
        w.push(format!("buffer/{name}"), &t)?;
    }
    Ok(())
}

fn collect_registry(
    w: &mut Writer,
    counts: &mut BTreeMap<String, u64>,
    prefix: &str,
    registry: &AverageVectorRegistry,
) -> Result<()> {
    for (key, mean, count) in registry.named_entries() {
        let name = format!("{prefix}{key}");
        w.push(name.clone(), &mean)?;
        counts.insert(name, count);
    }
    Ok(())
}

fn collect_adam(w: &mut Writer, prefix: &str, adam: &Adam) -> Result<BTreeMap<String, u64>> {
    let mut steps = BTreeMap::new();
    for (name, m) in &adam.state {
        w.push(format!("{prefix}/m/{name}"), &m.m)?;
        w.push(format!("{prefix}/v/{name}"), &m.v)?;
        steps.insert(name.clone(), m.t);
    }
    Ok(steps)
}

fn write_file(path: &Path, header: &Header, blob: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(blob)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

fn base_writer(dtype: DType) -> Writer {
    Writer {
        dtype,
        entries: vec![],
        blob: vec![],
        offset: 0,
    }
}

/// Saves weights and a registry without optimizer state.
pub fn save_model(
    path: &Path,
    schema: &AttributeSchema,
    models: &ModelParams,
    registry: &AverageVectorRegistry,
) -> Result<()> {
    let mut w = base_writer(models.dtype());
    collect_model(&mut w, models)?;
    let mut counts = BTreeMap::new();
    collect_registry(&mut w, &mut counts, "", registry)?;
    let header = Header {
        schema: schema.clone(),
        network: models.config().clone(),
        param_count: models.param_count(),
        dtype: dtype_name(models.dtype())?.into(),
        registry_decay: registry.decay(),
        registry_counts: counts,
        train: None,
        tensors: w.entries,
    };
    write_file(path, &header, &w.blob)
}

/// Saves the full training state.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let models = &state.models;
    let mut w = base_writer(models.dtype());
    collect_model(&mut w, models)?;
    let mut counts = BTreeMap::new();
    collect_registry(&mut w, &mut counts, "", &state.frozen_registry)?;
    collect_registry(&mut w, &mut counts, "live_", &state.live_registry)?;
    let adam_eg_steps = collect_adam(&mut w, "adam_eg", &state.generator_opt)?;
    let adam_d_steps = collect_adam(&mut w, "adam_d", &state.discriminator_opt)?;
    let rng = RngState {
        seed: hex::encode(state.rng.get_seed()),
        stream: state.rng.get_stream(),
        word_pos: state.rng.get_word_pos().to_string(),
    };
    let header = Header {
        schema: state.schema.clone(),
        network: models.config().clone(),
        param_count: models.param_count(),
        dtype: dtype_name(models.dtype())?.into(),
        registry_decay: state.frozen_registry.decay(),
        registry_counts: counts,
        train: Some(TrainMeta {
            config: state.config.clone(),
            iteration: state.iteration,
            rng,
            stats: state.stats,
            adam_eg_steps,
            adam_d_steps,
        }),
        tensors: w.entries,
    };
    write_file(path, &header, &w.blob)
}

struct Loaded {
    header: Header,
    dtype: DType,
    tensors: BTreeMap<String, Tensor>,
}

fn read_file(path: &Path, device: &Device) -> Result<Loaded> {
    let bytes = {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        buf
    };
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let dtype = parse_dtype(&header.dtype)?;
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let blob = &bytes[20 + header_len..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset * width..(e.offset + count) * width)
            .ok_or_else(|| bad(&format!("tensor `{}` runs past the end of the file", e.name)))?;
        let t = if dtype == DType::F32 {
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            Tensor::from_vec(v, e.shape.as_slice(), device)?
        } else {
            let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            Tensor::from_vec(v, e.shape.as_slice(), device)?
        };
        tensors.insert(e.name.clone(), t);
    }
    Ok(Loaded { header, dtype, tensors })
}

fn restore_models(loaded: &Loaded, device: &Device) -> Result<ModelParams> {
    let h = &loaded.header;
    // weights are overwritten below; the rng only shapes the throwaway init
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let models = build_models(&h.network, &h.schema, &mut rng, loaded.dtype, device)?;
    if models.param_count() != h.param_count {
        return Err(Error::Checkpoint(format!(
            "header says {} parameters, architecture has {}",
            h.param_count,
            models.param_count()
        )));
    }
    for (name, var) in models.named_params() {
        let t = loaded
            .tensors
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!("parameter `{name}` has shape {:?}", t.dims())));
        }
        var.set(t)?;
    }
    for (name, _) in models.buffers() {
        if let Some(norm) = name.strip_suffix(".running_mean") {
            let get = |suffix: &str| {
                loaded
                    .tensors
                    .get(&format!("buffer/{norm}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{norm}.{suffix}`")))
            };
            models.set_buffer_pair(norm, get("running_mean")?, get("running_var")?)?;
        }
    }
    Ok(models)
}

fn restore_registry(loaded: &Loaded, models: &ModelParams, prefix: &str) -> Result<AverageVectorRegistry> {
    let h = &loaded.header;
    let mut reg = AverageVectorRegistry::new(&h.schema, models.layout(), h.registry_decay)?;
    let full = format!("{prefix}avg/");
    for (name, t) in loaded.tensors.range(full.clone()..) {
        let Some(key) = name.strip_prefix(prefix) else { break };
        if !name.starts_with(&full) {
            break;
        }
        let count = h.registry_counts.get(name).copied().unwrap_or(1);
        reg.restore(key, t.clone(), count)?;
    }
    Ok(reg)
}

fn restore_adam(loaded: &Loaded, prefix: &str, config: super::config::AdamConfig, steps: &BTreeMap<String, u64>) -> Result<Adam> {
    let mut adam = Adam::new(config);
    for (name, &t) in steps {
        let get = |k: &str| {
            loaded
                .tensors
                .get(&format!("{prefix}/{k}/{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {prefix}/{k}/{name}")))
        };
        adam.state.insert(name.clone(), Moments { m: get("m")?, v: get("v")?, t });
    }
    Ok(adam)
}

/// Loads weights, schema and the frozen registry.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let loaded = read_file(path, device)?;
    let models = restore_models(&loaded, device)?;
    let registry = restore_registry(&loaded, &models, "")?;
    Ok(Checkpoint {
        schema: loaded.header.schema.clone(),
        registry,
        iteration: loaded.header.train.as_ref().map(|t| t.iteration),
        models,
    })
}

/// Loads everything needed to continue training.
pub fn load_train_state(path: &Path, device: &Device) -> Result<TrainState> {
    let loaded = read_file(path, device)?;
    let meta = loaded
        .header
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no training state", path.display())))?;
    let models = restore_models(&loaded, device)?;
    let frozen_registry = restore_registry(&loaded, &models, "")?;
    let live_registry = restore_registry(&loaded, &models, "live_")?;
    let seed: [u8; 32] = hex::decode(&meta.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("bad rng seed".into()))?;
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        generator_opt: restore_adam(&loaded, "adam_eg", meta.config.generator_optimizer, &meta.adam_eg_steps)?,
        discriminator_opt: restore_adam(&loaded, "adam_d", meta.config.discriminator_optimizer, &meta.adam_d_steps)?,
        config: meta.config,
        schema: loaded.header.schema.clone(),
        models,
        live_registry,
        frozen_registry,
        iteration: meta.iteration,
        rng,
        stats: meta.stats,
    })
}

/// `ckpt_<iter>.bin` inside `dir`.
pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.bin"))
}

/// Points the `latest` marker at `ckpt` (atomically).
pub fn mark_latest(dir: &Path, ckpt: &Path) -> Result<()> {
    let name = ckpt
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", ckpt.display())))?;
    let marker = dir.join(LATEST_FILE);
    let tmp = dir.join(format!("{LATEST_FILE}.tmp"));
    std::fs::write(&tmp, name).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &marker).map_err(|e| Error::io(&marker, e))
}

/// Checkpoint named by the `latest` marker, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let marker = dir.join(LATEST_FILE);
    match std::fs::read_to_string(&marker) {
        Ok(name) => Ok(Some(dir.join(name.trim()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(marker, e)),
    }
}

/// Accepts a checkpoint file or a run directory with a `latest` marker.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest_checkpoint(path)?
            .ok_or_else(|| Error::Checkpoint(format!("{} has no `{LATEST_FILE}` marker", path.display())))
    } else {
        Ok(path.to_path_buf())
    }
}
