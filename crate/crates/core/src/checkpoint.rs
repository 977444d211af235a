//! Binary training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header (configs, step, parameter table), then every parameter's values
//! followed by its two Adam moments, all little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{BackgroundMode, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{BackgroundInit, BackgroundModel, SpriteModel};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::trainer::{create_file, AdamW, Trainer};

const MAGIC: &[u8; 8] = b"SPRFCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    adam_t: u64,
    solid_color: Option<[f64; 3]>,
    params: Vec<ParamRecord>,
}

fn write_f64s(out: &mut impl Write, values: &[f64], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let model = &trainer.model;
    let header = Header {
        model: model.config.clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        adam_t: trainer.optimizer.t,
        solid_color: match &model.background {
            BackgroundModel::Solid(c) => Some(*c),
            BackgroundModel::Texture { .. } => None,
        },
        params: model
            .store
            .entries()
            .iter()
            .map(|e| ParamRecord { name: e.name.clone(), group: e.group, shape: e.value.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    // Write to a sibling file first so an interrupted save never clobbers
    // the previous checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut out = create_file(&tmp)?;
        let io = |e| Error::io(&tmp, e);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        for (i, e) in model.store.entries().iter().enumerate() {
            write_f64s(&mut out, e.value.data(), &tmp)?;
            write_f64s(&mut out, trainer.optimizer.m[i].data(), &tmp)?;
            write_f64s(&mut out, trainer.optimizer.v[i].data(), &tmp)?;
        }
        out.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Tensor::new(shape, data))
    }
}

/// Restores a trainer (model, optimizer state and step counter).
pub fn load(path: &Path) -> Result<Trainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;

    let init = match header.model.background {
        BackgroundMode::Solid => BackgroundInit::Solid(
            header.solid_color.ok_or_else(|| Error::Checkpoint("missing background colour".into()))?,
        ),
        BackgroundMode::Texture => {
            let frames = header
                .params
                .iter()
                .find(|p| p.name == "background.frame_logits")
                .map(|p| p.shape[0])
                .ok_or_else(|| Error::Checkpoint("missing background offsets".into()))?;
            BackgroundInit::Texture { frames, color: [0.5; 3] }
        }
    };
    let mut model = SpriteModel::new(header.model.clone(), init, 0)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, the model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut optimizer = AdamW::new(&model.store);
    optimizer.t = header.adam_t;
    for (i, rec) in header.params.iter().enumerate() {
        let entry = &model.store.entries()[i];
        if entry.name != rec.name || entry.value.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {i} is {} {:?} in the checkpoint but {} {:?} in the model",
                rec.name,
                rec.shape,
                entry.name,
                entry.value.shape()
            )));
        }
        let value = r.tensor(&rec.shape)?;
        optimizer.m[i] = r.tensor(&rec.shape)?;
        optimizer.v[i] = r.tensor(&rec.shape)?;
        model.store.entries_mut()[i].value = value;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the parameter data".into()));
    }
    Ok(Trainer { model, optimizer, config: header.train, step: header.step })
}

/// `(field, a value, b value)` for every field that differs between two
/// model configurations.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<(String, String, String)> {
    let (Ok(serde_json::Value::Object(va)), Ok(serde_json::Value::Object(vb))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec![("<config>".into(), "?".into(), "?".into())];
    };
    va.iter()
        .filter(|(k, v)| vb.get(*k) != Some(v))
        .map(|(k, v)| (k.clone(), v.to_string(), vb.get(k).map(|v| v.to_string()).unwrap_or_default()))
        .collect()
}

/// Loads a checkpoint to continue or use a run configured with `model`,
/// refusing if the architectures differ.
pub fn load_for_resume(path: &Path, model: &ModelConfig) -> Result<Trainer> {
    let trainer = load(path)?;
    check_compatible(&trainer.model.config, model, path)?;
    Ok(trainer)
}

/// Errors naming every field on which the checkpoint's configuration and
/// the requested one disagree, with both values.
pub fn check_compatible(checkpoint: &ModelConfig, requested: &ModelConfig, path: &Path) -> Result<()> {
    let diff = config_differences(checkpoint, requested);
    if diff.is_empty() {
        return Ok(());
    }
    let fields: Vec<String> = diff.iter().map(|(k, a, b)| format!("{k} (checkpoint {a}, requested {b})")).collect();
    Err(Error::CheckpointMismatch(format!(
        "{} was trained with a different model configuration: {}",
        path.display(),
        fields.join(", ")
    )))
}
