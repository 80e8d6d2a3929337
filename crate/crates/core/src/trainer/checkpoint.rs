//! Checkpoint directories: `manifest.json` plus one subdirectory of raw arrays
//! per component (`unet/`, `aux/`, `codec/`, `tokens/`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, Weights};
use super::{TrainConfig, Trainer};
use crate::denoiser::TaskTokenTable;
use crate::error::{Error, IoContext, Result};
use crate::latent::LatentCodec;
use crate::nn::{ParamStore, Tensor};
use crate::store::{self, ArrayData};
use crate::task::TaskId;
use crate::task_codec::SemanticPalette;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Stage1,
    Stage2,
    Single(TaskId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub tensors: usize,
    pub scalars: usize,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub components: BTreeMap<String, ComponentInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub weights: Weights,
}

fn file_name(param: &str) -> String {
    param.replace('/', "_")
}

fn save_params(dir: &Path, p: &ParamStore) -> Result<ComponentInfo> {
    fs::create_dir_all(dir).at(dir)?;
    let mut index = Vec::new();
    for (name, t) in p.iter() {
        let data = ArrayData::F32(t.data().iter().map(|&v| v as f32).collect());
        store::write_array(dir, &file_name(name), t.shape(), &data, None)?;
        index.push(name.clone());
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).at(&path)?;
    Ok(ComponentInfo { tensors: p.len(), scalars: p.num_scalars(), checksum: p.checksum() })
}

fn load_params(dir: &Path) -> Result<ParamStore> {
    let path = dir.join("index.json");
    let index: Vec<String> = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    let mut p = ParamStore::new();
    for name in index {
        let (side, data) = store::read_array(dir, &file_name(&name))?;
        let ArrayData::F32(v) = data else {
            return Err(Error::Checkpoint { path: dir.to_path_buf(), msg: format!("`{name}` is not float32") });
        };
        p.insert(name, Tensor::new(side.shape, v.into_iter().map(f64::from).collect())?);
    }
    Ok(p)
}

/// Writes the trainer's current model and weights to `dir`.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer, kind: CheckpointKind) -> Result<CheckpointManifest> {
    write_checkpoint(dir, &trainer.model, &trainer.weights, &trainer.cfg, kind, trainer.step)
}

pub fn write_checkpoint(
    dir: &Path,
    model: &Model,
    weights: &Weights,
    train: &TrainConfig,
    kind: CheckpointKind,
    step: usize,
) -> Result<CheckpointManifest> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::create_dir_all(dir).at(dir)?;
    let mut components = BTreeMap::new();
    match weights {
        Weights::Single(p) => {
            components.insert("unet".into(), save_params(&dir.join("unet"), p)?);
        }
        Weights::Multi { main, aux } => {
            components.insert("unet".into(), save_params(&dir.join("unet"), main)?);
            components.insert("aux".into(), save_params(&dir.join("aux"), aux)?);
        }
    }
    components.insert("codec".into(), save_params(&dir.join("codec"), &model.codec.params)?);
    let mut tok = ParamStore::new();
    tok.insert("table", model.tokens.to_tensor());
    components.insert("tokens".into(), save_params(&dir.join("tokens"), &tok)?);
    let pal = dir.join("palette.json");
    fs::write(&pal, model.palette.to_json()?).at(&pal)?;

    let manifest = CheckpointManifest {
        kind,
        version: crate::version().to_string(),
        model: model.cfg.clone(),
        train: train.clone(),
        seed: train.seed,
        step,
        components,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

/// Reads a checkpoint and verifies every component checksum.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint { path: dir.to_path_buf(), msg };
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(bad("no manifest.json (not a checkpoint directory)".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    let mut loaded = BTreeMap::new();
    for (name, info) in &manifest.components {
        let p = load_params(&dir.join(name))?;
        if p.checksum() != info.checksum {
            return Err(bad(format!("component `{name}` checksum mismatch")));
        }
        loaded.insert(name.clone(), p);
    }
    let mut take = |name: &str| loaded.remove(name).ok_or_else(|| bad(format!("missing component `{name}`")));
    let unet = take("unet")?;
    let weights = match manifest.kind {
        CheckpointKind::Stage2 => Weights::Multi { main: unet, aux: take("aux")? },
        _ => Weights::Single(unet),
    };
    let codec = LatentCodec::with_params(manifest.model.codec, take("codec")?)?;
    let tok = take("tokens")?;
    let table = tok.get("table").ok_or_else(|| bad("token component has no `table`".into()))?;
    let tokens = TaskTokenTable::from_tensor(table)?;
    let pal = dir.join("palette.json");
    let palette = SemanticPalette::from_json(&fs::read_to_string(&pal).at(&pal)?)?;
    manifest.model.validate()?;
    let model = Model { cfg: manifest.model.clone(), codec, tokens, palette };
    Ok(Checkpoint { manifest, model, weights })
}
