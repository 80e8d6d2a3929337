//! Raw little-endian array files with JSON sidecars.
//!
//! Each array `<name>` is stored as `<name>.bin` (packed f32 or i32, row-major)
//! next to `<name>.json` holding its shape, dtype and optional task tag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::raster::{LabelMap, Raster};
use crate::task::TaskId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Int32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::Float32,
            ArrayData::I32(_) => Dtype::Int32,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

pub fn write_array(dir: &Path, name: &str, shape: &[usize], data: &ArrayData, task: Option<TaskId>) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Shape(format!("array `{name}`: shape {shape:?} vs {} values", data.len())));
    }
    let (bin, json) = paths(dir, name);
    fs::write(&bin, data.to_bytes()).at(&bin)?;
    let side = Sidecar { shape: shape.to_vec(), dtype: data.dtype(), task };
    fs::write(&json, serde_json::to_string_pretty(&side)?).at(&json)?;
    Ok(())
}

pub fn read_array(dir: &Path, name: &str) -> Result<(Sidecar, ArrayData)> {
    let (bin, json) = paths(dir, name);
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(&json).at(&json)?)?;
    let bytes = fs::read(&bin).at(&bin)?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Shape(format!("{}: {} bytes for shape {:?}", bin.display(), bytes.len(), side.shape)));
    }
    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match side.dtype {
        Dtype::Float32 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
        Dtype::Int32 => ArrayData::I32(words.map(i32::from_le_bytes).collect()),
    };
    Ok((side, data))
}

pub fn write_raster(dir: &Path, name: &str, r: &Raster, task: Option<TaskId>) -> Result<()> {
    let data = ArrayData::F32(r.data.iter().map(|&v| v as f32).collect());
    write_array(dir, name, &[r.height, r.width, r.channels], &data, task)
}

pub fn read_raster(dir: &Path, name: &str) -> Result<Raster> {
    match read_array(dir, name)? {
        (side, ArrayData::F32(v)) if side.shape.len() == 3 => {
            Raster::new(side.shape[0], side.shape[1], side.shape[2], v.into_iter().map(f64::from).collect())
        }
        (side, _) => Err(Error::Shape(format!("`{name}` is not an H×W×C float32 raster: {side:?}"))),
    }
}

pub fn write_labels(dir: &Path, name: &str, l: &LabelMap, task: Option<TaskId>) -> Result<()> {
    write_array(dir, name, &[l.height, l.width], &ArrayData::I32(l.data.clone()), task)
}

pub fn read_labels(dir: &Path, name: &str) -> Result<LabelMap> {
    match read_array(dir, name)? {
        (side, ArrayData::I32(v)) if side.shape.len() == 2 => LabelMap::new(side.shape[0], side.shape[1], v),
        (side, _) => Err(Error::Shape(format!("`{name}` is not an H×W int32 label map: {side:?}"))),
    }
}

pub fn write_mask(dir: &Path, name: &str, height: usize, width: usize, mask: &[bool], task: Option<TaskId>) -> Result<()> {
    let data = ArrayData::I32(mask.iter().map(|&m| m as i32).collect());
    write_array(dir, name, &[height, width], &data, task)
}

pub fn read_mask(dir: &Path, name: &str) -> Result<Vec<bool>> {
    match read_array(dir, name)? {
        (_, ArrayData::I32(v)) => Ok(v.into_iter().map(|x| x != 0).collect()),
        (side, _) => Err(Error::Shape(format!("`{name}` is not an int32 mask: {side:?}"))),
    }
}

/// SHA-256 over every regular file below `root`, keyed by relative path.
pub fn tree_checksum(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).at(dir)? {
            let p = entry.at(dir)?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(fs::read(&f).at(&f)?);
    }
    Ok(hex::encode(h.finalize()))
}
