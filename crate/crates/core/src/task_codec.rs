//! Conversion between each task's native annotation and a 3-channel map in
//! `[-1, 1]` that the image codec can ingest, and back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Annotation, LabelMap, Raster};
use crate::task::TaskId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub name: String,
    pub index: i32,
    pub rgb: [f64; 3],
}

/// Class index to RGB vector, plus the label reserved for "ignore".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticPalette {
    pub entries: Vec<PaletteEntry>,
    pub ignore_index: i32,
}

/// RGB used for ignore pixels; they are excluded through the validity mask.
pub const IGNORE_RGB: [f64; 3] = [0.0, 0.0, 0.0];

pub const CLASS_NAMES: [&str; 8] = ["road", "building", "pole", "light", "sign", "vegetation", "sky", "vehicle"];

impl Default for SemanticPalette {
    fn default() -> Self {
        const RGB8: [[u8; 3]; 8] = [
            [128, 64, 128],
            [70, 70, 70],
            [153, 153, 153],
            [250, 170, 30],
            [220, 220, 0],
            [107, 142, 35],
            [70, 130, 180],
            [0, 0, 142],
        ];
        let entries = CLASS_NAMES
            .iter()
            .zip(RGB8)
            .enumerate()
            .map(|(i, (name, c))| PaletteEntry {
                name: name.to_string(),
                index: i as i32,
                rgb: c.map(|v| v as f64 / 127.5 - 1.0),
            })
            .collect();
        Self { entries, ignore_index: 255 }
    }
}

impl SemanticPalette {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("palette has no entries".into()));
        }
        for (i, a) in self.entries.iter().enumerate() {
            if a.index == self.ignore_index {
                return Err(Error::Config(format!("class {} collides with ignore_index", a.name)));
            }
            if a.rgb.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("class {} rgb outside [-1, 1]", a.name)));
            }
            for b in &self.entries[i + 1..] {
                if a.index == b.index {
                    return Err(Error::Config(format!("duplicate class index {}", a.index)));
                }
                if l2(&a.rgb, &b.rgb) <= 0.0 {
                    return Err(Error::Config(format!("classes {} and {} share a color", a.name, b.name)));
                }
            }
        }
        Ok(())
    }

    pub fn rgb_of(&self, label: i32) -> Option<[f64; 3]> {
        self.entries.iter().find(|e| e.index == label).map(|e| e.rgb)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                best = best.min(l2(&a.rgb, &b.rgb));
            }
        }
        best
    }

    /// Nearest entry in RGB space; ties go to the lowest class index.
    pub fn nearest(&self, rgb: &[f64]) -> i32 {
        let mut best = (f64::INFINITY, i32::MAX);
        for e in &self.entries {
            let d = l2(&e.rgb, rgb);
            if d < best.0 || (d == best.0 && e.index < best.1) {
                best = (d, e.index);
            }
        }
        best.1
    }

    pub fn n_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: SemanticPalette = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Lower/upper anchors of the linear map `[a, b] -> [-1, 1]` for one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRecord {
    pub a: f64,
    pub b: f64,
}

impl AffineRecord {
    pub fn forward(&self, v: f64) -> f64 {
        if self.b <= self.a {
            return 0.0;
        }
        2.0 * (v.clamp(self.a, self.b) - self.a) / (self.b - self.a) - 1.0
    }

    pub fn inverse(&self, s: f64) -> f64 {
        if self.b <= self.a {
            return self.a;
        }
        self.a + (s + 1.0) * 0.5 * (self.b - self.a)
    }
}

/// Maps scaled values back to the original range, channel by channel.
pub fn invert_affine(map: &Raster, records: &[AffineRecord]) -> Result<Raster> {
    if records.len() != map.channels {
        return Err(Error::Shape(format!("{} records for {} channels", records.len(), map.channels)));
    }
    let mut out = map.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = records[i % map.channels].inverse(*v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTask {
    pub map: Raster,
    /// One record per native channel for depth and both flows.
    pub affine: Option<Vec<AffineRecord>>,
    /// False on semantic ignore pixels.
    pub valid: Vec<bool>,
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of the values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn select<'a>(values: &'a [f64], valid: Option<&'a [bool]>) -> Vec<f64> {
    match valid {
        Some(m) => values.iter().zip(m).filter(|(_, &ok)| ok).map(|(&v, _)| v).collect(),
        None => values.to_vec(),
    }
}

fn expect_map(task: TaskId, ann: &Annotation) -> Result<&Raster> {
    let r = ann.as_map().ok_or_else(|| Error::Shape(format!("{task} expects a real-valued map")))?;
    if r.channels != task.native_channels() {
        return Err(Error::Shape(format!("{task} expects {} channels, got {}", task.native_channels(), r.channels)));
    }
    Ok(r)
}

fn luminance(rgb: &[f64]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Per-image tone-map scale: inverse of the 90th-percentile luminance.
fn tonemap_scale(lum: &[f64]) -> f64 {
    if lum.is_empty() {
        return 1.0;
    }
    let p90 = percentile(lum, 90.0);
    if p90 > 0.0 {
        1.0 / p90
    } else {
        1.0
    }
}

/// Encodes a native annotation into a 3-channel map in `[-1, 1]`.
///
/// `valid` restricts the pixels used for range statistics (percentiles,
/// min/max, tone-map scale); all pixels are encoded regardless.
pub fn encode_task(
    task: TaskId,
    annotation: &Annotation,
    palette: &SemanticPalette,
    valid: Option<&[bool]>,
) -> Result<EncodedTask> {
    let (h, w) = annotation.dims();
    let n = h * w;
    if let Some(m) = valid {
        if m.len() != n {
            return Err(Error::Shape(format!("validity mask has {} entries for {} pixels", m.len(), n)));
        }
    }
    let mut all_valid = vec![true; n];
    let (map, affine) = match task {
        TaskId::Semantic => {
            let labels = annotation
                .as_labels()
                .ok_or_else(|| Error::Shape("semantic expects an integer label map".into()))?;
            let mut data = Vec::with_capacity(n * 3);
            for (p, &l) in labels.data.iter().enumerate() {
                if l == palette.ignore_index {
                    all_valid[p] = false;
                    data.extend_from_slice(&IGNORE_RGB);
                } else {
                    let rgb = palette.rgb_of(l).ok_or(Error::UnknownLabel { label: l as i64, pixel: p })?;
                    data.extend_from_slice(&rgb);
                }
            }
            (Raster::new(h, w, 3, data)?, None)
        }
        TaskId::Normal => {
            let r = expect_map(task, annotation)?;
            (Raster::new(h, w, 3, r.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect())?, None)
        }
        TaskId::Depth => {
            let r = expect_map(task, annotation)?;
            let stats = select(&r.data, valid);
            let rec = if stats.is_empty() {
                AffineRecord { a: 0.0, b: 0.0 }
            } else {
                AffineRecord { a: percentile(&stats, 2.0), b: percentile(&stats, 98.0) }
            };
            let mut data = Vec::with_capacity(n * 3);
            for &v in &r.data {
                let s = rec.forward(v);
                data.extend_from_slice(&[s, s, s]);
            }
            (Raster::new(h, w, 3, data)?, Some(vec![rec]))
        }
        TaskId::OpticalFlow | TaskId::SceneFlow => {
            let r = expect_map(task, annotation)?;
            let recs: Vec<AffineRecord> = (0..r.channels)
                .map(|c| {
                    let ch = select(&r.channel(c), valid);
                    if ch.is_empty() {
                        return AffineRecord { a: 0.0, b: 0.0 };
                    }
                    let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    AffineRecord { a: lo, b: hi }
                })
                .collect();
            let mut data = Vec::with_capacity(n * 3);
            for p in 0..n {
                let px = r.px(p);
                let s: Vec<f64> = px.iter().zip(&recs).map(|(&v, rec)| rec.forward(v)).collect();
                if task == TaskId::OpticalFlow {
                    data.extend_from_slice(&[s[0], s[1], s[0]]);
                } else {
                    data.extend_from_slice(&s);
                }
            }
            (Raster::new(h, w, 3, data)?, Some(recs))
        }
        TaskId::Shading => {
            let r = expect_map(task, annotation)?;
            let scale = tonemap_scale(&select(&r.data, valid));
            let mut data = Vec::with_capacity(n * 3);
            for &v in &r.data {
                let s = 2.0 * (v * scale).clamp(0.0, 1.0) - 1.0;
                data.extend_from_slice(&[s, s, s]);
            }
            (Raster::new(h, w, 3, data)?, None)
        }
        TaskId::Albedo => {
            let r = expect_map(task, annotation)?;
            let lum: Vec<f64> = (0..n).map(|p| luminance(r.px(p))).collect();
            let scale = tonemap_scale(&select(&lum, valid));
            let data = r.data.iter().map(|&v| 2.0 * (v * scale).clamp(0.0, 1.0) - 1.0).collect();
            (Raster::new(h, w, 3, data)?, None)
        }
    };
    Ok(EncodedTask { map, affine, valid: all_valid })
}

/// Turns a decoded 3-channel map back into the task's native form.
pub fn postprocess_task(task: TaskId, decoded: &Raster, palette: &SemanticPalette) -> Result<Annotation> {
    if decoded.channels != 3 {
        return Err(Error::Shape(format!("decoded map must have 3 channels, got {}", decoded.channels)));
    }
    let (h, w, n) = (decoded.height, decoded.width, decoded.pixels());
    Ok(match task {
        TaskId::Semantic => {
            let data = (0..n).map(|p| palette.nearest(decoded.px(p))).collect();
            Annotation::Labels(LabelMap::new(h, w, data)?)
        }
        TaskId::OpticalFlow => {
            let data = (0..n).flat_map(|p| [decoded.px(p)[0], decoded.px(p)[1]]).collect();
            Annotation::Map(Raster::new(h, w, 2, data)?)
        }
        TaskId::Depth | TaskId::Shading => {
            let data = (0..n).map(|p| decoded.px(p).iter().sum::<f64>() / 3.0).collect();
            Annotation::Map(Raster::new(h, w, 1, data)?)
        }
        TaskId::Normal => {
            let mut out = decoded.clone();
            for p in 0..n {
                let v = out.px_mut(p);
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 0.0 {
                    v.iter_mut().for_each(|x| *x /= len);
                } else {
                    v.copy_from_slice(&[0.0, 0.0, -1.0]);
                }
            }
            Annotation::Map(out)
        }
        TaskId::SceneFlow | TaskId::Albedo => Annotation::Map(decoded.clone()),
    })
}
