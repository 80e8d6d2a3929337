//! Procedural two-frame scenes with ground truth for every task, and
//! partially labeled datasets built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::raster::{Annotation, LabelMap, Raster};
use crate::store;
use crate::task::TaskId;

pub const ROAD: i32 = 0;
pub const BUILDING: i32 = 1;
pub const POLE: i32 = 2;
pub const LIGHT: i32 = 3;
pub const SIGN: i32 = 4;
pub const VEGETATION: i32 = 5;
pub const SKY: i32 = 6;
pub const VEHICLE: i32 = 7;

pub const MIN_SIDE: usize = 16;
const AMBIENT: f64 = 0.2;
const CAMERA_HEIGHT: f64 = 1.5;
const MAX_GROUND_DEPTH: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStyle {
    Indoor,
    Urban,
    Objects,
}

impl SceneStyle {
    pub fn name(self) -> &'static str {
        match self {
            SceneStyle::Indoor => "indoor",
            SceneStyle::Urban => "urban",
            SceneStyle::Objects => "objects",
        }
    }
}

/// Object motion between the two frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Random,
    Static,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub frame_i: Raster,
    pub frame_j: Raster,
    pub labels: BTreeMap<TaskId, Annotation>,
    pub validity: BTreeMap<TaskId, Vec<bool>>,
    pub dataset_id: String,
    pub seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.frame_i.height
    }

    pub fn width(&self) -> usize {
        self.frame_i.width
    }

    pub fn label(&self, task: TaskId) -> Option<&Annotation> {
        self.labels.get(&task)
    }

    pub fn valid(&self, task: TaskId) -> Option<&[bool]> {
        self.validity.get(&task).map(Vec::as_slice)
    }

    /// Keeps only the labels of `tasks`.
    pub fn restrict(&mut self, tasks: &BTreeSet<TaskId>) {
        self.labels.retain(|t, _| tasks.contains(t));
        self.validity.retain(|t, _| tasks.contains(t));
    }
}

/// Focal length in pixels used to convert screen-space flow to camera-space motion.
pub fn focal_length(width: usize) -> f64 {
    width as f64 / 2.0
}

/// Maps a reflectance-times-irradiance value in `[0, 1]` to a frame value in `[-1, 1]`.
pub fn compose_pixel(albedo: f64, shading: f64) -> f64 {
    2.0 * (albedo * shading).clamp(0.0, 1.0) - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Flat,
    Checker(i64),
    Stripes(i64),
}

impl Texture {
    fn factor(self, lx: i64, ly: i64) -> f64 {
        match self {
            Texture::Flat => 1.0,
            Texture::Checker(p) => {
                if (lx.div_euclid(p) + ly.div_euclid(p)) % 2 == 0 {
                    1.0
                } else {
                    0.7
                }
            }
            Texture::Stripes(p) => {
                if lx.div_euclid(p) % 2 == 0 {
                    1.0
                } else {
                    0.75
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Primitive {
    shape: Shape,
    cx: i64,
    cy: i64,
    rx: i64,
    ry: i64,
    depth: f64,
    bulge: f64,
    color: [f64; 3],
    texture: Texture,
    class: i32,
    shift: (i64, i64),
    dz: f64,
}

/// Surface seen at one pixel of one frame.
#[derive(Clone, Copy, Debug)]
struct Surface {
    id: usize,
    depth: f64,
    has_depth: bool,
    normal: [f64; 3],
    albedo: [f64; 3],
    shading: f64,
    class: i32,
}

struct Layout {
    style: SceneStyle,
    height: usize,
    width: usize,
    horizon: f64,
    ground_normal: [f64; 3],
    back_depth: f64,
    back_color: [f64; 3],
    back_texture: Texture,
    ground_color: [f64; 3],
    light: [f64; 3],
    objects: Vec<Primitive>,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn texture(rng: &mut ChaCha8Rng) -> Texture {
    match rng.random_range(0..3) {
        0 => Texture::Flat,
        1 => Texture::Checker(rng.random_range(2..6)),
        _ => Texture::Stripes(rng.random_range(2..5)),
    }
}

impl Layout {
    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize, style: SceneStyle, motion: Motion) -> Self {
        let h = height as f64;
        let horizon = match style {
            SceneStyle::Objects => -1.0,
            _ => rng.random_range(0.3..0.5) * h,
        };
        let pitch: f64 = rng.random_range(0.1..0.3);
        let ground_normal = normalize([0.0, pitch.cos(), pitch.sin()]);
        let light = normalize([rng.random_range(-0.5..0.5), rng.random_range(0.2..0.8), rng.random_range(0.5..1.0)]);
        let back_depth = match style {
            SceneStyle::Indoor => rng.random_range(8.0..12.0),
            SceneStyle::Objects => rng.random_range(20.0..30.0),
            SceneStyle::Urban => 0.0,
        };
        let back_color = match style {
            SceneStyle::Urban => [0.55, 0.7, 0.95],
            _ => color(rng, 0.3, 0.9),
        };
        let back_texture = match style {
            SceneStyle::Urban => Texture::Flat,
            _ => texture(rng),
        };
        let ground_color = color(rng, 0.25, 0.6);
        let max_shift = (width / 16).max(1) as i64;
        let n = rng.random_range(2..=6);
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let rmin = (width / 16).max(2) as i64;
            let rmax = (width / 5).max(rmin as usize + 1) as i64;
            let rx = rng.random_range(rmin..=rmax);
            let ry = rng.random_range(rmin..=(rmax * height as i64 / width as i64).max(rmin));
            let cx = rng.random_range(0..width as i64);
            let lo_y = if horizon > 0.0 { (horizon as i64 - ry / 2).max(0) } else { 0 };
            let cy = rng.random_range(lo_y..height as i64);
            let depth = match style {
                SceneStyle::Indoor => rng.random_range(2.0..7.0),
                SceneStyle::Urban => rng.random_range(3.0..25.0),
                SceneStyle::Objects => rng.random_range(2.0..15.0),
            };
            let class = match (style, shape) {
                (SceneStyle::Urban, Shape::Rect) => [BUILDING, POLE, SIGN, VEHICLE][rng.random_range(0..4)],
                (SceneStyle::Urban, Shape::Ellipse) => [VEGETATION, LIGHT][rng.random_range(0..2)],
                (SceneStyle::Indoor, _) => [POLE, SIGN, LIGHT][rng.random_range(0..3)],
                (SceneStyle::Objects, _) => [VEHICLE, SIGN][rng.random_range(0..2)],
            };
            let (shift, dz) = match motion {
                Motion::Static => ((0, 0), 0.0),
                Motion::Random => (
                    (rng.random_range(-max_shift..=max_shift), rng.random_range(-max_shift..=max_shift)),
                    rng.random_range(-0.5..0.5),
                ),
            };
            objects.push(Primitive {
                shape,
                cx,
                cy,
                rx,
                ry,
                depth,
                bulge: if shape == Shape::Ellipse { rng.random_range(0.2..0.8) } else { 0.0 },
                color: color(rng, 0.15, 0.95),
                texture: texture(rng),
                class,
                shift,
                dz,
            });
        }
        Self {
            style,
            height,
            width,
            horizon,
            ground_normal,
            back_depth,
            back_color,
            back_texture,
            ground_color,
            light,
            objects,
        }
    }

    fn shade(&self, n: [f64; 3]) -> f64 {
        AMBIENT + (1.0 - AMBIENT) * dot(n, self.light).max(0.0)
    }

    fn background(&self, x: usize, y: usize) -> Surface {
        let yc = y as f64 + 0.5;
        let (xi, yi) = (x as i64, y as i64);
        let below = self.style != SceneStyle::Objects && yc > self.horizon;
        if below {
            let f = focal_length(self.width);
            let depth = (CAMERA_HEIGHT * f / (yc - self.horizon)).min(MAX_GROUND_DEPTH);
            let t = Texture::Checker(4).factor(xi, yi);
            let albedo = self.ground_color.map(|c| c * t);
            let class = ROAD;
            return Surface {
                id: 0,
                depth,
                has_depth: true,
                normal: self.ground_normal,
                albedo,
                shading: self.shade(self.ground_normal),
                class,
            };
        }
        match self.style {
            SceneStyle::Urban => Surface {
                id: 1,
                depth: 0.0,
                has_depth: false,
                normal: [0.0, 0.0, 1.0],
                albedo: self.back_color,
                shading: 1.0,
                class: SKY,
            },
            _ => {
                let n = [0.0, 0.0, 1.0];
                let t = self.back_texture.factor(xi, yi);
                Surface {
                    id: 1,
                    depth: self.back_depth,
                    has_depth: true,
                    normal: n,
                    albedo: self.back_color.map(|c| c * t),
                    shading: self.shade(n),
                    class: BUILDING,
                }
            }
        }
    }

    /// Renders one frame (`second` applies object motion) as a per-pixel surface list.
    fn render(&self, second: bool) -> Vec<Surface> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut s = self.background(x, y);
                for (k, o) in self.objects.iter().enumerate() {
                    let (sx, sy, dz) = if second { (o.shift.0, o.shift.1, o.dz) } else { (0, 0, 0.0) };
                    let lx = x as i64 - (o.cx + sx);
                    let ly = y as i64 - (o.cy + sy);
                    let (ux, uy) = (lx as f64 / o.rx as f64, ly as f64 / o.ry as f64);
                    let (inside, depth, normal) = match o.shape {
                        Shape::Rect => (lx.abs() <= o.rx && ly.abs() <= o.ry, o.depth + dz, [0.0, 0.0, 1.0]),
                        Shape::Ellipse => {
                            let r2 = ux * ux + uy * uy;
                            let cap = (1.0 - r2).max(0.0).sqrt();
                            (r2 <= 1.0, o.depth + dz - o.bulge * cap, normalize([ux, -uy, cap.max(1e-3)]))
                        }
                    };
                    if inside && (!s.has_depth || depth < s.depth) {
                        let t = o.texture.factor(lx, ly);
                        s = Surface {
                            id: k + 2,
                            depth,
                            has_depth: true,
                            normal,
                            albedo: o.color.map(|c| c * t),
                            shading: self.shade(normal),
                            class: o.class,
                        };
                    }
                }
                out.push(s);
            }
        }
        out
    }

    fn shift_of(&self, id: usize) -> (i64, i64) {
        if id >= 2 {
            self.objects[id - 2].shift
        } else {
            (0, 0)
        }
    }
}

fn frame(surfaces: &[Surface], h: usize, w: usize) -> Raster {
    let data = surfaces.iter().flat_map(|s| s.albedo.map(|a| compose_pixel(a, s.shading))).collect();
    Raster { height: h, width: w, channels: 3, data }
}

/// Generates a scene with all seven labels.
pub fn generate_scene(seed: u64, height: usize, width: usize, style: SceneStyle, motion: Motion) -> Result<SceneSample> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Precondition(format!(
            "resolution {height}x{width} too small to place primitives (minimum {MIN_SIDE}x{MIN_SIDE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::random(&mut rng, height, width, style, motion);
    let si = layout.render(false);
    let sj = layout.render(true);
    let n = height * width;
    let f = focal_length(width);

    let mut flow = Vec::with_capacity(n * 2);
    let mut sflow = Vec::with_capacity(n * 3);
    let mut flow_valid = Vec::with_capacity(n);
    let mut sflow_valid = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            let s = &si[y * width + x];
            let (dx, dy) = layout.shift_of(s.id);
            let (qx, qy) = (x as i64 + dx, y as i64 + dy);
            let target = (qx >= 0 && qy >= 0 && (qx as usize) < width && (qy as usize) < height)
                .then(|| &sj[qy as usize * width + qx as usize])
                .filter(|t| t.id == s.id);
            let vis = target.is_some();
            let dz = match target {
                Some(t) if s.has_depth => t.depth - s.depth,
                _ => if s.id >= 2 { layout.objects[s.id - 2].dz } else { 0.0 },
            };
            flow.extend([dx as f64, dy as f64]);
            sflow.extend([dx as f64 * s.depth / f, dy as f64 * s.depth / f, dz]);
            flow_valid.push(vis);
            sflow_valid.push(vis && s.has_depth);
        }
    }
    let depth_valid: Vec<bool> = si.iter().map(|s| s.has_depth).collect();

    let mut labels = BTreeMap::new();
    let mut validity = BTreeMap::new();
    let map = |c: usize, d: Vec<f64>| Annotation::Map(Raster { height, width, channels: c, data: d });
    labels.insert(
        TaskId::Semantic,
        Annotation::Labels(LabelMap { height, width, data: si.iter().map(|s| s.class).collect() }),
    );
    validity.insert(TaskId::Semantic, vec![true; n]);
    labels.insert(TaskId::Normal, map(3, si.iter().flat_map(|s| s.normal).collect()));
    validity.insert(TaskId::Normal, depth_valid.clone());
    labels.insert(TaskId::Depth, map(1, si.iter().map(|s| s.depth).collect()));
    validity.insert(TaskId::Depth, depth_valid);
    labels.insert(TaskId::OpticalFlow, map(2, flow));
    validity.insert(TaskId::OpticalFlow, flow_valid);
    labels.insert(TaskId::SceneFlow, map(3, sflow));
    validity.insert(TaskId::SceneFlow, sflow_valid);
    labels.insert(TaskId::Shading, map(1, si.iter().map(|s| s.shading).collect()));
    validity.insert(TaskId::Shading, vec![true; n]);
    labels.insert(TaskId::Albedo, map(3, si.iter().flat_map(|s| s.albedo).collect()));
    validity.insert(TaskId::Albedo, vec![true; n]);

    Ok(SceneSample {
        frame_i: frame(&si, height, width),
        frame_j: frame(&sj, height, width),
        labels,
        validity,
        dataset_id: format!("scene-{}", style.name()),
        seed,
    })
}

/// Rendered depth of both frames of the scene [`generate_scene`] builds from
/// the same arguments. Pixels without depth (sky) are NaN.
pub fn frame_depths(seed: u64, height: usize, width: usize, style: SceneStyle, motion: Motion) -> Result<(Raster, Raster)> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Precondition(format!("resolution {height}x{width} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::random(&mut rng, height, width, style, motion);
    let depth = |moved: bool| {
        let data = layout.render(moved).iter().map(|s| if s.has_depth { s.depth } else { f64::NAN }).collect();
        Raster { height, width, channels: 1, data }
    };
    Ok((depth(false), depth(true)))
}

/// Deterministic per-sample seed derived from a dataset seed (splitmix64 finalizer).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageRow {
    pub dataset_id: String,
    pub style: SceneStyle,
    pub tasks: BTreeSet<TaskId>,
}

/// Which dataset carries labels for which task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageMatrix {
    pub rows: Vec<CoverageRow>,
}

impl Default for CoverageMatrix {
    fn default() -> Self {
        use TaskId::*;
        let row = |id: &str, style, tasks: &[TaskId]| CoverageRow {
            dataset_id: id.to_string(),
            style,
            tasks: tasks.iter().copied().collect(),
        };
        Self {
            rows: vec![
                row("toy-indoor", SceneStyle::Indoor, &[Normal, Depth, Shading, Albedo]),
                row("toy-urban", SceneStyle::Urban, &[Semantic, Normal, Depth, OpticalFlow, SceneFlow]),
                row("toy-objects", SceneStyle::Objects, &[OpticalFlow, SceneFlow]),
            ],
        }
    }
}

impl CoverageMatrix {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.rows {
            if !ids.insert(r.dataset_id.as_str()) {
                return Err(Error::Config(format!("duplicate dataset id `{}`", r.dataset_id)));
            }
        }
        for t in TaskId::ALL {
            if !self.rows.iter().any(|r| r.tasks.contains(&t)) {
                return Err(Error::Config(format!("task {t} is not covered by any dataset")));
            }
        }
        Ok(())
    }

    pub fn covers(&self, dataset_id: &str, task: TaskId) -> bool {
        self.rows.iter().any(|r| r.dataset_id == dataset_id && r.tasks.contains(&task))
    }

    pub fn row(&self, dataset_id: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.dataset_id == dataset_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub style: SceneStyle,
    pub tasks: BTreeSet<TaskId>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub focal_length: f64,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
}

/// Generates the samples of one coverage row in memory.
pub fn generate_dataset(row: &CoverageRow, n_samples: usize, seed: u64, height: usize, width: usize) -> Result<Vec<SceneSample>> {
    if n_samples == 0 {
        return Err(Error::Precondition("a dataset needs at least one sample".into()));
    }
    let one = |i: usize| -> Result<SceneSample> {
        let s = sample_seed(seed, i as u64);
        let mut sample = generate_scene(s, height, width, row.style, Motion::Random)?;
        sample.restrict(&row.tasks);
        sample.dataset_id = row.dataset_id.clone();
        Ok(sample)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_samples).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_samples).map(one).collect()
    }
}

fn sample_dir_name(i: usize) -> String {
    format!("{i:06}")
}

fn write_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    store::write_raster(dir, "frame_i", &s.frame_i, None)?;
    store::write_raster(dir, "frame_j", &s.frame_j, None)?;
    for (task, ann) in &s.labels {
        match ann {
            Annotation::Labels(l) => store::write_labels(dir, task.name(), l, Some(*task))?,
            Annotation::Map(r) => store::write_raster(dir, task.name(), r, Some(*task))?,
        }
        if let Some(v) = s.validity.get(task) {
            store::write_mask(dir, &format!("{task}_valid"), s.height(), s.width(), v, Some(*task))?;
        }
    }
    Ok(())
}

/// Writes a dataset for one coverage row under `<root>/<dataset_id>/`.
pub fn assemble_dataset(
    root: &Path,
    row: &CoverageRow,
    n_samples: usize,
    seed: u64,
    height: usize,
    width: usize,
    factor: usize,
) -> Result<DatasetManifest> {
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::Precondition(format!("resolution {height}x{width} not divisible by codec factor {factor}")));
    }
    let samples = generate_dataset(row, n_samples, seed, height, width)?;
    let dir = root.join(&row.dataset_id);
    if dir.exists() {
        fs::remove_dir_all(&dir).at(&dir)?;
    }
    fs::create_dir_all(&dir).at(&dir)?;
    let mut entries = Vec::with_capacity(n_samples);
    for (i, s) in samples.iter().enumerate() {
        let id = sample_dir_name(i);
        write_sample(&dir.join(&id), s)?;
        entries.push(SampleEntry { id, seed: s.seed });
    }
    let manifest = DatasetManifest {
        dataset_id: row.dataset_id.clone(),
        style: row.style,
        tasks: row.tasks.clone(),
        seed,
        height,
        width,
        focal_length: focal_length(width),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

/// Source of labeled samples; real datasets plug in by implementing this.
pub trait SampleSource {
    fn dataset_id(&self) -> &str;
    fn tasks(&self) -> &BTreeSet<TaskId>;
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<SceneSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dataset held fully in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub style: SceneStyle,
    pub tasks: BTreeSet<TaskId>,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn from_row(row: &CoverageRow, samples: Vec<SceneSample>) -> Self {
        Self { id: row.dataset_id.clone(), style: row.style, tasks: row.tasks.clone(), samples }
    }
}

impl SampleSource for Dataset {
    fn dataset_id(&self) -> &str {
        &self.id
    }

    fn tasks(&self) -> &BTreeSet<TaskId> {
        &self.tasks
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<SceneSample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("sample {index} out of range for `{}`", self.id)))
    }
}

/// Reads a dataset written by [`assemble_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let sd = dir.join(&e.id);
        let mut labels = BTreeMap::new();
        let mut validity = BTreeMap::new();
        for &task in &manifest.tasks {
            let ann = if task == TaskId::Semantic {
                Annotation::Labels(store::read_labels(&sd, task.name())?)
            } else {
                Annotation::Map(store::read_raster(&sd, task.name())?)
            };
            labels.insert(task, ann);
            validity.insert(task, store::read_mask(&sd, &format!("{task}_valid"))?);
        }
        samples.push(SceneSample {
            frame_i: store::read_raster(&sd, "frame_i")?,
            frame_j: store::read_raster(&sd, "frame_j")?,
            labels,
            validity,
            dataset_id: manifest.dataset_id.clone(),
            seed: e.seed,
        });
    }
    Ok(Dataset { id: manifest.dataset_id, style: manifest.style, tasks: manifest.tasks, samples })
}

/// Loads every dataset directory (one containing `manifest.json`) under `root`, sorted by id.
pub fn load_all(root: &Path) -> Result<Vec<Dataset>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .at(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Precondition(format!("no datasets found under {}", root.display())));
    }
    dirs.iter().map(|d| load_dataset(d)).collect()
}

/// Bilinear-free forward warp check: mean absolute difference between
/// `frame_i(p)` and `frame_j(p + flow(p))` over pixels marked visible.
pub fn warp_error(frame_i: &Raster, frame_j: &Raster, flow: &Raster, valid: &[bool]) -> Option<f64> {
    let (h, w) = (frame_i.height, frame_i.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !valid[p] {
                continue;
            }
            let qx = (x as f64 + flow.at(y, x, 0)).round() as i64;
            let qy = (y as f64 + flow.at(y, x, 1)).round() as i64;
            if qx < 0 || qy < 0 || qx as usize >= w || qy as usize >= h {
                continue;
            }
            let q = qy as usize * w + qx as usize;
            for c in 0..frame_i.channels {
                total += (frame_i.px(p)[c] - frame_j.px(q)[c]).abs();
            }
            count += frame_i.channels;
        }
    }
    (count > 0).then(|| total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(s: &SceneSample, t: TaskId) -> &Raster {
        s.label(t).and_then(Annotation::as_map).unwrap()
    }

    #[test]
    fn static_scene_has_zero_flow_and_identical_frames() {
        for style in [SceneStyle::Indoor, SceneStyle::Urban, SceneStyle::Objects] {
            let s = generate_scene(3, 32, 48, style, Motion::Static).unwrap();
            assert_eq!(s.frame_i, s.frame_j);
            assert!(map(&s, TaskId::OpticalFlow).data.iter().all(|&v| v == 0.0));
            assert!(map(&s, TaskId::SceneFlow).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn all_labels_present_and_physical() {
        for seed in 0..20 {
            let s = generate_scene(seed, 32, 32, SceneStyle::Urban, Motion::Random).unwrap();
            assert_eq!(s.labels.len(), 7);
            let d = map(&s, TaskId::Depth);
            let n = map(&s, TaskId::Normal);
            let dv = s.valid(TaskId::Depth).unwrap();
            for p in 0..d.pixels() {
                if dv[p] {
                    assert!(d.px(p)[0] > 0.0);
                    let len: f64 = n.px(p).iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((len - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn tiny_resolution_is_rejected() {
        assert!(generate_scene(0, 8, 32, SceneStyle::Indoor, Motion::Random).is_err());
    }

    #[test]
    fn default_coverage_is_complete() {
        let c = CoverageMatrix::default();
        c.validate().unwrap();
        assert_eq!(c.row("toy-indoor").unwrap().tasks.len(), 4);
        assert!(!c.covers("toy-objects", TaskId::Semantic));
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let c = CoverageMatrix::default();
        let row = c.row("toy-indoor").unwrap();
        assemble_dataset(dir.path(), row, 3, 11, 16, 32, 2).unwrap();
        let first = store::tree_checksum(dir.path()).unwrap();
        assemble_dataset(dir.path(), row, 3, 11, 16, 32, 2).unwrap();
        assert_eq!(first, store::tree_checksum(dir.path()).unwrap());
        let ds = load_dataset(&dir.path().join("toy-indoor")).unwrap();
        assert_eq!(ds.samples.len(), 3);
        assert_eq!(ds.samples[0].labels.len(), 4);
        assert!(assemble_dataset(dir.path(), row, 3, 11, 17, 32, 2).is_err());
    }
}
