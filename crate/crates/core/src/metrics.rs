//! Dense-prediction metrics, least-squares alignment and the multi-task
//! relative-performance aggregate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Annotation, LabelMap, Raster};
use crate::task::{MetricDirection, TaskId};

fn check_same(pred: &Raster, gt: &Raster) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.height, pred.width, pred.channels, gt.height, gt.width, gt.channels
        )));
    }
    Ok(())
}

fn check_mask(valid: &[bool], pixels: usize) -> Result<()> {
    if valid.len() != pixels {
        return Err(Error::Shape(format!("mask has {} entries for {pixels} pixels", valid.len())));
    }
    Ok(())
}

/// Scale and shift minimizing `sum (s * pred + b - gt)^2`. A constant
/// prediction gets `s = 0` and the mean offset.
pub fn fit_affine(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return (1.0, 0.0);
    }
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        cov += (p - mp) * (g - mg);
        var += (p - mp) * (p - mp);
    }
    if var <= f64::EPSILON * n * mp.abs().max(1.0).powi(2) {
        return (0.0, mg);
    }
    let s = cov / var;
    (s, mg - s * mp)
}

/// Per-channel least-squares alignment of `pred` to `gt` over valid pixels.
pub fn align_least_squares(pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<Raster> {
    check_same(pred, gt)?;
    check_mask(valid, pred.pixels())?;
    let mut out = pred.clone();
    for c in 0..pred.channels {
        let (mut ps, mut gs) = (Vec::new(), Vec::new());
        for p in (0..pred.pixels()).filter(|&p| valid[p]) {
            ps.push(pred.px(p)[c]);
            gs.push(gt.px(p)[c]);
        }
        let (s, b) = fit_affine(&ps, &gs);
        for p in 0..pred.pixels() {
            out.px_mut(p)[c] = s * pred.px(p)[c] + b;
        }
    }
    Ok(out)
}

/// Class confusion counts, accumulated over any number of images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    n_classes: usize,
    ignore_index: i32,
    /// `counts[gt * n + pred]`.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize, ignore_index: i32) -> Self {
        Self { n_classes, ignore_index, counts: vec![0; n_classes * n_classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.data.len() != gt.data.len() {
            return Err(Error::Shape(format!("{} predicted labels vs {} ground truth", pred.data.len(), gt.data.len())));
        }
        let n = self.n_classes as i32;
        for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
            if g == self.ignore_index {
                continue;
            }
            for l in [p, g] {
                if !(0..n).contains(&l) {
                    return Err(Error::UnknownLabel { label: l as i64, pixel: i });
                }
            }
            self.counts[g as usize * self.n_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    /// Per-class IoU in percent (`None` for classes absent from both) and their mean.
    pub fn iou(&self) -> (Vec<Option<f64>>, f64) {
        let k = self.n_classes;
        let per: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| 100.0 * tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        (per, mean)
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, n_classes: usize, ignore_index: i32) -> Result<(Vec<Option<f64>>, f64)> {
    let mut c = Confusion::new(n_classes, ignore_index);
    c.add(pred, gt)?;
    Ok(c.iou())
}

fn valid_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean angle between (renormalized) normal vectors, in degrees.
pub fn mean_angular_error(pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    check_mask(valid, pred.pixels())?;
    Ok(valid_mean((0..pred.pixels()).filter(|&p| valid[p]).map(|p| {
        let (a, b) = (pred.px(p), gt.px(p));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        cos.clamp(-1.0, 1.0).acos().to_degrees()
    })))
}

/// `100 * mean(|pred - gt| / gt)` over valid pixels of single-channel maps.
pub fn abs_rel(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truth values", pred.len(), gt.len())));
    }
    check_mask(valid, pred.len())?;
    Ok(100.0 * valid_mean((0..pred.len()).filter(|&p| valid[p]).map(|p| (pred[p] - gt[p]).abs() / gt[p])))
}

/// Mean Euclidean norm of the per-pixel difference (2D or 3D flow).
pub fn epe(pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    check_mask(valid, pred.pixels())?;
    Ok(valid_mean((0..pred.pixels()).filter(|&p| valid[p]).map(|p| {
        pred.px(p).iter().zip(gt.px(p)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    })))
}

pub fn rmse(pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    check_mask(valid, pred.pixels())?;
    let c = pred.channels;
    Ok(valid_mean(
        (0..pred.pixels()).filter(|&p| valid[p]).flat_map(|p| (0..c).map(move |k| (p, k))).map(|(p, k)| {
            let d = pred.px(p)[k] - gt.px(p)[k];
            d * d
        }),
    )
    .sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over channels, using an 11x11 Gaussian window (sigma 1.5) placed
/// fully inside the image and data range 1. Windows are averaged over centers
/// that are valid pixels. Images smaller than the window use a window clipped
/// to the smaller side.
pub fn ssim(pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    check_mask(valid, pred.pixels())?;
    let (h, w) = (pred.height, pred.width);
    let size = SSIM_WINDOW.min(h).min(w);
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let half = size / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..pred.channels {
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                if !valid[(y0 + half) * w + x0 + half] {
                    continue;
                }
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..size {
                    for dx in 0..size {
                        let wt = k[dy] * k[dx];
                        let a = pred.at(y0 + dy, x0 + dx, ch);
                        let b = gt.at(y0 + dy, x0 + dx, ch);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 1.0 } else { total / count as f64 })
}

const LMSE_WINDOW: usize = 16;

/// Local mean squared error: 16x16 windows with stride 8, each prediction
/// window rescaled by its least-squares factor, normalized by the ground
/// truth energy of the same windows. Invalid pixels are skipped.
pub fn lmse(pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    check_mask(valid, pred.pixels())?;
    let (h, w) = (pred.height, pred.width);
    let (wy, wx) = (LMSE_WINDOW.min(h), LMSE_WINDOW.min(w));
    let starts = |len: usize, win: usize| -> Vec<usize> {
        let step = (win / 2).max(1);
        let mut v: Vec<usize> = (0..=len - win).step_by(step).collect();
        if *v.last().unwrap() != len - win {
            v.push(len - win);
        }
        v
    };
    let (mut err, mut energy) = (0.0, 0.0);
    for ch in 0..pred.channels {
        for &y0 in &starts(h, wy) {
            for &x0 in &starts(w, wx) {
                let (mut pp, mut pg, mut gg) = (0.0, 0.0, 0.0);
                let mut pix = Vec::new();
                for y in y0..y0 + wy {
                    for x in x0..x0 + wx {
                        if valid[y * w + x] {
                            let (a, b) = (pred.at(y, x, ch), gt.at(y, x, ch));
                            pp += a * a;
                            pg += a * b;
                            gg += b * b;
                            pix.push((a, b));
                        }
                    }
                }
                let alpha = if pp > 0.0 { pg / pp } else { 0.0 };
                err += pix.iter().map(|(a, b)| (b - alpha * a).powi(2)).sum::<f64>();
                energy += gg;
            }
        }
    }
    Ok(if energy > 0.0 { err / energy } else { 0.0 })
}

/// Optional depth metrics: threshold accuracies (percent), squared relative
/// error and RMSE of log depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthExtras {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub sq_rel: f64,
    pub rmse_log: f64,
}

pub fn depth_extras(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<DepthExtras> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truth values", pred.len(), gt.len())));
    }
    check_mask(valid, pred.len())?;
    let idx: Vec<usize> = (0..pred.len()).filter(|&p| valid[p] && gt[p] > 0.0).collect();
    let n = idx.len().max(1) as f64;
    let mut d = [0.0; 3];
    let (mut sq, mut lg) = (0.0, 0.0);
    for &p in &idx {
        let pr = pred[p].max(1e-6);
        let r = (pr / gt[p]).max(gt[p] / pr);
        for (i, th) in [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if r < *th {
                d[i] += 1.0;
            }
        }
        sq += (pr - gt[p]).powi(2) / gt[p];
        lg += (pr.ln() - gt[p].ln()).powi(2);
    }
    Ok(DepthExtras {
        delta1: 100.0 * d[0] / n,
        delta2: 100.0 * d[1] / n,
        delta3: 100.0 * d[2] / n,
        sq_rel: sq / n,
        rmse_log: (lg / n).sqrt(),
    })
}

/// Whether a task's prediction is affinely aligned to the ground truth before scoring.
pub fn uses_alignment(task: TaskId) -> bool {
    !matches!(task, TaskId::Semantic | TaskId::Normal)
}

/// Headline metric of one non-semantic prediction, with alignment applied where the protocol requires it.
pub fn score_map(task: TaskId, pred: &Raster, gt: &Raster, valid: &[bool]) -> Result<f64> {
    let pred = if uses_alignment(task) { align_least_squares(pred, gt, valid)? } else { pred.clone() };
    match task {
        TaskId::Semantic => Err(Error::Precondition("semantic predictions are scored through a confusion matrix".into())),
        TaskId::Normal => mean_angular_error(&pred, gt, valid),
        TaskId::Depth => abs_rel(&pred.data, &gt.data, valid),
        TaskId::OpticalFlow | TaskId::SceneFlow => epe(&pred, gt, valid),
        TaskId::Shading | TaskId::Albedo => rmse(&pred, gt, valid),
    }
}

/// Running aggregate of one task's metric over a dataset.
#[derive(Clone, Debug)]
pub enum MetricAccumulator {
    Semantic(Confusion),
    Mean { task: TaskId, sum: f64, count: usize },
}

impl MetricAccumulator {
    pub fn new(task: TaskId, n_classes: usize, ignore_index: i32) -> Self {
        match task {
            TaskId::Semantic => MetricAccumulator::Semantic(Confusion::new(n_classes, ignore_index)),
            t => MetricAccumulator::Mean { task: t, sum: 0.0, count: 0 },
        }
    }

    pub fn add(&mut self, pred: &Annotation, gt: &Annotation, valid: &[bool]) -> Result<()> {
        match (self, pred, gt) {
            (MetricAccumulator::Semantic(c), Annotation::Labels(p), Annotation::Labels(g)) => {
                let masked = LabelMap {
                    height: g.height,
                    width: g.width,
                    data: g.data.iter().zip(valid).map(|(&l, &v)| if v { l } else { c.ignore_index }).collect(),
                };
                c.add(p, &masked)
            }
            (MetricAccumulator::Mean { task, sum, count }, Annotation::Map(p), Annotation::Map(g)) => {
                if valid.iter().any(|&v| v) {
                    *sum += score_map(*task, p, g, valid)?;
                    *count += 1;
                }
                Ok(())
            }
            _ => Err(Error::Shape("prediction and ground truth annotation kinds differ".into())),
        }
    }

    pub fn samples(&self) -> usize {
        match self {
            MetricAccumulator::Semantic(c) => usize::from(c.counts.iter().any(|&n| n > 0)),
            MetricAccumulator::Mean { count, .. } => *count,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricAccumulator::Semantic(c) => c.counts.iter().any(|&n| n > 0).then(|| c.iou().1),
            MetricAccumulator::Mean { sum, count, .. } => (*count > 0).then(|| sum / *count as f64),
        }
    }
}

/// Metric values keyed by `(task, dataset)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub values: BTreeMap<TaskId, BTreeMap<String, f64>>,
}

impl MetricTable {
    pub fn insert(&mut self, task: TaskId, dataset: &str, value: f64) {
        self.values.entry(task).or_default().insert(dataset.to_string(), value);
    }

    pub fn get(&self, task: TaskId, dataset: &str) -> Option<f64> {
        self.values.get(&task).and_then(|m| m.get(dataset)).copied()
    }

    pub fn has_all_tasks(&self) -> bool {
        TaskId::ALL.iter().all(|t| self.values.get(t).is_some_and(|m| !m.is_empty()))
    }
}

/// Mean signed relative change (percent) versus the baseline, sign-flipped
/// for lower-is-better metrics. A task scored on several datasets contributes
/// the mean of its per-dataset changes.
pub fn delta_m(model: &MetricTable, baseline: &MetricTable) -> Result<f64> {
    let mut total = 0.0;
    for task in TaskId::ALL {
        let m = model.values.get(&task).filter(|m| !m.is_empty()).ok_or_else(|| Error::MissingMetric(format!("model {task}")))?;
        let mut acc = 0.0;
        for (ds, &mv) in m {
            let b = baseline.get(task, ds).ok_or_else(|| Error::MissingMetric(format!("baseline {task} on {ds}")))?;
            if b == 0.0 {
                return Err(Error::ZeroBaseline(format!("{task} on {ds}")));
            }
            let rel = 100.0 * (mv - b) / b;
            acc += match task.metric_direction() {
                MetricDirection::HigherBetter => rel,
                MetricDirection::LowerBetter => -rel,
            };
        }
        total += acc / m.len() as f64;
    }
    Ok(total / TaskId::ALL.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub task: TaskId,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub entries: Vec<MetricEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn table(&self) -> MetricTable {
        let mut t = MetricTable::default();
        for e in &self.entries {
            t.insert(e.task, &e.dataset, e.value);
        }
        t
    }

    /// Fills `delta_m` when every task has a baseline; otherwise records a warning.
    pub fn attach_baseline(&mut self, baseline: &MetricTable, baseline_ref: &str) {
        self.baseline_ref = Some(baseline_ref.to_string());
        if !baseline.has_all_tasks() {
            let missing: Vec<&str> = TaskId::ALL.iter().filter(|t| !baseline.values.contains_key(t)).map(|t| t.name()).collect();
            self.delta_m = None;
            self.warnings.push(format!("delta_m omitted: no single-task baseline for {}", missing.join(", ")));
            return;
        }
        match delta_m(&self.table(), baseline) {
            Ok(d) => self.delta_m = Some(d),
            Err(e) => {
                self.delta_m = None;
                self.warnings.push(format!("delta_m omitted: {e}"));
            }
        }
    }
}

/// Column layout of the comparison table: one column per `(task, dataset)`.
pub fn table_columns(tables: &[&MetricTable]) -> Vec<(TaskId, String)> {
    let mut cols = Vec::new();
    for task in TaskId::ALL {
        let mut ds: Vec<&String> = tables.iter().filter_map(|t| t.values.get(&task)).flat_map(|m| m.keys()).collect();
        ds.sort();
        ds.dedup();
        cols.extend(ds.into_iter().map(|d| (task, d.clone())));
    }
    cols
}

/// Aligned plain-text table: one row per model, one column per task metric, then delta_m.
pub fn render_table(rows: &[(String, MetricTable, Option<f64>)]) -> String {
    let tables: Vec<&MetricTable> = rows.iter().map(|r| &r.1).collect();
    let cols = table_columns(&tables);
    let mut header = vec!["model".to_string()];
    header.extend(cols.iter().map(|(t, d)| format!("{}:{} {}", t, d, if t.metric_direction() == MetricDirection::HigherBetter { "^" } else { "v" })));
    header.push("delta_m ^".into());
    let mut cells: Vec<Vec<String>> = vec![header];
    for (name, t, dm) in rows {
        let mut r = vec![name.clone()];
        for (task, ds) in &cols {
            r.push(t.get(*task, ds).map_or("-".into(), |v| format!("{v:.4}")));
        }
        r.push(dm.map_or("-".into(), |v| format!("{v:+.2}")));
        cells.push(r);
    }
    let widths: Vec<usize> = (0..cells[0].len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in cells.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}
