//! Figure data: flow color wheel, scene-flow coloring, depth colormap,
//! semantic rendering and task-attention bar groups. Images are RGB rasters
//! in `[0, 1]`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::error::{Error, Result};
use crate::raster::{LabelMap, Raster};
use crate::task::TaskId;
use crate::task_codec::SemanticPalette;

/// Normalization of flow magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowScale {
    /// Largest magnitude in the image.
    Auto,
    Value(f64),
}

/// HSV in `[0, 1]^3` to RGB in `[0, 1]^3`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue of a flow vector: `(atan2(-vy, -vx) + pi) / (2 pi)`, in `[0, 1]`.
pub fn flow_hue(vx: f64, vy: f64) -> f64 {
    ((-vy).atan2(-vx) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)
}

fn check_finite(flow: &Raster, channels: usize) -> Result<()> {
    if flow.channels < channels {
        return Err(Error::Shape(format!("flow has {} channels, need {channels}", flow.channels)));
    }
    if flow.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("flow contains non-finite values".into()));
    }
    Ok(())
}

fn resolve(scale: FlowScale, values: impl Iterator<Item = f64>) -> f64 {
    match scale {
        FlowScale::Value(s) => s,
        FlowScale::Auto => values.fold(0.0, f64::max),
    }
}

fn lateral_hs(flow: &Raster, scale: FlowScale) -> Vec<(f64, f64)> {
    let mags: Vec<f64> = (0..flow.pixels()).map(|p| flow.px(p)[0].hypot(flow.px(p)[1])).collect();
    let s = resolve(scale, mags.iter().copied());
    (0..flow.pixels())
        .map(|p| {
            let (vx, vy) = (flow.px(p)[0], flow.px(p)[1]);
            let sat = if s > 0.0 { (mags[p] / s).min(1.0) } else { 0.0 };
            (flow_hue(vx, vy), sat)
        })
        .collect()
}

/// Color-wheel rendering of a 2-channel flow: hue from direction, saturation from magnitude, value 1.
pub fn flow_to_color(flow: &Raster, scale: FlowScale) -> Result<Raster> {
    check_finite(flow, 2)?;
    let data = lateral_hs(flow, scale).into_iter().flat_map(|(h, s)| hsv_to_rgb(h, s, 1.0)).collect();
    Raster::new(flow.height, flow.width, 3, data)
}

/// Like [`flow_to_color`] on `(vx, vy)`, with value `1 - clamp(vz / scale_z, 0, 1)`.
pub fn sceneflow_to_color(flow: &Raster, lateral: FlowScale, depth: FlowScale) -> Result<Raster> {
    check_finite(flow, 3)?;
    let hs = lateral_hs(flow, lateral);
    let sz = resolve(depth, (0..flow.pixels()).map(|p| flow.px(p)[2]));
    let data = hs
        .into_iter()
        .enumerate()
        .flat_map(|(p, (h, s))| {
            let vz = flow.px(p)[2];
            let v = if sz > 0.0 { 1.0 - (vz / sz).clamp(0.0, 1.0) } else { 1.0 };
            hsv_to_rgb(h, s, v)
        })
        .collect();
    Raster::new(flow.height, flow.width, 3, data)
}

/// Monotone blue-to-yellow ramp (near is bright). Invalid pixels are black.
pub const DEPTH_COLORMAP: &str = "linear blue-magenta-yellow, near = bright";

pub fn depth_to_color(depth: &Raster, valid: Option<&[bool]>) -> Result<Raster> {
    if depth.channels != 1 {
        return Err(Error::Shape(format!("depth has {} channels", depth.channels)));
    }
    let ok = |p: usize| valid.is_none_or(|v| v[p]) && depth.data[p].is_finite();
    let vals: Vec<f64> = (0..depth.pixels()).filter(|&p| ok(p)).map(|p| depth.data[p]).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = (0..depth.pixels())
        .flat_map(|p| {
            if !ok(p) {
                return [0.0; 3];
            }
            let t = if hi > lo { 1.0 - (depth.data[p] - lo) / (hi - lo) } else { 1.0 };
            [t.sqrt(), 0.2 + 0.6 * t * t, (1.0 - t) * 0.8 + 0.2 * t]
        })
        .collect();
    Raster::new(depth.height, depth.width, 3, data)
}

/// Palette colors in `[0, 1]`; ignore-index pixels are black.
pub fn semantic_to_color(labels: &LabelMap, palette: &SemanticPalette) -> Raster {
    let data = labels
        .data
        .iter()
        .flat_map(|&l| palette.rgb_of(l).map_or([0.0; 3], |c| c.map(|v| (v + 1.0) / 2.0)))
        .collect();
    Raster { height: labels.height, width: labels.width, channels: 3, data }
}

/// Maps a `[-1, 1]` 3-channel map to `[0, 1]` for display.
pub fn signed_to_unit(r: &Raster) -> Raster {
    Raster { data: r.data.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(), ..r.clone() }
}

/// Normalized attention from one main task to each auxiliary task at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarGroup {
    pub layer_index: usize,
    pub main_task: TaskId,
    pub bars: Vec<(TaskId, f64)>,
}

/// Groups trace rows by (layer, main task) and normalizes each group to sum 1.
/// `layers` restricts the output to the given layer indices.
pub fn attention_groups(trace: &AttentionTrace, layers: Option<&[usize]>) -> Result<Vec<BarGroup>> {
    if trace.rows.is_empty() {
        return Err(Error::Precondition("attention trace is empty".into()));
    }
    let mut groups: BTreeMap<(usize, TaskId), BTreeMap<TaskId, f64>> = BTreeMap::new();
    for r in &trace.rows {
        if layers.is_some_and(|l| !l.contains(&r.layer_index)) {
            continue;
        }
        *groups.entry((r.layer_index, r.main_task)).or_default().entry(r.aux_task).or_default() += r.mean_score;
    }
    if groups.is_empty() {
        return Err(Error::Precondition("no trace rows for the selected layers".into()));
    }
    Ok(groups
        .into_iter()
        .map(|((layer_index, main_task), bars)| {
            let total: f64 = bars.values().sum();
            let n = bars.len() as f64;
            let bars = bars.into_iter().map(|(t, v)| (t, if total > 0.0 { v / total } else { 1.0 / n })).collect();
            BarGroup { layer_index, main_task, bars }
        })
        .collect())
}

pub fn write_groups_csv(groups: &[BarGroup], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "layer_index,main_task,aux_task,normalized_score")?;
    for g in groups {
        for (t, v) in &g.bars {
            writeln!(w, "{},{},{},{:.9}", g.layer_index, g.main_task, t, v)?;
        }
    }
    Ok(())
}

/// Simple bar chart: one column block per group, one colored bar per auxiliary task.
pub fn render_bars(groups: &[BarGroup], bar_height: usize) -> Raster {
    let bar_w = 4;
    let gap = 6;
    let n_bars = groups.iter().map(|g| g.bars.len()).max().unwrap_or(0);
    let group_w = n_bars * bar_w + gap;
    let width = (groups.len() * group_w).max(1);
    let height = bar_height.max(1);
    let mut img = Raster::filled(height, width, 3, 1.0);
    for (gi, g) in groups.iter().enumerate() {
        for (bi, (t, v)) in g.bars.iter().enumerate() {
            let color = hsv_to_rgb(t.index() as f64 / TaskId::ALL.len() as f64, 0.8, 0.85);
            let h = ((v.clamp(0.0, 1.0)) * height as f64).round() as usize;
            for y in height - h..height {
                for x in 0..bar_w {
                    let px = gi * group_w + bi * bar_w + x;
                    img.px_mut(y * width + px).copy_from_slice(&color);
                }
            }
        }
    }
    img
}
