//! Browser demo for `mtl-lab`: flow color wheel, toy scene renders and mask-sampling statistics.
//!
//! The `*_rgba` and `mask_statistics` functions are plain Rust and testable natively.
//! The `#[wasm_bindgen]` wrappers only convert errors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use mtl_lab::attention::{sample_mask, MaskConfig, MaskStrategy};
use mtl_lab::synth::{generate_scene, Motion, SceneStyle};
use mtl_lab::task_codec::SemanticPalette;
use mtl_lab::viz::{depth_to_color, flow_to_color, sceneflow_to_color, semantic_to_color, signed_to_unit, FlowScale};
use mtl_lab::{Annotation, Raster, TaskId};

/// Upper bound on draws per statistics request, keeps the page responsive.
pub const MAX_DRAWS: u32 = 200_000;

fn to_rgba(r: &Raster) -> Vec<u8> {
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (0..r.pixels())
        .flat_map(|p| {
            let px = r.px(p);
            let [a, b, c] = match px.len() {
                1 => [px[0]; 3],
                _ => [px[0], px[1], px[2]],
            };
            [byte(a), byte(b), byte(c), 255]
        })
        .collect()
}

/// Square image of the flow color wheel; `max_magnitude` sets the saturation scale.
pub fn flow_wheel_rgba(size: usize, max_magnitude: f64) -> Result<Vec<u8>, String> {
    if size == 0 || !(max_magnitude > 0.0) {
        return Err("size and max_magnitude must be positive".into());
    }
    let half = size as f64 / 2.0;
    let data = (0..size * size)
        .flat_map(|p| {
            let (y, x) = ((p / size) as f64 + 0.5 - half, (p % size) as f64 + 0.5 - half);
            [x / half, y / half]
        })
        .collect();
    let flow = Raster::new(size, size, 2, data).map_err(|e| e.to_string())?;
    let img = flow_to_color(&flow, FlowScale::Value(max_magnitude)).map_err(|e| e.to_string())?;
    Ok(to_rgba(&img))
}

fn parse_style(s: &str) -> Result<SceneStyle, String> {
    match s {
        "indoor" => Ok(SceneStyle::Indoor),
        "urban" => Ok(SceneStyle::Urban),
        "objects" => Ok(SceneStyle::Objects),
        _ => Err(format!("unknown style {s:?}")),
    }
}

/// Renders one view of a generated scene. `view` is `frame_i`, `frame_j` or a task name.
pub fn scene_rgba(seed: u64, height: usize, width: usize, style: &str, view: &str) -> Result<Vec<u8>, String> {
    let scene = generate_scene(seed, height, width, parse_style(style)?, Motion::Random).map_err(|e| e.to_string())?;
    let img = match view {
        "frame_i" => scene.frame_i,
        "frame_j" => scene.frame_j,
        name => {
            let task: TaskId = name.parse().map_err(|_| format!("unknown view {name:?}"))?;
            let ann = scene.label(task).ok_or_else(|| format!("scene has no {name} label"))?;
            match (task, ann) {
                (_, Annotation::Labels(l)) => semantic_to_color(l, &SemanticPalette::default()),
                (TaskId::Depth, Annotation::Map(m)) => depth_to_color(m, scene.valid(task)).map_err(|e| e.to_string())?,
                (TaskId::Normal, Annotation::Map(m)) => signed_to_unit(m),
                (TaskId::OpticalFlow, Annotation::Map(m)) => flow_to_color(m, FlowScale::Auto).map_err(|e| e.to_string())?,
                (TaskId::SceneFlow, Annotation::Map(m)) => {
                    sceneflow_to_color(m, FlowScale::Auto, FlowScale::Auto).map_err(|e| e.to_string())?
                }
                (_, Annotation::Map(m)) => m.clone(),
            }
        }
    };
    Ok(to_rgba(&img))
}

/// Empirical frequency with which each auxiliary task gets masked, plus the fraction of draws
/// that masked anything. Returned as JSON `{"masked": [...], "any": f}`.
pub fn mask_statistics(pi: &[f64], rho: f64, strategy: &str, draws: u32, seed: u64) -> Result<String, String> {
    let strategy: MaskStrategy = serde_json::from_value(serde_json::Value::from(strategy)).map_err(|e| e.to_string())?;
    if !(0.0..=1.0).contains(&rho) {
        return Err("rho must lie in [0, 1]".into());
    }
    let total: f64 = pi.iter().sum();
    if pi.iter().any(|v| !(*v >= 0.0)) || !(total > 0.0) {
        return Err("pi needs non-negative entries with a positive sum".into());
    }
    let pi: Vec<f64> = pi.iter().map(|v| v / total).collect();
    let cfg = MaskConfig { strategy, rho, ..MaskConfig::default() };
    let draws = draws.clamp(1, MAX_DRAWS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; pi.len()];
    let mut any = 0u32;
    for _ in 0..draws {
        let keep = sample_mask(&pi, &cfg, &mut rng).map_err(|e| e.to_string())?;
        any += u32::from(keep.iter().any(|k| !k));
        for (c, k) in counts.iter_mut().zip(keep) {
            *c += u32::from(!k);
        }
    }
    let n = f64::from(draws);
    let masked: Vec<f64> = counts.iter().map(|&c| f64::from(c) / n).collect();
    Ok(serde_json::json!({ "masked": masked, "any": f64::from(any) / n, "draws": draws }).to_string())
}

#[wasm_bindgen(js_name = flowWheel)]
pub fn flow_wheel(size: usize, max_magnitude: f64) -> Result<Vec<u8>, JsError> {
    flow_wheel_rgba(size, max_magnitude).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene(seed: u64, height: usize, width: usize, style: &str, view: &str) -> Result<Vec<u8>, JsError> {
    scene_rgba(seed, height, width, style, view).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = maskStatistics)]
pub fn mask_statistics_js(pi: &[f64], rho: f64, strategy: &str, draws: u32, seed: u64) -> Result<String, JsError> {
    mask_statistics(pi, rho, strategy, draws, seed).map_err(|e| JsError::new(&e))
}
