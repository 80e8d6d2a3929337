//! Held-out evaluation of a trained model under the alignment protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{predict_latent, FrameLatents, Model, Weights};
use crate::attention::AttentionTrace;
use crate::error::Result;
use crate::metrics::{score_map, MetricAccumulator, MetricEntry, MetricsReport};
use crate::raster::Annotation;
use crate::synth::Dataset;
use crate::task::TaskId;
use crate::task_codec::postprocess_task;

/// `(task, dataset id)` pairs scored by [`evaluate`]; depth is scored on two datasets.
pub const EVAL_PROTOCOL: [(TaskId, &str); 8] = [
    (TaskId::Semantic, "toy-urban"),
    (TaskId::Normal, "toy-indoor"),
    (TaskId::Depth, "toy-urban"),
    (TaskId::Depth, "toy-indoor"),
    (TaskId::OpticalFlow, "toy-urban"),
    (TaskId::SceneFlow, "toy-urban"),
    (TaskId::Shading, "toy-indoor"),
    (TaskId::Albedo, "toy-indoor"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub task: TaskId,
    pub dataset: String,
    pub index: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub trace: AttentionTrace,
    /// Per-image headline metric for every non-semantic pair.
    pub per_sample: Vec<SampleScore>,
}

/// Scores `weights` on every protocol pair whose dataset is present (masking
/// disabled). Multi-stream weights also yield an attention trace.
pub fn evaluate(model: &Model, weights: &Weights, name: &str, datasets: &[Dataset], protocol: &[(TaskId, &str)]) -> Result<EvalOutput> {
    let mut out = EvalOutput::default();
    out.report.model = name.to_string();
    let record = matches!(weights, Weights::Multi { .. });
    let mut traces: BTreeMap<TaskId, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
    for &(task, ds_id) in protocol {
        let Some(ds) = datasets.iter().find(|d| d.id == ds_id) else { continue };
        let mut acc = MetricAccumulator::new(task, model.palette.n_classes(), model.palette.ignore_index);
        for (index, s) in ds.samples.iter().enumerate() {
            let Some(gt) = s.label(task) else { continue };
            let n = s.height() * s.width();
            let valid = s.valid(task).map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; n]);
            let frames = FrameLatents::encode(model, &s.frame_i, Some(&s.frame_j))?;
            let (z, tr) = predict_latent(model, weights, &frames, task, record)?;
            if record {
                traces.entry(task).or_default().push(tr);
            }
            let decoded = model.codec.decode_latent(&z)?;
            let pred = postprocess_task(task, &decoded, &model.palette)?;
            if let (Annotation::Map(p), Annotation::Map(g)) = (&pred, gt) {
                if valid.iter().any(|&v| v) {
                    out.per_sample.push(SampleScore { task, dataset: ds.id.clone(), index, value: score_map(task, p, g, &valid)? });
                }
            }
            acc.add(&pred, gt, &valid)?;
        }
        if let Some(value) = acc.value() {
            out.report.entries.push(MetricEntry {
                task,
                dataset: ds.id.clone(),
                metric: task.metric_name().to_string(),
                value,
                samples: match &acc {
                    MetricAccumulator::Semantic(_) => ds.samples.len(),
                    MetricAccumulator::Mean { count, .. } => *count,
                },
            });
        }
    }
    for (task, calls) in traces {
        out.trace.accumulate(task, &calls);
    }
    Ok(out)
}
