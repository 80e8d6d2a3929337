//! Task-isolated training of the single-stream and multi-stream models.
//!
//! Every optimizer step draws one task, accumulates gradients from
//! micro-batches labeled for that task only, and applies one Adam update.

mod checkpoint;
mod eval;
mod model;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MaskConfig;
use crate::error::{Error, IoContext, Result};
use crate::nn::{Adam, AdamConfig, Grads};
use crate::synth::sample_seed;
use crate::task::TaskId;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointKind, CheckpointManifest};
pub use eval::{evaluate, EvalOutput, EVAL_PROTOCOL};
pub use model::{
    auxiliary_features, forward_pass, infer, infilled_target, predict_latent, prepare_dataset, prepare_sample, sample_grads,
    AuxFeatures, FrameLatents, Model, ModelConfig, PreparedDataset, PreparedSample, PreparedTarget, Weights,
};

/// Which tasks are drawn and from which datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPolicy {
    pub task_weights: BTreeMap<TaskId, f64>,
    /// Per task, relative weight of each dataset id; datasets not listed get
    /// weight 0 unless the task has no entry at all (then uniform).
    #[serde(default)]
    pub dataset_weights: BTreeMap<TaskId, BTreeMap<String, f64>>,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        use TaskId::*;
        let w = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>();
        let mut dataset_weights = BTreeMap::new();
        dataset_weights.insert(Semantic, w(&[("toy-urban", 1.0)]));
        dataset_weights.insert(Normal, w(&[("toy-indoor", 0.9), ("toy-urban", 0.1)]));
        dataset_weights.insert(Depth, w(&[("toy-indoor", 0.9), ("toy-urban", 0.1)]));
        dataset_weights.insert(OpticalFlow, w(&[("toy-urban", 0.5), ("toy-objects", 0.5)]));
        dataset_weights.insert(SceneFlow, w(&[("toy-urban", 0.5), ("toy-objects", 0.5)]));
        dataset_weights.insert(Shading, w(&[("toy-indoor", 1.0)]));
        dataset_weights.insert(Albedo, w(&[("toy-indoor", 1.0)]));
        Self { task_weights: TaskId::ALL.iter().map(|&t| (t, 1.0)).collect(), dataset_weights }
    }
}

impl SamplingPolicy {
    /// Same dataset weights, but only `task` is ever drawn.
    pub fn single_task(&self, task: TaskId) -> Self {
        Self { task_weights: [(task, 1.0)].into_iter().collect(), dataset_weights: self.dataset_weights.clone() }
    }
}

/// Draws (task, dataset, sample) triples according to a [`SamplingPolicy`].
#[derive(Clone, Debug)]
pub struct Sampler {
    tasks: Vec<(TaskId, f64)>,
    datasets: BTreeMap<TaskId, Vec<(usize, f64)>>,
    sizes: Vec<usize>,
}

fn weighted<T: Copy>(items: &[(T, f64)], rng: &mut impl Rng) -> T {
    let total: f64 = items.iter().map(|i| i.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(x, w) in items {
        if u < w {
            return x;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

impl Sampler {
    pub fn new(policy: &SamplingPolicy, data: &[PreparedDataset]) -> Result<Self> {
        let tasks: Vec<(TaskId, f64)> = policy.task_weights.iter().filter(|(_, &w)| w > 0.0).map(|(&t, &w)| (t, w)).collect();
        if tasks.is_empty() {
            return Err(Error::Config("sampling policy draws no task".into()));
        }
        let mut datasets = BTreeMap::new();
        for &(task, _) in &tasks {
            let explicit = policy.dataset_weights.get(&task);
            let cands: Vec<(usize, f64)> = data
                .iter()
                .enumerate()
                .filter(|(_, d)| d.covers(task) && !d.samples.is_empty())
                .map(|(i, d)| (i, explicit.map_or(1.0, |m| m.get(&d.id).copied().unwrap_or(0.0))))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            if cands.is_empty() {
                return Err(Error::NoLabels(task.to_string()));
            }
            datasets.insert(task, cands);
        }
        Ok(Self { tasks, datasets, sizes: data.iter().map(|d| d.samples.len()).collect() })
    }

    pub fn task(&self, rng: &mut impl Rng) -> TaskId {
        weighted(&self.tasks, rng)
    }

    pub fn item(&self, task: TaskId, rng: &mut impl Rng) -> (usize, usize) {
        let d = weighted(&self.datasets[&task], rng);
        (d, rng.random_range(0..self.sizes[d]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Samples per optimizer step, split evenly over `grad_accum` micro-batches.
    pub effective_batch: usize,
    pub grad_accum: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub single_task_steps: usize,
    pub seed: u64,
    pub mask: MaskConfig,
    pub sampling: SamplingPolicy,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            effective_batch: 32,
            grad_accum: 2,
            stage1_steps: 3000,
            stage2_steps: 1500,
            single_task_steps: 3000,
            seed: 0,
            mask: MaskConfig::default(),
            sampling: SamplingPolicy::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            learning_rate: 2e-3,
            effective_batch: 4,
            grad_accum: 2,
            stage1_steps: 1000,
            stage2_steps: 300,
            single_task_steps: 200,
            checkpoint_every: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grad_accum == 0 || self.effective_batch == 0 || self.effective_batch % self.grad_accum != 0 {
            return Err(Error::Config(format!(
                "effective_batch {} must be a positive multiple of grad_accum {}",
                self.effective_batch, self.grad_accum
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.mask.validate()
    }

    pub fn micro_batch(&self) -> usize {
        self.effective_batch / self.grad_accum
    }
}

/// What happened in one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: TaskId,
    /// `(dataset index, sample index)` per micro-batch.
    pub batches: Vec<Vec<(usize, usize)>>,
    pub loss: f64,
}

fn add_grads(acc: &mut Grads, g: Grads, scale: f64) {
    for (k, mut t) in g {
        t.scale_assign(scale);
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&t),
            None => {
                acc.insert(k, t);
            }
        }
    }
}

/// Optimizer state plus everything needed to take the next step.
#[derive(Clone, Debug)]
pub struct Trainer<'d> {
    pub model: Model,
    pub weights: Weights,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub data: &'d [PreparedDataset],
    sampler: Sampler,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, weights: Weights, cfg: TrainConfig, data: &'d [PreparedDataset]) -> Result<Self> {
        cfg.validate()?;
        let sampler = Sampler::new(&cfg.sampling, data)?;
        let adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A1A);
        Ok(Self { model, weights, adam, cfg, data, sampler, rng, step: 0 })
    }

    fn mask_rng(&self, step: usize, micro: usize, k: usize) -> ChaCha8Rng {
        let s = sample_seed(self.cfg.seed, ((step as u64) << 24) ^ ((micro as u64) << 12) ^ k as u64);
        ChaCha8Rng::seed_from_u64(s)
    }

    /// Mean loss and mean gradient over the given micro-batches of one task,
    /// evaluated at the current weights.
    pub fn batch_grads(&self, task: TaskId, batches: &[Vec<(usize, usize)>], step: usize) -> Result<(f64, Grads)> {
        let jobs: Vec<(usize, usize, (usize, usize))> = batches
            .iter()
            .enumerate()
            .flat_map(|(m, b)| b.iter().enumerate().map(move |(k, &item)| (m, k, item)))
            .collect();
        let run = |&(m, k, (d, i)): &(usize, usize, (usize, usize))| -> Result<(f64, Grads)> {
            let mut rng = self.mask_rng(step, m, k);
            sample_grads(&self.model, &self.weights, &self.data[d].samples[i], task, &self.cfg.mask, &mut rng)
        };
        #[cfg(feature = "parallel")]
        let results: Vec<Result<(f64, Grads)>> = {
            use rayon::prelude::*;
            jobs.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<(f64, Grads)>> = jobs.iter().map(run).collect();

        let n = jobs.len() as f64;
        let mut loss = 0.0;
        let mut grads = Grads::new();
        for r in results {
            let (l, g) = r?;
            loss += l / n;
            add_grads(&mut grads, g, 1.0 / n);
        }
        Ok((loss, grads))
    }

    /// One task-isolated optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let task = self.sampler.task(&mut self.rng);
        let batches: Vec<Vec<(usize, usize)>> = (0..self.cfg.grad_accum)
            .map(|_| (0..self.cfg.micro_batch()).map(|_| self.sampler.item(task, &mut self.rng)).collect())
            .collect();
        let (loss, grads) = self.batch_grads(task, &batches, self.step)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, task: task.to_string(), loss });
        }
        self.adam.update(self.weights.trainable_mut(), &grads);
        let rec = StepRecord { step: self.step, task, batches, loss };
        self.step += 1;
        Ok(rec)
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_decile_loss: f64,
    pub last_decile_loss: f64,
    pub final_loss: f64,
    pub checkpoints: Vec<String>,
    pub best: Option<String>,
}

fn decile_means(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1).min(losses.len());
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    task: TaskId,
    loss: f64,
    learning_rate: f64,
    samples: &'a [Vec<(usize, usize)>],
}

/// Runs `steps` optimizer steps, writing `log.jsonl`, `loss_curve.csv`,
/// periodic checkpoints `ckpt_NNNNNN/`, `final/` and a `best` link to the
/// checkpoint with the lowest mean loss since the previous one.
pub fn run_training(trainer: &mut Trainer, steps: usize, kind: CheckpointKind, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out).at(out)?;
    let log_path = out.join("log.jsonl");
    let mut log = fs::File::create(&log_path).at(&log_path)?;
    let mut losses = Vec::with_capacity(steps);
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, String)> = None;
    let mut window_start = 0;
    for _ in 0..steps {
        let rec = trainer.step()?;
        losses.push(rec.loss);
        let line = LogLine {
            step: rec.step,
            task: rec.task,
            loss: rec.loss,
            learning_rate: trainer.cfg.learning_rate,
            samples: &rec.batches,
        };
        writeln!(log, "{}", serde_json::to_string(&line)?).at(&log_path)?;
        let done = trainer.step;
        if trainer.cfg.checkpoint_every > 0 && done % trainer.cfg.checkpoint_every == 0 && done < steps {
            let name = format!("ckpt_{done:06}");
            save_checkpoint(&out.join(&name), trainer, kind)?;
            let window = &losses[window_start..];
            let m = window.iter().sum::<f64>() / window.len() as f64;
            if best.as_ref().is_none_or(|(b, _)| m < *b) {
                best = Some((m, name.clone()));
            }
            window_start = losses.len();
            checkpoints.push(name);
        }
    }
    save_checkpoint(&out.join("final"), trainer, kind)?;
    if window_start < losses.len() {
        let window = &losses[window_start..];
        let m = window.iter().sum::<f64>() / window.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| m < *b) {
            best = Some((m, "final".into()));
        }
    }
    checkpoints.push("final".into());
    if let Some((_, name)) = &best {
        link_best(out, name)?;
    }

    let curve_path = out.join("loss_curve.csv");
    let mut curve = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l:.9}\n"));
    }
    fs::write(&curve_path, curve).at(&curve_path)?;

    let (first, last) = decile_means(&losses);
    Ok(TrainSummary {
        steps: losses.len(),
        first_decile_loss: first,
        last_decile_loss: last,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        checkpoints,
        best: best.map(|b| b.1),
    })
}

fn link_best(out: &Path, target: &str) -> Result<()> {
    let link: PathBuf = out.join("best");
    if link.symlink_metadata().is_ok() {
        if link.is_dir() && !link.symlink_metadata().at(&link)?.file_type().is_symlink() {
            fs::remove_dir_all(&link).at(&link)?;
        } else {
            fs::remove_file(&link).at(&link)?;
        }
    }
    #[cfg(unix)]
    {
        std::os::unix::fs::symlink(target, &link).at(&link)?;
    }
    #[cfg(not(unix))]
    {
        fs::write(&link, target).at(&link)?;
    }
    Ok(())
}
