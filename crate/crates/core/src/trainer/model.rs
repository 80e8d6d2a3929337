//! Model bundle (codec, token table, palette, UNet config) and the single- and
//! multi-stream forward passes shared by training, evaluation and inference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_task_attention, task_attention_graph, MaskConfig, TaskAttentionConfig};
use crate::denoiser::{concat_latents, forward_graph, init_denoiser, BlockHook, NoHook, RecordFeatures, TaskTokenTable, UNetConfig, BLOCKS};
use crate::error::{Error, Result};
use crate::latent::{CodecConfig, LatentCodec, LatentGrid};
use crate::nn::{Binder, Grads, Graph, ParamStore, Tensor, Var};
use crate::raster::{Annotation, Raster};
use crate::synth::{Dataset, SceneSample};
use crate::task::TaskId;
use crate::task_codec::{encode_task, postprocess_task, SemanticPalette};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub codec: CodecConfig,
    /// Reconstruction steps for the autoencoder codec (ignored by the shuffle codec).
    #[serde(default)]
    pub codec_prefit_steps: usize,
    pub width: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub norm_groups: usize,
    pub res_kernel: usize,
    pub ff_mult: usize,
    pub task_attention: TaskAttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 64,
            codec: CodecConfig::shuffle(2),
            codec_prefit_steps: 0,
            width: 32,
            heads: 4,
            token_dim: 8,
            norm_groups: 4,
            res_kernel: 3,
            ff_mult: 2,
            task_attention: TaskAttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small enough for a CPU smoke run in a few minutes.
    pub fn toy() -> Self {
        Self {
            image_height: 16,
            image_width: 32,
            width: 16,
            heads: 2,
            norm_groups: 4,
            task_attention: TaskAttentionConfig { heads: 2, separate_projections: true },
            ..Self::default()
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: self.codec.channels,
            latent_height: self.image_height / self.codec.factor.max(1),
            latent_width: self.image_width / self.codec.factor.max(1),
            width: self.width,
            heads: self.heads,
            token_dim: self.token_dim,
            norm_groups: self.norm_groups,
            res_kernel: self.res_kernel,
            ff_mult: self.ff_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let f = self.codec.factor;
        if self.image_height % f != 0 || self.image_width % f != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by codec factor {f}",
                self.image_height, self.image_width
            )));
        }
        self.unet().validate()?;
        if self.task_attention.heads == 0 || self.width % self.task_attention.heads != 0 {
            return Err(Error::Config("width must be a multiple of the task-attention heads".into()));
        }
        Ok(())
    }
}

/// Everything besides the trained UNet weights needed to run a model.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub codec: LatentCodec,
    pub tokens: TaskTokenTable,
    pub palette: SemanticPalette,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let codec = LatentCodec::new(cfg.codec)?;
        let tokens = TaskTokenTable::new(cfg.token_dim, seed)?;
        Ok(Self { cfg, codec, tokens, palette: SemanticPalette::default() })
    }

    /// Fits the autoencoder codec on the frames of `datasets`, if that codec is used.
    pub fn prefit_codec(&mut self, datasets: &[Dataset], seed: u64) -> Result<f64> {
        let corpus: Vec<Raster> = datasets.iter().flat_map(|d| d.samples.iter().map(|s| s.frame_i.clone())).collect();
        self.codec.prefit(&corpus, self.cfg.codec_prefit_steps, seed)
    }
}

/// Trained weights: a single task-conditioned stream, or a trainable main
/// stream (UNet plus `<block>.ta.*` layers) over a frozen auxiliary stream.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Single(ParamStore),
    Multi { main: ParamStore, aux: ParamStore },
}

impl Weights {
    pub fn trainable(&self) -> &ParamStore {
        match self {
            Weights::Single(p) => p,
            Weights::Multi { main, .. } => main,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut ParamStore {
        match self {
            Weights::Single(p) => p,
            Weights::Multi { main, .. } => main,
        }
    }

    pub fn fresh(model: &Model, seed: u64) -> Result<Self> {
        Ok(Weights::Single(init_denoiser(&model.cfg.unet(), seed)?))
    }

    /// Multi-stream weights initialized from a single-stream model: the main
    /// stream copies it, the auxiliary stream freezes it, and every task
    /// attention layer starts with a zero output projection.
    pub fn multi_from_single(model: &Model, single: &ParamStore, seed: u64) -> Self {
        let mut main = single.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A5C);
        for (blk, _) in BLOCKS {
            init_task_attention(&mut main, &format!("{blk}.ta"), model.cfg.width, &model.cfg.task_attention, &mut rng);
        }
        Weights::Multi { main, aux: single.clone() }
    }
}

/// Encoded frames of one input.
#[derive(Clone, Debug)]
pub struct FrameLatents {
    pub zi: LatentGrid,
    pub zj: Option<LatentGrid>,
}

impl FrameLatents {
    pub fn encode(model: &Model, frame_a: &Raster, frame_b: Option<&Raster>) -> Result<Self> {
        Ok(Self {
            zi: model.codec.encode_image(frame_a)?,
            zj: frame_b.map(|f| model.codec.encode_image(f)).transpose()?,
        })
    }

    /// Network input for `task`: two frames for flow tasks, the first frame repeated otherwise.
    pub fn stacked(&self, task: TaskId) -> Result<Tensor> {
        let second = if task.frames_required() == 2 { self.zj.as_ref() } else { None };
        concat_latents(&self.zi, second)
    }
}

/// Regression target of one (sample, task) pair.
#[derive(Clone, Debug)]
pub struct PreparedTarget {
    pub image: Raster,
    pub valid: Vec<bool>,
    pub latent: LatentGrid,
}

impl PreparedTarget {
    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub frames: FrameLatents,
    pub targets: BTreeMap<TaskId, PreparedTarget>,
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub id: String,
    pub samples: Vec<PreparedSample>,
}

impl PreparedDataset {
    pub fn covers(&self, task: TaskId) -> bool {
        self.samples.first().is_some_and(|s| s.targets.contains_key(&task))
    }
}

pub fn prepare_sample(model: &Model, s: &SceneSample) -> Result<PreparedSample> {
    let frames = FrameLatents::encode(model, &s.frame_i, Some(&s.frame_j))?;
    let mut targets = BTreeMap::new();
    for (&task, ann) in &s.labels {
        let valid = s.valid(task).map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; s.height() * s.width()]);
        let enc = encode_task(task, ann, &model.palette, Some(&valid))?;
        let valid: Vec<bool> = valid.iter().zip(&enc.valid).map(|(a, b)| *a && *b).collect();
        let latent = model.codec.encode_image(&enc.map)?;
        targets.insert(task, PreparedTarget { image: enc.map, valid, latent });
    }
    Ok(PreparedSample { frames, targets })
}

pub fn prepare_dataset(model: &Model, d: &Dataset) -> Result<PreparedDataset> {
    let one = |s: &SceneSample| prepare_sample(model, s);
    #[cfg(feature = "parallel")]
    let samples = {
        use rayon::prelude::*;
        d.samples.par_iter().map(one).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let samples = d.samples.iter().map(one).collect::<Result<Vec<_>>>()?;
    Ok(PreparedDataset { id: d.id.clone(), samples })
}

/// Per-block auxiliary features: `feats[block]` lists `(aux task, [N, C] tokens)`.
pub type AuxFeatures = Vec<Vec<(TaskId, Tensor)>>;

/// Runs the frozen auxiliary stream once per auxiliary task and records the
/// post-spatial-attention tokens of every block.
pub fn auxiliary_features(model: &Model, aux: &ParamStore, frames: &FrameLatents, main_task: TaskId) -> Result<AuxFeatures> {
    let cfg = model.cfg.unet();
    let mut per_block: AuxFeatures = vec![Vec::new(); BLOCKS.len()];
    for t in main_task.auxiliaries() {
        let mut g = Graph::new();
        let mut b = Binder::new(aux, false);
        let x = g.constant(frames.stacked(t)?);
        let c = g.constant(model.tokens.context(t));
        let mut rec = RecordFeatures::default();
        forward_graph(&mut g, &mut b, &cfg, x, c, &mut rec)?;
        for (blk, f) in rec.feats.into_iter().enumerate() {
            per_block[blk].push((t, f));
        }
    }
    Ok(per_block)
}

struct TaskAttentionHook<'a, 'r, R: Rng> {
    binder: Binder<'a>,
    cfg: TaskAttentionConfig,
    main_task: TaskId,
    aux: AuxFeatures,
    mask: MaskConfig,
    rng: &'r mut R,
    record: bool,
    traces: Vec<Vec<f64>>,
}

impl<R: Rng> BlockHook for TaskAttentionHook<'_, '_, R> {
    fn after_spatial(&mut self, g: &mut Graph, block: usize, tokens: Var) -> Result<Option<Var>> {
        let prefix = format!("{}.ta", BLOCKS[block].0);
        let pass = task_attention_graph(
            g,
            &mut self.binder,
            &prefix,
            &self.cfg,
            tokens,
            self.main_task,
            &self.aux[block],
            &self.mask,
            &mut *self.rng,
            self.record,
        )?;
        if let Some(t) = pass.trace {
            self.traces.push(t);
        }
        Ok(Some(pass.enriched))
    }
}

/// Builds the forward graph of `weights` for `task` and hands the prediction
/// to `on_ready` (which may add a loss and run `backward`) before gradients of
/// the bound parameters are collected.
#[allow(clippy::too_many_arguments)]
pub fn forward_pass<R: Rng>(
    g: &mut Graph,
    model: &Model,
    weights: &Weights,
    frames: &FrameLatents,
    task: TaskId,
    mask: &MaskConfig,
    rng: &mut R,
    record: bool,
    trainable: bool,
    on_ready: impl FnOnce(&mut Graph, Var) -> Result<()>,
) -> Result<(Grads, Vec<Vec<f64>>)> {
    let cfg = model.cfg.unet();
    let x = g.constant(frames.stacked(task)?);
    let c = g.constant(model.tokens.context(task));
    match weights {
        Weights::Single(p) => {
            let mut b = Binder::new(p, trainable);
            let y = forward_graph(g, &mut b, &cfg, x, c, &mut NoHook)?;
            on_ready(g, y)?;
            Ok((b.grads(g), Vec::new()))
        }
        Weights::Multi { main, aux } => {
            let feats = auxiliary_features(model, aux, frames, task)?;
            let mut hook = TaskAttentionHook {
                binder: Binder::new(main, trainable),
                cfg: model.cfg.task_attention,
                main_task: task,
                aux: feats,
                mask: *mask,
                rng,
                record,
                traces: Vec::new(),
            };
            let mut b = Binder::new(main, trainable);
            let y = forward_graph(g, &mut b, &cfg, x, c, &mut hook)?;
            on_ready(g, y)?;
            let mut grads = b.grads(g);
            grads.extend(hook.binder.grads(g));
            Ok((grads, hook.traces))
        }
    }
}

/// Predicted latent for `task`, no masking; also returns attention traces when `record`.
pub fn predict_latent(model: &Model, weights: &Weights, frames: &FrameLatents, task: TaskId, record: bool) -> Result<(LatentGrid, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = None;
    let (_, traces) = forward_pass(&mut g, model, weights, frames, task, &MaskConfig::disabled(), &mut rng, record, false, |g, y| {
        out = Some(g.value(y).clone());
        Ok(())
    })?;
    let tensor = out.expect("forward pass produced an output");
    Ok((LatentGrid { tensor, factor: model.codec.cfg.factor }, traces))
}

/// Encode, regress, decode and post-process one input into a native-format prediction.
pub fn infer(model: &Model, weights: &Weights, frame_a: &Raster, frame_b: Option<&Raster>, task: TaskId) -> Result<Annotation> {
    let frames = FrameLatents::encode(model, frame_a, frame_b)?;
    let (z, _) = predict_latent(model, weights, &frames, task, false)?;
    let decoded = model.codec.decode_latent(&z)?;
    postprocess_task(task, &decoded, &model.palette)
}

/// Latent regression target with invalid pixels replaced by the (detached)
/// decoded prediction, so they contribute no pixel-space error.
pub fn infilled_target(model: &Model, target: &PreparedTarget, prediction: &Tensor) -> Result<Tensor> {
    if target.all_valid() {
        return Ok(target.latent.tensor.clone());
    }
    let decoded = model.codec.decode_latent(&LatentGrid { tensor: prediction.clone(), factor: model.codec.cfg.factor })?;
    let mut img = target.image.clone();
    for (p, &v) in target.valid.iter().enumerate() {
        if !v {
            img.px_mut(p).copy_from_slice(decoded.px(p));
        }
    }
    Ok(model.codec.encode_image(&img)?.tensor)
}

/// Loss and parameter gradients of one (sample, task) pair.
pub fn sample_grads<R: Rng>(
    model: &Model,
    weights: &Weights,
    sample: &PreparedSample,
    task: TaskId,
    mask: &MaskConfig,
    rng: &mut R,
) -> Result<(f64, Grads)> {
    let target = sample
        .targets
        .get(&task)
        .ok_or_else(|| Error::NoLabels(format!("{task} (sample lacks this label)")))?;
    let mut g = Graph::new();
    let mut loss_value = 0.0;
    let (grads, _) = forward_pass(&mut g, model, weights, &sample.frames, task, mask, rng, false, true, |g, y| {
        let t = infilled_target(model, target, g.value(y))?;
        let t = g.constant(t);
        let loss = g.mse(y, t);
        loss_value = g.value(loss).data()[0];
        g.backward(loss);
        Ok(())
    })?;
    Ok((loss_value, grads))
}
