//! 1-to-N task attention between a main stream and frozen auxiliary streams,
//! with attention-guided task masking.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{layer_norm, linear};
use crate::error::{Error, Result};
use crate::nn::{task_attention_probs, Binder, Graph, ParamStore, Tensor, Var};
use crate::task::TaskId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Mask one task drawn from pi.
    SamplePi,
    /// Mask k distinct tasks, k uniform in `[1, |T*| - 1]`, drawn from pi without replacement.
    SampleKPi,
    /// Mask the highest-pi task.
    Argmax,
    /// Mask one task uniformly at random.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// One draw per spatial location, from that location's pi.
    PerLocation,
    /// One draw per layer call, from the spatially averaged pi.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub rho: f64,
    #[serde(default = "default_granularity")]
    pub granularity: MaskGranularity,
}

fn default_granularity() -> MaskGranularity {
    MaskGranularity::PerLocation
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { strategy: MaskStrategy::SamplePi, rho: 0.4, granularity: MaskGranularity::PerLocation }
    }
}

impl MaskConfig {
    pub fn disabled() -> Self {
        Self { rho: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Normalizes non-negative attention scores into a distribution; all-zero
/// scores give the uniform distribution.
pub fn compute_pi(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyAuxiliary);
    }
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Precondition(format!("attention scores must be finite and non-negative: {scores:?}")));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / scores.len() as f64; scores.len()]);
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Keep-mask over the auxiliary tasks (`true` = attended, `false` = masked).
pub fn sample_mask(pi: &[f64], cfg: &MaskConfig, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if pi.is_empty() {
        return Err(Error::EmptyAuxiliary);
    }
    let mut keep = vec![true; pi.len()];
    if cfg.rho <= 0.0 || rng.random::<f64>() >= cfg.rho {
        return Ok(keep);
    }
    match cfg.strategy {
        MaskStrategy::SamplePi => keep[draw(pi, rng)] = false,
        MaskStrategy::SampleKPi => {
            let k = if pi.len() > 1 { rng.random_range(1..pi.len()) } else { 1 };
            let mut w = pi.to_vec();
            for _ in 0..k {
                let live: Vec<f64> = w.iter().zip(&keep).map(|(&x, &kp)| if kp { x } else { 0.0 }).collect();
                let i = if live.iter().sum::<f64>() > 0.0 {
                    draw(&live, rng)
                } else {
                    let open: Vec<usize> = (0..pi.len()).filter(|&i| keep[i]).collect();
                    open[rng.random_range(0..open.len())]
                };
                keep[i] = false;
                w[i] = 0.0;
            }
        }
        MaskStrategy::Argmax => {
            let mut best = 0;
            for (i, &p) in pi.iter().enumerate() {
                if p > pi[best] {
                    best = i;
                }
            }
            keep[best] = false;
        }
        MaskStrategy::Uniform => keep[rng.random_range(0..pi.len())] = false,
    }
    Ok(keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskAttentionConfig {
    pub heads: usize,
    /// One `(q, k, v)` triple per task; otherwise a single shared triple.
    pub separate_projections: bool,
}

impl Default for TaskAttentionConfig {
    fn default() -> Self {
        Self { heads: 4, separate_projections: true }
    }
}

fn proj_key(cfg: &TaskAttentionConfig, task: TaskId) -> &'static str {
    if cfg.separate_projections {
        task.name()
    } else {
        "shared"
    }
}

/// Adds the parameters of one task-attention layer under `prefix`. The output
/// projection starts at zero, so the layer is an identity through its residual.
pub fn init_task_attention(p: &mut ParamStore, prefix: &str, width: usize, cfg: &TaskAttentionConfig, rng: &mut ChaCha8Rng) {
    p.init_const(&format!("{prefix}.ln.g"), &[width], 1.0);
    p.init_const(&format!("{prefix}.ln.b"), &[width], 0.0);
    let names: Vec<&str> = if cfg.separate_projections {
        TaskId::ALL.iter().map(|t| t.name()).collect()
    } else {
        vec!["shared"]
    };
    for name in names {
        for proj in ["q", "k", "v"] {
            p.init_normal(&format!("{prefix}.{proj}.{name}.w"), &[width, width], (1.0 / width as f64).sqrt(), rng);
            p.init_const(&format!("{prefix}.{proj}.{name}.b"), &[width], 0.0);
        }
    }
    p.init_const(&format!("{prefix}.o.w"), &[width, width], 0.0);
    p.init_const(&format!("{prefix}.o.b"), &[width], 0.0);
}

/// Everything one task-attention call produced.
pub struct TaskAttentionPass {
    pub enriched: Var,
    pub pre_projection: Var,
    /// Post-softmax weights actually used, `[N, heads, T]`.
    pub weights: Vec<f64>,
    /// Keep flags `[N, T]`.
    pub keep: Vec<bool>,
    /// Mean unmasked weight per auxiliary task, averaged over heads and locations.
    pub trace: Option<Vec<f64>>,
}

/// Graph-level task attention: `main` is `[N, C]`, each auxiliary feature map
/// is `[N, C]` and treated as a constant (the auxiliary stream is frozen).
#[allow(clippy::too_many_arguments)]
pub fn task_attention_graph(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    cfg: &TaskAttentionConfig,
    main: Var,
    main_task: TaskId,
    aux: &[(TaskId, Tensor)],
    mask: &MaskConfig,
    rng: &mut impl Rng,
    record: bool,
) -> Result<TaskAttentionPass> {
    if aux.is_empty() {
        return Err(Error::EmptyAuxiliary);
    }
    let ms = g.shape(main).to_vec();
    for (t, f) in aux {
        if f.shape() != ms.as_slice() {
            return Err(Error::Shape(format!("auxiliary {t} features {:?} vs main {:?}", f.shape(), ms)));
        }
    }
    let (n, c) = (ms[0], ms[1]);
    if c % cfg.heads != 0 {
        return Err(Error::Config(format!("width {c} not divisible by {} task-attention heads", cfg.heads)));
    }
    let t = aux.len();
    let mq = layer_norm(g, b, &format!("{prefix}.ln"), main);
    let q = linear(g, b, &format!("{prefix}.q.{}", proj_key(cfg, main_task)), mq);
    let mut ks = Vec::with_capacity(t);
    let mut vs = Vec::with_capacity(t);
    for (task, feats) in aux {
        let f = g.constant(feats.clone());
        let f = g.norm_rows(f, 1e-5);
        ks.push(linear(g, b, &format!("{prefix}.k.{}", proj_key(cfg, *task)), f));
        vs.push(linear(g, b, &format!("{prefix}.v.{}", proj_key(cfg, *task)), f));
    }

    let kvals: Vec<&Tensor> = ks.iter().map(|&k| g.value(k)).collect();
    let unmasked = task_attention_probs(g.value(q), &kvals, cfg.heads, None);
    let scores: Vec<f64> = (0..n * t)
        .map(|i| {
            let (loc, ti) = (i / t, i % t);
            (0..cfg.heads).map(|h| unmasked[(loc * cfg.heads + h) * t + ti]).sum::<f64>() / cfg.heads as f64
        })
        .collect();

    let keep = if mask.rho > 0.0 {
        match mask.granularity {
            MaskGranularity::PerLocation => {
                let mut keep = Vec::with_capacity(n * t);
                for loc in 0..n {
                    let pi = compute_pi(&scores[loc * t..(loc + 1) * t])?;
                    keep.extend(sample_mask(&pi, mask, rng)?);
                }
                keep
            }
            MaskGranularity::PerLayer => {
                let mean: Vec<f64> = (0..t).map(|ti| (0..n).map(|loc| scores[loc * t + ti]).sum::<f64>() / n as f64).collect();
                let k = sample_mask(&compute_pi(&mean)?, mask, rng)?;
                (0..n).flat_map(|_| k.iter().copied()).collect()
            }
        }
    } else {
        vec![true; n * t]
    };
    let masked: Vec<bool> = keep.iter().map(|k| !k).collect();
    let any_masked = masked.iter().any(|&m| m);

    let (att, weights) = g.task_attention(q, &ks, &vs, cfg.heads, if any_masked { Some(&masked) } else { None });
    let o = linear(g, b, &format!("{prefix}.o"), att);
    let enriched = g.add(main, o);

    let trace = record.then(|| (0..t).map(|ti| (0..n).map(|loc| scores[loc * t + ti]).sum::<f64>() / n as f64).collect());
    Ok(TaskAttentionPass { enriched, pre_projection: att, weights, keep, trace })
}

/// A standalone task-attention layer with its own parameters.
#[derive(Clone, Debug)]
pub struct TaskAttentionLayer {
    pub params: ParamStore,
    pub cfg: TaskAttentionConfig,
    pub width: usize,
}

/// Concrete results of [`TaskAttentionLayer::forward`].
#[derive(Clone, Debug)]
pub struct TaskAttentionOutput {
    pub enriched: Tensor,
    pub pre_projection: Tensor,
    pub weights: Vec<f64>,
    pub keep: Vec<bool>,
    pub trace: Option<Vec<f64>>,
}

impl TaskAttentionLayer {
    pub fn new(width: usize, cfg: TaskAttentionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_task_attention(&mut params, "ta", width, &cfg, &mut rng);
        Self { params, cfg, width }
    }

    pub fn forward(
        &self,
        main: &Tensor,
        main_task: TaskId,
        aux: &[(TaskId, Tensor)],
        mask: &MaskConfig,
        rng: &mut impl Rng,
        record: bool,
    ) -> Result<TaskAttentionOutput> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let m = g.constant(main.clone());
        let pass = task_attention_graph(&mut g, &mut b, "ta", &self.cfg, m, main_task, aux, mask, rng, record)?;
        Ok(TaskAttentionOutput {
            enriched: g.value(pass.enriched).clone(),
            pre_projection: g.value(pass.pre_projection).clone(),
            weights: pass.weights,
            keep: pass.keep,
            trace: pass.trace,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer_index: usize,
    pub main_task: TaskId,
    pub aux_task: TaskId,
    pub mean_score: f64,
}

/// Mean attention mass from each main task to each auxiliary task, per layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub rows: Vec<TraceRow>,
}

impl AttentionTrace {
    /// Averages a list of per-call traces (`[layer][aux]` per call) for one main task.
    pub fn accumulate(&mut self, main_task: TaskId, per_layer: &[Vec<Vec<f64>>]) {
        if per_layer.is_empty() {
            return;
        }
        let aux = main_task.auxiliaries();
        let layers = per_layer[0].len();
        for l in 0..layers {
            for (ti, &a) in aux.iter().enumerate() {
                let mean = per_layer.iter().map(|call| call[l][ti]).sum::<f64>() / per_layer.len() as f64;
                self.rows.push(TraceRow { layer_index: l, main_task, aux_task: a, mean_score: mean });
            }
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "layer_index,main_task,aux_task,mean_score")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:.9}", r.layer_index, r.main_task, r.aux_task, r.mean_score)?;
        }
        Ok(())
    }

    pub fn read_csv(s: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in s.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Precondition(format!("malformed trace row {}: `{line}`", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            rows.push(TraceRow {
                layer_index: f[0].parse().map_err(|_| bad())?,
                main_task: f[1].parse()?,
                aux_task: f[2].parse()?,
                mean_score: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }
}
