//! Single-step, task-token-conditioned latent regression UNet.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::nn::{Binder, Graph, ParamStore, Tensor, Var};
use crate::task::TaskId;

/// Transformer-bearing blocks in execution order and the resolution level each runs at.
pub const BLOCKS: [(&str, usize); 5] = [("enc0", 0), ("enc1", 1), ("mid", 2), ("dec1", 1), ("dec0", 0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub width: usize,
    /// Heads of the spatial and token cross-attention layers.
    pub heads: usize,
    pub token_dim: usize,
    pub norm_groups: usize,
    pub res_kernel: usize,
    pub ff_mult: usize,
}

impl UNetConfig {
    pub fn toy(latent_channels: usize, latent_height: usize, latent_width: usize) -> Self {
        Self {
            latent_channels,
            latent_height,
            latent_width,
            width: 32,
            heads: 4,
            token_dim: 8,
            norm_groups: 4,
            res_kernel: 3,
            ff_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_height % 4 != 0 || self.latent_width % 4 != 0 || self.latent_height == 0 || self.latent_width == 0 {
            return bad("latent sides must be positive multiples of 4 (two pooling levels)");
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.norm_groups == 0 || self.width % self.norm_groups != 0 {
            return bad("width must be a multiple of norm_groups");
        }
        if self.res_kernel % 2 == 0 {
            return bad("res_kernel must be odd");
        }
        if self.token_dim < TaskId::ALL.len() + 1 {
            return bad("token_dim must fit one orthonormal row per task plus the start token");
        }
        Ok(())
    }

    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        (self.latent_height >> level, self.latent_width >> level)
    }
}

/// Frozen orthonormal task embeddings plus a shared start-of-sequence row.
///
/// The conditioning context for task `t` is the 2-row sequence `[start, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTokenTable {
    pub dim: usize,
    /// Row `i < 7` embeds `TaskId::ALL[i]`; the last row is the start token.
    pub rows: Vec<Vec<f64>>,
    pub frozen: bool,
}

impl TaskTokenTable {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let n = TaskId::ALL.len() + 1;
        if dim < n {
            return Err(Error::Config(format!("token_dim {dim} < {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70CE);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        while rows.len() < n {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len > 1e-6 {
                rows.push(v.into_iter().map(|x| x / len).collect());
            }
        }
        Ok(Self { dim, rows, frozen: true })
    }

    /// Every task shares one embedding; used to show conditioning is the only task path.
    pub fn degenerate(dim: usize, seed: u64) -> Result<Self> {
        let mut t = Self::new(dim, seed)?;
        let shared = t.rows[0].clone();
        for r in t.rows.iter_mut().take(TaskId::ALL.len()) {
            *r = shared.clone();
        }
        Ok(t)
    }

    pub fn embedding(&self, task: TaskId) -> &[f64] {
        &self.rows[task.index()]
    }

    pub fn context(&self, task: TaskId) -> Tensor {
        let mut data = self.rows[TaskId::ALL.len()].clone();
        data.extend_from_slice(self.embedding(task));
        Tensor::new(vec![2, self.dim], data).unwrap()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows.len(), self.dim], self.rows.concat()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[0] != TaskId::ALL.len() + 1 {
            return Err(Error::Shape(format!("token table tensor {:?}", s)));
        }
        let rows = t.data().chunks(s[1]).map(<[f64]>::to_vec).collect();
        Ok(Self { dim: s[1], rows, frozen: true })
    }
}

/// Called inside every transformer block right after spatial self-attention,
/// with the block's token sequence `[N, C]`. May return replacement tokens.
pub trait BlockHook {
    fn after_spatial(&mut self, g: &mut Graph, block: usize, tokens: Var) -> Result<Option<Var>>;
}

pub struct NoHook;

impl BlockHook for NoHook {
    fn after_spatial(&mut self, _: &mut Graph, _: usize, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Captures the post-spatial-attention features of every block.
#[derive(Default)]
pub struct RecordFeatures {
    pub feats: Vec<Tensor>,
}

impl BlockHook for RecordFeatures {
    fn after_spatial(&mut self, g: &mut Graph, _: usize, tokens: Var) -> Result<Option<Var>> {
        self.feats.push(g.value(tokens).clone());
        Ok(None)
    }
}

fn init_linear(p: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    p.init_normal(&format!("{name}.w"), &[cin, cout], (1.0 / cin as f64).sqrt(), rng);
    p.init_const(&format!("{name}.b"), &[cout], 0.0);
}

fn init_conv(p: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    p.init_normal(&format!("{name}.w"), &[cout, cin, k, k], (1.0 / (cin * k * k) as f64).sqrt(), rng);
    p.init_const(&format!("{name}.b"), &[cout], 0.0);
}

fn init_norm(p: &mut ParamStore, name: &str, c: usize) {
    p.init_const(&format!("{name}.g"), &[c], 1.0);
    p.init_const(&format!("{name}.b"), &[c], 0.0);
}

/// Fresh UNet weights. The input convolution takes exactly `2 * latent_channels`.
pub fn init_denoiser(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let (w, cl) = (cfg.width, cfg.latent_channels);
    init_conv(&mut p, "in", w, 2 * cl, 3, &mut rng);
    for (blk, level) in BLOCKS {
        if blk.starts_with("dec") {
            init_conv(&mut p, &format!("{blk}.skip"), w, 2 * w, 1, &mut rng);
        }
        init_norm(&mut p, &format!("{blk}.res.n1"), w);
        init_conv(&mut p, &format!("{blk}.res.c1"), w, w, cfg.res_kernel, &mut rng);
        init_norm(&mut p, &format!("{blk}.res.n2"), w);
        init_conv(&mut p, &format!("{blk}.res.c2"), w, w, cfg.res_kernel, &mut rng);
        let (h, wd) = cfg.level_hw(level);
        p.init_normal(&format!("{blk}.tx.pos"), &[h * wd, w], 0.02, &mut rng);
        for ln in ["ln1", "ln2", "ln3"] {
            init_norm(&mut p, &format!("{blk}.tx.{ln}"), w);
        }
        for proj in ["q", "k", "v", "o"] {
            init_linear(&mut p, &format!("{blk}.tx.sa.{proj}"), w, w, &mut rng);
        }
        init_linear(&mut p, &format!("{blk}.tx.xa.q"), w, w, &mut rng);
        init_linear(&mut p, &format!("{blk}.tx.xa.k"), cfg.token_dim, w, &mut rng);
        init_linear(&mut p, &format!("{blk}.tx.xa.v"), cfg.token_dim, w, &mut rng);
        init_linear(&mut p, &format!("{blk}.tx.xa.o"), w, w, &mut rng);
        init_linear(&mut p, &format!("{blk}.tx.ff1"), w, cfg.ff_mult * w, &mut rng);
        init_linear(&mut p, &format!("{blk}.tx.ff2"), cfg.ff_mult * w, w, &mut rng);
    }
    init_norm(&mut p, "out.n", w);
    init_conv(&mut p, "out.c", cl, w, 3, &mut rng);
    Ok(p)
}

pub(crate) fn linear(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Var {
    let w = b.get(g, &format!("{name}.w"));
    let bias = b.get(g, &format!("{name}.b"));
    g.linear(x, w, bias)
}

pub(crate) fn layer_norm(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Var {
    let n = g.norm_rows(x, 1e-5);
    let gamma = b.get(g, &format!("{name}.g"));
    let beta = b.get(g, &format!("{name}.b"));
    g.row_affine(n, gamma, beta)
}

fn conv(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Var {
    let w = b.get(g, &format!("{name}.w"));
    let bias = b.get(g, &format!("{name}.b"));
    let k = g.shape(w)[2];
    g.conv2d(x, w, bias, k / 2)
}

fn group_norm(g: &mut Graph, b: &mut Binder, name: &str, x: Var, groups: usize) -> Var {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[groups, s[0] / groups * s[1] * s[2]]);
    let n = g.norm_rows(r, 1e-5);
    let n = g.reshape(n, &s);
    let gamma = b.get(g, &format!("{name}.g"));
    let beta = b.get(g, &format!("{name}.b"));
    g.channel_affine(n, gamma, beta)
}

fn res_block(g: &mut Graph, b: &mut Binder, cfg: &UNetConfig, blk: &str, x: Var) -> Var {
    let h = group_norm(g, b, &format!("{blk}.res.n1"), x, cfg.norm_groups);
    let h = g.silu(h);
    let h = conv(g, b, &format!("{blk}.res.c1"), h);
    let h = group_norm(g, b, &format!("{blk}.res.n2"), h, cfg.norm_groups);
    let h = g.silu(h);
    let h = conv(g, b, &format!("{blk}.res.c2"), h);
    g.add(x, h)
}

#[allow(clippy::too_many_arguments)]
fn transformer_block(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &UNetConfig,
    blk: &str,
    index: usize,
    x: Var,
    ctx: Var,
    hook: &mut dyn BlockHook,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let mut t = g.to_tokens(x);

    let a = layer_norm(g, b, &format!("{blk}.tx.ln1"), t);
    let pos = b.get(g, &format!("{blk}.tx.pos"));
    let ap = g.add(a, pos);
    let q = linear(g, b, &format!("{blk}.tx.sa.q"), ap);
    let k = linear(g, b, &format!("{blk}.tx.sa.k"), ap);
    let v = linear(g, b, &format!("{blk}.tx.sa.v"), a);
    let att = g.attention(q, k, v, cfg.heads);
    let o = linear(g, b, &format!("{blk}.tx.sa.o"), att);
    t = g.add(t, o);

    if let Some(replaced) = hook.after_spatial(g, index, t)? {
        t = replaced;
    }

    let c = layer_norm(g, b, &format!("{blk}.tx.ln2"), t);
    let q = linear(g, b, &format!("{blk}.tx.xa.q"), c);
    let k = linear(g, b, &format!("{blk}.tx.xa.k"), ctx);
    let v = linear(g, b, &format!("{blk}.tx.xa.v"), ctx);
    let att = g.attention(q, k, v, cfg.heads);
    let o = linear(g, b, &format!("{blk}.tx.xa.o"), att);
    t = g.add(t, o);

    let f = layer_norm(g, b, &format!("{blk}.tx.ln3"), t);
    let f = linear(g, b, &format!("{blk}.tx.ff1"), f);
    let f = g.silu(f);
    let f = linear(g, b, &format!("{blk}.tx.ff2"), f);
    t = g.add(t, f);

    Ok(g.from_tokens(t, s[1], s[2]))
}

/// Builds the UNet graph on `stacked` (`[2*C_lat, h, w]`) conditioned on `ctx` (`[2, d_tok]`).
pub fn forward_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &UNetConfig,
    stacked: Var,
    ctx: Var,
    hook: &mut dyn BlockHook,
) -> Result<Var> {
    let s = g.shape(stacked).to_vec();
    if s != [2 * cfg.latent_channels, cfg.latent_height, cfg.latent_width] {
        return Err(Error::Shape(format!(
            "stacked latent {:?}, expected [{}, {}, {}]",
            s,
            2 * cfg.latent_channels,
            cfg.latent_height,
            cfg.latent_width
        )));
    }
    if g.shape(ctx) != [2, cfg.token_dim] {
        return Err(Error::Shape(format!("token context {:?}, expected [2, {}]", g.shape(ctx), cfg.token_dim)));
    }
    let mut h = conv(g, b, "in", stacked);
    let mut skips = Vec::new();
    for (i, (blk, _)) in BLOCKS.iter().enumerate() {
        if blk.starts_with("dec") {
            h = g.upsample2(h);
            let skip = skips.pop().expect("matching encoder skip");
            let cat = g.concat(&[h, skip]);
            h = conv(g, b, &format!("{blk}.skip"), cat);
        }
        h = res_block(g, b, cfg, blk, h);
        h = transformer_block(g, b, cfg, blk, i, h, ctx, hook)?;
        if blk.starts_with("enc") {
            skips.push(h);
            h = g.avg_pool2(h);
        }
    }
    let h = group_norm(g, b, "out.n", h, cfg.norm_groups);
    let h = g.silu(h);
    Ok(conv(g, b, "out.c", h))
}

/// Channel-wise concatenation of two frame latents; a missing second frame
/// repeats the first.
pub fn concat_latents(zi: &LatentGrid, zj: Option<&LatentGrid>) -> Result<Tensor> {
    let zj = zj.unwrap_or(zi);
    if zi.tensor.shape() != zj.tensor.shape() {
        return Err(Error::Shape(format!("latent shapes differ: {:?} vs {:?}", zi.tensor.shape(), zj.tensor.shape())));
    }
    let s = zi.tensor.shape();
    let mut data = zi.tensor.data().to_vec();
    data.extend_from_slice(zj.tensor.data());
    Tensor::new(vec![2 * s[0], s[1], s[2]], data)
}

/// Deterministic inference-mode forward.
pub fn forward(params: &ParamStore, cfg: &UNetConfig, stacked: &Tensor, token: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let x = g.constant(stacked.clone());
    let c = g.constant(token.clone());
    let y = forward_graph(&mut g, &mut b, cfg, x, c, &mut NoHook)?;
    Ok(g.value(y).clone())
}

pub fn latent_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}
