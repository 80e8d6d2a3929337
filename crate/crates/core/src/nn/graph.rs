//! Eager reverse-mode autodiff tape.
//!
//! Every op computes its value immediately and records enough information to
//! back-propagate. Feature maps are `[C, H, W]`, token sequences are `[N, C]`.
//! Leaves created with [`Graph::constant`] never receive gradients, and any node
//! whose parents are all constants is itself treated as a constant.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    NormRows { x: Var, rstd: Vec<f64> },
    RowAffine { x: Var, gamma: Var, beta: Var },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    ToTokens(Var),
    FromTokens(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    TaskAttention { q: Var, ks: Vec<Var>, vs: Vec<Var>, heads: usize, probs: Vec<f64> },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Attention weights over the task axis, laid out `[N, heads, T]`.
///
/// Masked entries (`mask[n * T + t] == true`) get exactly zero weight; the
/// rest are renormalized. A fully masked location yields all-zero weights.
pub fn task_attention_probs(
    q: &Tensor,
    ks: &[&Tensor],
    heads: usize,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let t = ks.len();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; n * heads * t];
    let mut logits = vec![0.0; t];
    for i in 0..n {
        let qrow = &q.data()[i * c..(i + 1) * c];
        for h in 0..heads {
            let mut max = f64::NEG_INFINITY;
            for (ti, k) in ks.iter().enumerate() {
                let masked = mask.map(|m| m[i * t + ti]).unwrap_or(false);
                if masked {
                    logits[ti] = f64::NEG_INFINITY;
                    continue;
                }
                let krow = &k.data()[i * c + h * dh..i * c + (h + 1) * dh];
                let dot: f64 = qrow[h * dh..(h + 1) * dh].iter().zip(krow).map(|(a, b)| a * b).sum();
                logits[ti] = dot * scale;
                max = max.max(logits[ti]);
            }
            let out = &mut probs[(i * heads + h) * t..(i * heads + h + 1) * t];
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for ti in 0..t {
                let e = if logits[ti] == f64::NEG_INFINITY { 0.0 } else { (logits[ti] - max).exp() };
                out[ti] = e;
                z += e;
            }
            for p in out.iter_mut() {
                *p /= z;
            }
        }
    }
    probs
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape size mismatch");
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Stride-1 2D convolution with zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d input channels");
        assert_eq!(self.shape(b), &[cout]);
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
            o.iter_mut().for_each(|v| *v = bv[co]);
            for ci in 0..cin {
                let xin = &xv[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                        conv_tap(o, xin, wt, oh, ow, h, wd, ky as isize - pad as isize, kx as isize - pad as isize);
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(vec![cout, oh, ow], out).unwrap(), Op::Conv2d { x, w, b, pad }, rg)
    }

    /// `x[N, Cin] @ w[Cin, Cout] + b[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, cin) = (self.shape(x)[0], self.shape(x)[1]);
        let cout = self.shape(w)[1];
        assert_eq!(self.shape(w)[0], cin, "linear input width");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            let orow = &mut out[i * cout..(i + 1) * cout];
            orow.copy_from_slice(bv);
            for kk in 0..cin {
                let a = xv[i * cin + kk];
                if a == 0.0 {
                    continue;
                }
                for (o, &wj) in orow.iter_mut().zip(&wv[kk * cout..(kk + 1) * cout]) {
                    *o += a * wj;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(vec![n, cout], out).unwrap(), Op::Linear { x, w, b }, rg)
    }

    /// Zero-mean, unit-variance normalization of each row of a `[R, M]` tensor.
    pub fn norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, m) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * m];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for (o, v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![r, m], out).unwrap(), Op::NormRows { x, rstd }, rg)
    }

    /// `x[N, C] * gamma[C] + beta[C]`.
    pub fn row_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let c = self.shape(x)[1];
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xv.data().iter().enumerate().map(|(i, v)| v * g[i % c] + b[i % c]).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(t, Op::RowAffine { x, gamma, beta }, rg)
    }

    /// `x[C, H, W] * gamma[C] + beta[C]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(x).to_vec();
        let hw = s[1] * s[2];
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xv.data().iter().enumerate().map(|(i, v)| v * g[i / hw] + b[i / hw]).collect();
        let t = Tensor::new(s, data).unwrap();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(t, Op::ChannelAffine { x, gamma, beta }, rg)
    }

    /// `[C, H, W] -> [H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let t = transpose2(self.value(x).data(), s[0], s[1] * s[2]);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[1] * s[2], s[0]], t).unwrap(), Op::ToTokens(x), rg)
    }

    /// `[H*W, C] -> [C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[0], h * w);
        let t = transpose2(self.value(x).data(), s[0], s[1]);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[1], h, w], t).unwrap(), Op::FromTokens(x), rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w;
                    let v = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * oh + y) * ow + xx] = 0.25 * v;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![c, oh, ow], out).unwrap(), Op::AvgPool2(x), rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out).unwrap(), Op::Upsample2(x), rg)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            assert_eq!(&self.shape(x)[1..], &tail[..], "concat trailing shape mismatch");
            lead += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(xs);
        self.push(Tensor::new(shape, data).unwrap(), Op::Concat(xs.to_vec()), rg)
    }

    /// Multi-head scaled dot-product attention: `q[N, C]`, `k, v[M, C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, c) = (self.shape(q)[0], self.shape(q)[1]);
        let m = self.shape(k)[0];
        assert_eq!(self.shape(k)[1], c);
        assert_eq!(self.shape(v), &[m, c]);
        assert_eq!(c % heads, 0);
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let qrow = &qv[i * c + off..i * c + off + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &kv[j * c + off..j * c + off + dh];
                    *pj = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*pj);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let orow = &mut out[i * c + off..i * c + off + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= z;
                    let vrow = &vv[j * c + off..j * c + off + dh];
                    for (o, vx) in orow.iter_mut().zip(vrow) {
                        *o += *pj * vx;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Tensor::new(vec![n, c], out).unwrap(), Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Per-location attention across a task axis. Each `ks[t]`/`vs[t]` is `[N, C]`
    /// and aligned with `q[N, C]` location by location. Returns the output and
    /// the post-softmax weights `[N, heads, T]`.
    pub fn task_attention(
        &mut self,
        q: Var,
        ks: &[Var],
        vs: &[Var],
        heads: usize,
        mask: Option<&[bool]>,
    ) -> (Var, Vec<f64>) {
        assert_eq!(ks.len(), vs.len());
        let (n, c) = (self.shape(q)[0], self.shape(q)[1]);
        for (&k, &v) in ks.iter().zip(vs) {
            assert_eq!(self.shape(k), &[n, c], "task attention key shape");
            assert_eq!(self.shape(v), &[n, c], "task attention value shape");
        }
        let t = ks.len();
        let dh = c / heads;
        let kts: Vec<&Tensor> = ks.iter().map(|&k| self.value(k)).collect();
        let probs = task_attention_probs(self.value(q), &kts, heads, mask);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for h in 0..heads {
                for (ti, &v) in vs.iter().enumerate() {
                    let p = probs[(i * heads + h) * t + ti];
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &self.value(v).data()[i * c + h * dh..i * c + (h + 1) * dh];
                    for (o, vx) in out[i * c + h * dh..i * c + (h + 1) * dh].iter_mut().zip(vrow) {
                        *o += p * vx;
                    }
                }
            }
        }
        let mut parents = vec![q];
        parents.extend_from_slice(ks);
        parents.extend_from_slice(vs);
        let rg = self.rg(&parents);
        let op = Op::TaskAttention { q, ks: ks.to_vec(), vs: vs.to_vec(), heads, probs: probs.clone() };
        (self.push(Tensor::new(vec![n, c], out).unwrap(), op, rg), probs)
    }

    /// Mean squared difference, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mse(a, b), rg)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    /// Back-propagates from a scalar node with seed gradient 1.
    pub fn backward(&mut self, loss: Var) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(&op, &g, idx);
            self.nodes[idx].op = op;
            self.grads[idx] = Some(g);
        }
    }

    fn backward_op(&mut self, op: &Op, g: &Tensor, idx: usize) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |d| add_into(d, gd));
                self.acc(*b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |d| add_into(d, gd));
                self.acc(*b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data().to_vec();
                self.acc(*a, |d| d.iter_mut().zip(gd).zip(&bv).for_each(|((x, y), z)| *x += y * z));
                let av = self.value(*a).data().to_vec();
                self.acc(*b, |d| d.iter_mut().zip(gd).zip(&av).for_each(|((x, y), z)| *x += y * z));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y * s));
            }
            Op::Silu(a) => {
                let av = self.value(*a).data().to_vec();
                self.acc(*a, |d| {
                    for ((x, y), &v) in d.iter_mut().zip(gd).zip(&av) {
                        let sg = 1.0 / (1.0 + (-v).exp());
                        *x += y * sg * (1.0 + v * (1.0 - sg));
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(*a, |d| add_into(d, gd));
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    self.acc(x, |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::Conv2d { x, w, b, pad } => self.backward_conv(*x, *w, *b, *pad, g),
            Op::Linear { x, w, b } => {
                let (n, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cout = self.shape(*w)[1];
                let xv = self.value(*x).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                self.acc(*b, |d| {
                    for i in 0..n {
                        add_into(d, &gd[i * cout..(i + 1) * cout]);
                    }
                });
                self.acc(*w, |d| {
                    for i in 0..n {
                        let grow = &gd[i * cout..(i + 1) * cout];
                        for kk in 0..cin {
                            let a = xv[i * cin + kk];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, gj) in d[kk * cout..(kk + 1) * cout].iter_mut().zip(grow) {
                                *o += a * gj;
                            }
                        }
                    }
                });
                self.acc(*x, |d| {
                    for i in 0..n {
                        let grow = &gd[i * cout..(i + 1) * cout];
                        for kk in 0..cin {
                            d[i * cin + kk] += grow.iter().zip(&wv[kk * cout..(kk + 1) * cout]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
            }
            Op::NormRows { x, rstd } => {
                let (r, m) = (self.shape(*x)[0], self.shape(*x)[1]);
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*x, |d| {
                    for i in 0..r {
                        let gy = &gd[i * m..(i + 1) * m];
                        let yr = &y[i * m..(i + 1) * m];
                        let mg = gy.iter().sum::<f64>() / m as f64;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            d[i * m + j] += rstd[i] * (gy[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::RowAffine { x, gamma, beta } => {
                let c = self.shape(*x)[1];
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gamma).data().to_vec();
                self.acc(*beta, |d| gd.iter().enumerate().for_each(|(i, y)| d[i % c] += y));
                self.acc(*gamma, |d| gd.iter().enumerate().for_each(|(i, y)| d[i % c] += y * xv[i]));
                self.acc(*x, |d| gd.iter().enumerate().for_each(|(i, y)| d[i] += y * gv[i % c]));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let s = self.shape(*x).to_vec();
                let hw = s[1] * s[2];
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gamma).data().to_vec();
                self.acc(*beta, |d| gd.iter().enumerate().for_each(|(i, y)| d[i / hw] += y));
                self.acc(*gamma, |d| gd.iter().enumerate().for_each(|(i, y)| d[i / hw] += y * xv[i]));
                self.acc(*x, |d| gd.iter().enumerate().for_each(|(i, y)| d[i] += y * gv[i / hw]));
            }
            Op::ToTokens(x) => {
                let s = self.shape(*x).to_vec();
                let t = transpose2(gd, s[1] * s[2], s[0]);
                self.acc(*x, |d| add_into(d, &t));
            }
            Op::FromTokens(x) => {
                let s = self.shape(*x).to_vec();
                let t = transpose2(gd, s[1], s[0]);
                self.acc(*x, |d| add_into(d, &t));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                self.acc(*x, |d| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * gd[(ch * oh + y) * ow + xx];
                                let base = ch * h * w;
                                d[base + 2 * y * w + 2 * xx] += v;
                                d[base + 2 * y * w + 2 * xx + 1] += v;
                                d[base + (2 * y + 1) * w + 2 * xx] += v;
                                d[base + (2 * y + 1) * w + 2 * xx + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                self.acc(*x, |d| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => self.backward_attention(*q, *k, *v, *heads, probs, g),
            Op::TaskAttention { q, ks, vs, heads, probs } => {
                self.backward_task_attention(*q, ks, vs, *heads, probs, g)
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let s = 2.0 * gd[0] / n;
                let diff: Vec<f64> =
                    self.value(*a).data().iter().zip(self.value(*b).data()).map(|(x, y)| s * (x - y)).collect();
                self.acc(*a, |d| add_into(d, &diff));
                self.acc(*b, |d| d.iter_mut().zip(&diff).for_each(|(x, y)| *x -= y));
            }
        }
    }

    fn backward_conv(&mut self, x: Var, w: Var, b: Var, pad: usize, g: &Tensor) {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let gd = g.data();
        let xv = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        self.acc(b, |d| {
            for co in 0..cout {
                d[co] += gd[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
            }
        });
        self.acc(w, |d| {
            for co in 0..cout {
                let go = &gd[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    let xin = &xv[ci * h * wd..(ci + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            d[((co * cin + ci) * k + ky) * k + kx] += conv_tap_dot(
                                go,
                                xin,
                                oh,
                                ow,
                                h,
                                wd,
                                ky as isize - pad as isize,
                                kx as isize - pad as isize,
                            );
                        }
                    }
                }
            }
        });
        self.acc(x, |d| {
            for co in 0..cout {
                let go = &gd[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    let din = &mut d[ci * h * wd..(ci + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                            conv_tap_transpose(din, go, wt, oh, ow, h, wd, ky as isize - pad as isize, kx as isize - pad as isize);
                        }
                    }
                }
            }
        });
    }

    fn backward_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[f64], g: &Tensor) {
        let (n, c) = (self.shape(q)[0], self.shape(q)[1]);
        let m = self.shape(k)[0];
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gd = g.data();
        let (qv, kv, vv) =
            (self.value(q).data().to_vec(), self.value(k).data().to_vec(), self.value(v).data().to_vec());
        let mut gq = vec![0.0; n * c];
        let mut gk = vec![0.0; m * c];
        let mut gv = vec![0.0; m * c];
        let mut gl = vec![0.0; m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let grow = &gd[i * c + off..i * c + off + dh];
                let mut dot = 0.0;
                for j in 0..m {
                    let vrow = &vv[j * c + off..j * c + off + dh];
                    let gp: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    gl[j] = gp;
                    dot += p[j] * gp;
                    for (o, gx) in gv[j * c + off..j * c + off + dh].iter_mut().zip(grow) {
                        *o += p[j] * gx;
                    }
                }
                for j in 0..m {
                    let dl = p[j] * (gl[j] - dot) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    for d in 0..dh {
                        gq[i * c + off + d] += dl * kv[j * c + off + d];
                        gk[j * c + off + d] += dl * qv[i * c + off + d];
                    }
                }
            }
        }
        self.acc(q, |d| add_into(d, &gq));
        self.acc(k, |d| add_into(d, &gk));
        self.acc(v, |d| add_into(d, &gv));
    }

    fn backward_task_attention(&mut self, q: Var, ks: &[Var], vs: &[Var], heads: usize, probs: &[f64], g: &Tensor) {
        let (n, c) = (self.shape(q)[0], self.shape(q)[1]);
        let t = ks.len();
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gd = g.data();
        let qv = self.value(q).data().to_vec();
        let kvals: Vec<Vec<f64>> = ks.iter().map(|&k| self.value(k).data().to_vec()).collect();
        let vvals: Vec<Vec<f64>> = vs.iter().map(|&v| self.value(v).data().to_vec()).collect();
        let mut gq = vec![0.0; n * c];
        let mut gk = vec![vec![0.0; n * c]; t];
        let mut gv = vec![vec![0.0; n * c]; t];
        let mut gp = vec![0.0; t];
        for i in 0..n {
            for h in 0..heads {
                let r = i * c + h * dh..i * c + (h + 1) * dh;
                let p = &probs[(i * heads + h) * t..(i * heads + h + 1) * t];
                let grow = &gd[r.clone()];
                let mut dot = 0.0;
                for ti in 0..t {
                    gp[ti] = grow.iter().zip(&vvals[ti][r.clone()]).map(|(a, b)| a * b).sum();
                    dot += p[ti] * gp[ti];
                    if p[ti] != 0.0 {
                        for (o, gx) in gv[ti][r.clone()].iter_mut().zip(grow) {
                            *o += p[ti] * gx;
                        }
                    }
                }
                for ti in 0..t {
                    let dl = p[ti] * (gp[ti] - dot) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    for idx in r.clone() {
                        gq[idx] += dl * kvals[ti][idx];
                        gk[ti][idx] += dl * qv[idx];
                    }
                }
            }
        }
        self.acc(q, |d| add_into(d, &gq));
        for (ti, &k) in ks.iter().enumerate() {
            self.acc(k, |d| add_into(d, &gk[ti]));
        }
        for (ti, &v) in vs.iter().enumerate() {
            self.acc(v, |d| add_into(d, &gv[ti]));
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}

fn transpose2(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Valid output range `[lo, hi)` along one axis for a tap at offset `d`.
fn tap_range(out_len: usize, in_len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (in_len as isize - d).min(out_len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_tap(o: &mut [f64], xin: &[f64], wt: f64, oh: usize, ow: usize, h: usize, w: usize, dy: isize, dx: isize) {
    let (y0, y1) = tap_range(oh, h, dy);
    let (x0, x1) = tap_range(ow, w, dx);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let orow = &mut o[y * ow + x0..y * ow + x1];
        let irow = &xin[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
        for (a, b) in orow.iter_mut().zip(irow) {
            *a += wt * b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_tap_dot(go: &[f64], xin: &[f64], oh: usize, ow: usize, h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = tap_range(oh, h, dy);
    let (x0, x1) = tap_range(ow, w, dx);
    let mut s = 0.0;
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let grow = &go[y * ow + x0..y * ow + x1];
        let irow = &xin[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn conv_tap_transpose(din: &mut [f64], go: &[f64], wt: f64, oh: usize, ow: usize, h: usize, w: usize, dy: isize, dx: isize) {
    let (y0, y1) = tap_range(oh, h, dy);
    let (x0, x1) = tap_range(ow, w, dx);
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let grow = &go[y * ow + x0..y * ow + x1];
        let irow = &mut din[iy * w + (x0 as isize + dx) as usize..iy * w + (x1 as isize + dx) as usize];
        for (a, b) in irow.iter_mut().zip(grow) {
            *a += wt * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars);
        g.backward(out);
        let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();
        let eps = 1e-6;
        for (which, t) in inputs.iter().enumerate() {
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[which].data_mut()[idx] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = ins.into_iter().map(|t| g.param(t)).collect();
                    let o = build(&mut g, &vars);
                    g.value(o).data()[0]
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic[which].data()[idx];
                assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()), "input {which}[{idx}]: fd {fd} vs analytic {an}");
            }
        }
    }

    fn loss_of(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, g.shape(x));
        let c = g.constant(t);
        g.mse(x, c)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![rand_tensor(&mut rng, &[2, 4, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])];
        check(ins, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1);
            loss_of(g, y, 9)
        });
    }

    #[test]
    fn conv1x1_and_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![rand_tensor(&mut rng, &[2, 4, 4]), rand_tensor(&mut rng, &[2, 2, 1, 1]), rand_tensor(&mut rng, &[2])];
        check(ins, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 0);
            let p = g.avg_pool2(y);
            let u = g.upsample2(p);
            let s = g.silu(u);
            let c = g.concat(&[s, v[0]]);
            loss_of(g, c, 3)
        });
    }

    #[test]
    fn norm_affine_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![
            rand_tensor(&mut rng, &[2, 2, 3]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check(ins, |g, v| {
            let a = g.channel_affine(v[0], v[1], v[2]);
            let t = g.to_tokens(a);
            let n = g.norm_rows(t, 1e-5);
            let r = g.row_affine(n, v[1], v[2]);
            let l = g.linear(r, v[3], v[4]);
            let m = g.mul(l, l);
            let s = g.sub(m, l);
            let sc = g.scale(s, 0.5);
            let back = g.reshape(sc, &[2, 3, 3]);
            let back = g.reshape(back, &[6, 3]);
            loss_of(g, back, 4)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4]), rand_tensor(&mut rng, &[5, 4])];
        check(ins, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2);
            loss_of(g, y, 5)
        });
    }

    #[test]
    fn task_attention_gradients_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins: Vec<Tensor> = (0..7).map(|_| rand_tensor(&mut rng, &[3, 4])).collect();
        let mask = vec![false, true, false, false, false, true, true, true, false];
        check(ins, |g, v| {
            let (y, _) = g.task_attention(v[0], &v[1..4], &v[4..7], 2, Some(&mask));
            let f = g.from_tokens(y, 1, 3);
            loss_of(g, f, 6)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(&[2], 1.0));
        let b = g.constant(Tensor::full(&[2], 2.0));
        let c = g.mul(a, b);
        let l = g.mse(c, b);
        g.backward(l);
        assert!(g.grad(b).is_none());
        assert!(g.grad(a).is_some());
    }
}
