//! The frozen image codec that defines the latent space all regression runs in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Binder, Graph, ParamStore, Tensor, Var};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    InvertibleShuffle,
    TinyAutoencoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub factor: usize,
    pub channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::shuffle(2)
    }
}

impl CodecConfig {
    pub fn shuffle(factor: usize) -> Self {
        Self { mode: CodecMode::InvertibleShuffle, factor, channels: 3 * factor * factor }
    }

    pub fn tiny_autoencoder() -> Self {
        Self { mode: CodecMode::TinyAutoencoder, factor: 8, channels: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        match self.mode {
            CodecMode::InvertibleShuffle if self.channels != 3 * self.factor * self.factor => Err(Error::Config(
                format!("invertible_shuffle with factor {} needs {} channels", self.factor, 3 * self.factor * self.factor),
            )),
            CodecMode::TinyAutoencoder if !self.factor.is_power_of_two() => {
                Err(Error::Config("tiny_autoencoder factor must be a power of two".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Latent code `[C_lat, H/f, W/f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub tensor: Tensor,
    pub factor: usize,
}

impl LatentGrid {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub cfg: CodecConfig,
    /// Weights for `tiny_autoencoder`; empty for the shuffle codec.
    pub params: ParamStore,
}

const AE_WIDTH: usize = 16;

impl LatentCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let params = match cfg.mode {
            CodecMode::InvertibleShuffle => ParamStore::new(),
            CodecMode::TinyAutoencoder => init_autoencoder(&cfg, 0),
        };
        Ok(Self { cfg, params })
    }

    pub fn with_params(cfg: CodecConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params })
    }

    fn check_image(&self, img: &Raster) -> Result<()> {
        let f = self.cfg.factor;
        if img.channels != 3 || img.height % f != 0 || img.width % f != 0 {
            return Err(Error::Shape(format!(
                "image {}x{}x{} is not 3-channel with sides divisible by {f}",
                img.height, img.width, img.channels
            )));
        }
        Ok(())
    }

    pub fn encode_image(&self, img: &Raster) -> Result<LatentGrid> {
        self.check_image(img)?;
        let f = self.cfg.factor;
        let tensor = match self.cfg.mode {
            CodecMode::InvertibleShuffle => space_to_depth(img, f),
            CodecMode::TinyAutoencoder => {
                let mut g = Graph::new();
                let mut b = Binder::new(&self.params, false);
                let x = g.constant(image_to_chw(img));
                let z = ae_encode(&mut g, &mut b, x, f);
                g.value(z).clone()
            }
        };
        Ok(LatentGrid { tensor, factor: f })
    }

    pub fn decode_latent(&self, z: &LatentGrid) -> Result<Raster> {
        let s = z.tensor.shape();
        if s.len() != 3 || s[0] != self.cfg.channels || z.factor != self.cfg.factor {
            return Err(Error::Shape(format!(
                "latent {:?} (factor {}) does not match codec ({} channels, factor {})",
                s, z.factor, self.cfg.channels, self.cfg.factor
            )));
        }
        let f = self.cfg.factor;
        Ok(match self.cfg.mode {
            CodecMode::InvertibleShuffle => depth_to_space(&z.tensor, f),
            CodecMode::TinyAutoencoder => {
                let mut g = Graph::new();
                let mut b = Binder::new(&self.params, false);
                let x = g.constant(z.tensor.clone());
                let y = ae_decode(&mut g, &mut b, x, f);
                chw_to_image(g.value(y))
            }
        })
    }

    /// One-time reconstruction fit of the autoencoder on `corpus`; a no-op for
    /// the shuffle codec. Returns the final mean-square reconstruction error.
    pub fn prefit(&mut self, corpus: &[Raster], steps: usize, seed: u64) -> Result<f64> {
        if self.cfg.mode == CodecMode::InvertibleShuffle || corpus.is_empty() {
            return Ok(0.0);
        }
        for img in corpus {
            self.check_image(img)?;
        }
        let f = self.cfg.factor;
        self.params = init_autoencoder(&self.cfg, seed);
        let mut opt = Adam::new(AdamConfig { learning_rate: 3e-3, ..AdamConfig::default() });
        for step in 0..steps {
            let img = &corpus[step % corpus.len()];
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params, true);
            let x = g.constant(image_to_chw(img));
            let z = ae_encode(&mut g, &mut b, x, f);
            let y = ae_decode(&mut g, &mut b, z, f);
            let loss = g.mse(y, x);
            g.backward(loss);
            let grads = b.grads(&g);
            opt.update(&mut self.params, &grads);
        }
        let mut total = 0.0;
        for img in corpus {
            let rec = self.decode_latent(&self.encode_image(img)?)?;
            total += mse(&rec.data, &img.data);
        }
        Ok(total / corpus.len() as f64)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub(crate) fn image_to_chw(img: &Raster) -> Tensor {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = img.data[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

pub(crate) fn chw_to_image(t: &Tensor) -> Raster {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = t.data()[ch * h * w + p];
        }
    }
    Raster::new(h, w, c, out).unwrap()
}

/// Latent channel `(c * f + dy) * f + dx` at `(y, x)` holds pixel `(y*f+dy, x*f+dx)` of channel `c`.
fn space_to_depth(img: &Raster, f: usize) -> Tensor {
    let (h, w) = (img.height / f, img.width / f);
    let cl = 3 * f * f;
    let mut out = vec![0.0; cl * h * w];
    for c in 0..3 {
        for dy in 0..f {
            for dx in 0..f {
                let lc = (c * f + dy) * f + dx;
                for y in 0..h {
                    for x in 0..w {
                        out[(lc * h + y) * w + x] = img.at(y * f + dy, x * f + dx, c);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cl, h, w], out).unwrap()
}

fn depth_to_space(z: &Tensor, f: usize) -> Raster {
    let (h, w) = (z.shape()[1], z.shape()[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = Raster::zeros(oh, ow, 3);
    for c in 0..3 {
        for dy in 0..f {
            for dx in 0..f {
                let lc = (c * f + dy) * f + dx;
                for y in 0..h {
                    for x in 0..w {
                        out.data[((y * f + dy) * ow + x * f + dx) * 3 + c] = z.data()[(lc * h + y) * w + x];
                    }
                }
            }
        }
    }
    out
}

fn levels(f: usize) -> usize {
    f.trailing_zeros() as usize
}

fn init_autoencoder(cfg: &CodecConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DEC);
    let mut p = ParamStore::new();
    let mut conv = |p: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize| {
        p.init_normal(&format!("{name}.w"), &[cout, cin, k, k], (1.0 / (cin * k * k) as f64).sqrt(), &mut rng);
        p.init_const(&format!("{name}.b"), &[cout], 0.0);
    };
    conv(&mut p, "enc.in", AE_WIDTH, 3, 3);
    for l in 0..levels(cfg.factor) {
        conv(&mut p, &format!("enc.l{l}"), AE_WIDTH, AE_WIDTH, 3);
        conv(&mut p, &format!("dec.l{l}"), AE_WIDTH, AE_WIDTH, 3);
    }
    conv(&mut p, "enc.out", cfg.channels, AE_WIDTH, 1);
    conv(&mut p, "dec.in", AE_WIDTH, cfg.channels, 1);
    conv(&mut p, "dec.out", 3, AE_WIDTH, 3);
    p
}

fn conv(g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Var {
    let w = b.get(g, &format!("{name}.w"));
    let bias = b.get(g, &format!("{name}.b"));
    let k = g.shape(w)[2];
    g.conv2d(x, w, bias, k / 2)
}

fn ae_encode(g: &mut Graph, b: &mut Binder, x: Var, f: usize) -> Var {
    let mut h = conv(g, b, "enc.in", x);
    h = g.silu(h);
    for l in 0..levels(f) {
        h = g.avg_pool2(h);
        let c = conv(g, b, &format!("enc.l{l}"), h);
        let c = g.silu(c);
        h = g.add(h, c);
    }
    conv(g, b, "enc.out", h)
}

fn ae_decode(g: &mut Graph, b: &mut Binder, z: Var, f: usize) -> Var {
    let mut h = conv(g, b, "dec.in", z);
    h = g.silu(h);
    for l in (0..levels(f)).rev() {
        h = g.upsample2(h);
        let c = conv(g, b, &format!("dec.l{l}"), h);
        let c = g.silu(c);
        h = g.add(h, c);
    }
    conv(g, b, "dec.out", h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
        Raster::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shuffle_shapes_and_exact_round_trip() {
        let codec = LatentCodec::new(CodecConfig::shuffle(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 8, 8);
        let z = codec.encode_image(&img).unwrap();
        assert_eq!(z.tensor.shape(), &[12, 4, 4]);
        let back = codec.decode_latent(&z).unwrap();
        assert_eq!(back, img);
        let z2 = codec.encode_image(&back).unwrap();
        assert_eq!(z2, z);
    }

    #[test]
    fn shuffle_zero_and_linearity() {
        let codec = LatentCodec::new(CodecConfig::shuffle(2)).unwrap();
        let zero = codec.encode_image(&Raster::zeros(4, 6, 3)).unwrap();
        assert!(zero.tensor.data().iter().all(|&v| v == 0.0));
        assert!(codec.decode_latent(&zero).unwrap().data.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (rand_image(&mut rng, 4, 6), rand_image(&mut rng, 4, 6));
        let (a, b) = (0.7, -1.3);
        let mix = Raster::new(4, 6, 3, x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (zx, zy, zm) = (codec.encode_image(&x).unwrap(), codec.encode_image(&y).unwrap(), codec.encode_image(&mix).unwrap());
        for ((m, p), q) in zm.tensor.data().iter().zip(zx.tensor.data()).zip(zy.tensor.data()) {
            assert!((m - (a * p + b * q)).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let codec = LatentCodec::new(CodecConfig::shuffle(2)).unwrap();
        assert!(codec.encode_image(&Raster::zeros(5, 4, 3)).is_err());
        let z = LatentGrid { tensor: Tensor::zeros(&[4, 2, 2]), factor: 2 };
        assert!(codec.decode_latent(&z).is_err());
        assert!(CodecConfig { mode: CodecMode::InvertibleShuffle, factor: 2, channels: 4 }.validate().is_err());
    }

    #[test]
    fn tiny_autoencoder_shape_contract() {
        let codec = LatentCodec::new(CodecConfig::tiny_autoencoder()).unwrap();
        let z = codec.encode_image(&Raster::zeros(16, 32, 3)).unwrap();
        assert_eq!(z.tensor.shape(), &[4, 2, 4]);
        let back = codec.decode_latent(&z).unwrap();
        assert_eq!((back.height, back.width, back.channels), (16, 32, 3));
    }
}
