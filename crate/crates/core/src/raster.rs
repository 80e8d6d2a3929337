use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved `H x W x C` image of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self { height, width, channels, data: vec![v; height * width * channels] }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn px(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn px_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn from_channels(height: usize, width: usize, chans: &[Vec<f64>]) -> Result<Self> {
        let n = height * width;
        if chans.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("channel length mismatch".into()));
        }
        let mut data = Vec::with_capacity(n * chans.len());
        for p in 0..n {
            data.extend(chans.iter().map(|c| c[p]));
        }
        Raster::new(height, width, chans.len(), data)
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Integer label image, `H x W`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("label map {height}x{width} got {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: i32) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }
}

/// A task's ground truth or prediction in its own units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Annotation {
    Labels(LabelMap),
    Map(Raster),
}

impl Annotation {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Annotation::Labels(l) => (l.height, l.width),
            Annotation::Map(r) => (r.height, r.width),
        }
    }

    pub fn as_map(&self) -> Option<&Raster> {
        match self {
            Annotation::Map(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_labels(&self) -> Option<&LabelMap> {
        match self {
            Annotation::Labels(l) => Some(l),
            _ => None,
        }
    }
}
