//! Images, masks, keypoints, file formats and synthetic training pairs.

mod io;
mod synthetic;

pub use io::{
    load_flow, load_image, load_keypoints, load_mask, parse_keypoints, read_ppm, save_flow,
    save_image, save_keypoints, save_mask, write_ppm,
};
pub use synthetic::{gen_pair, pair_keypoints, SynthConfig, SyntheticPair, TextureKind};

use crate::tensor::Tensor;
use std::collections::HashSet;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: parse error at {location}: {reason}")]
    Parse {
        context: String,
        location: String,
        reason: String,
    },
    #[error("duplicate keypoint id {0}")]
    DuplicateId(u64),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
}

/// `h x w` RGB image with channel values in `[0, 1]`, row-major `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Values are clamped into `[0, 1]`; NaN becomes 0.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(DataError::Dimensions(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Constant `h x w x 3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone()).expect("dims")
    }

    /// Lays images out left to right on a white strip.
    pub fn hstack(images: &[Image]) -> Result<Image, DataError> {
        let h = images.iter().map(Image::height).max().unwrap_or(0);
        let w: usize = images.iter().map(Image::width).sum();
        let mut data = vec![1.0; h * w * 3];
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    let o = (y * w + x0 + x) * 3;
                    data[o..o + 3].copy_from_slice(&img.pixel(x, y));
                }
            }
            x0 += img.width;
        }
        Image::new(h, w, data)
    }
}

/// Boolean `h x w` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self, DataError> {
        if data.len() != height * width {
            return Err(DataError::Dimensions(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

/// Keypoints of one image; ids are unique within a set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.id) {
                return Err(DataError::DuplicateId(p.id));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Keypoint] {
        &self.points
    }

    pub fn get(&self, id: u64) -> Option<&Keypoint> {
        self.points.iter().find(|p| p.id == id)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
