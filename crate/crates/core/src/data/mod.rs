//! Synthetic street-like scenes, training augmentation and PPM/PGM
//! dataset storage.

mod augment;
mod io;
mod scene;

pub use augment::{augment, hflip, AugmentConfig, CropMode};
pub use io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_dataset, write_pgm,
    write_ppm, Dataset, DatasetMeta, Split,
};
pub use scene::{class_name, generate_scene, SceneSpec, BACKGROUND, BLOB, CLASS_NAMES, POLE, ROAD, WALL};

use crate::tensor::{Result as TensorResult, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed file: {0}")]
    Format(String),
    #[error("label {label} outside 0..{classes} and not the ignore label")]
    Label { label: u8, classes: usize },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Planar RGB image, `3 × H × W` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(DataError::Format(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-pixel class indices, row-major `H × W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(DataError::Format(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel count per class value, indexed by the raw `u8`.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor and concatenates labels.
pub fn batch(samples: &[(&Image, &LabelMap)]) -> TensorResult<(Tensor, Vec<u8>)> {
    let (h, w) = samples
        .first()
        .map(|(i, _)| (i.height, i.width))
        .unwrap_or((0, 0));
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for (img, lab) in samples {
        if img.height != h || img.width != w || lab.height != h || lab.width != w {
            return Err(crate::TensorError::Shape(format!(
                "batch mixes {h}x{w} with image {}x{} / labels {}x{}",
                img.height, img.width, lab.height, lab.width
            )));
        }
        data.extend_from_slice(&img.data);
        labels.extend_from_slice(&lab.data);
    }
    Ok((Tensor::new(data, &[samples.len(), 3, h, w])?, labels))
}
