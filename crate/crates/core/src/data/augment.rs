use rand::Rng;

use super::{Image, LabelMap};
use crate::loss::IGNORE_LABEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Scale factors, one drawn uniformly per sample.
    pub scales: Vec<f64>,
    /// Additive brightness offset drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Output `(H, W)`; `None` keeps the input size.
    pub crop: Option<(usize, usize)>,
    pub crop_mode: CropMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            scales: vec![0.75, 1.0, 1.5, 1.75, 2.0],
            brightness: 0.2,
            contrast: 0.2,
            crop: None,
            crop_mode: CropMode::Random,
        }
    }
}

impl AugmentConfig {
    /// No flip, unit scale and no jitter.
    pub fn identity() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            scales: vec![1.0],
            brightness: 0.0,
            contrast: 0.0,
            crop: None,
            crop_mode: CropMode::Center,
        }
    }
}

pub fn hflip(image: &Image, labels: &LabelMap) -> (Image, LabelMap) {
    let (h, w) = (image.height, image.width);
    let mut img = image.clone();
    let mut lab = labels.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data[(c * h + y) * w + x] = image.data[(c * h + y) * w + (w - 1 - x)];
            }
            lab.data[y * w + x] = labels.data[y * w + (w - 1 - x)];
        }
    }
    (img, lab)
}

fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            (lo, (lo + 1).min(input - 1), src - lo as f64)
        })
        .collect()
}

fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| (((o as f64 + 0.5) * scale) as usize).min(input - 1))
        .collect()
}

fn rescale(image: &Image, labels: &LabelMap, oh: usize, ow: usize) -> (Image, LabelMap) {
    let (h, w) = (image.height, image.width);
    let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
    let mut data = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |y: usize, x: usize| image.at(c, y, x);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let (ny, nx) = (nearest_taps(h, oh), nearest_taps(w, ow));
    let mut lab = Vec::with_capacity(oh * ow);
    for &y in &ny {
        for &x in &nx {
            lab.push(labels.at(y, x));
        }
    }
    (
        Image {
            height: oh,
            width: ow,
            data,
        },
        LabelMap {
            height: oh,
            width: ow,
            data: lab,
        },
    )
}

/// Crops or pads to `(th, tw)`. Padding fills the image with zeros and the
/// labels with the ignore label.
fn fit<R: Rng>(image: &Image, labels: &LabelMap, th: usize, tw: usize, mode: CropMode, rng: &mut R) -> (Image, LabelMap) {
    let (h, w) = (image.height, image.width);
    let mut offset = |src: usize, dst: usize| -> usize {
        if src <= dst {
            0
        } else {
            match mode {
                CropMode::Random => rng.random_range(0..=src - dst),
                CropMode::Center => (src - dst) / 2,
            }
        }
    };
    let (oy, ox) = (offset(h, th), offset(w, tw));
    let mut img = Image::filled(th, tw, 0.0);
    let mut lab = LabelMap {
        height: th,
        width: tw,
        data: vec![IGNORE_LABEL; th * tw],
    };
    for y in 0..th.min(h - oy) {
        for x in 0..tw.min(w - ox) {
            for c in 0..3 {
                img.data[(c * th + y) * tw + x] = image.at(c, y + oy, x + ox);
            }
            lab.data[y * tw + x] = labels.at(y + oy, x + ox);
        }
    }
    (img, lab)
}

/// Random flip, scale, crop or pad and color jitter. Geometry applies to
/// image and labels jointly; labels are resampled by nearest neighbour and
/// never jittered.
pub fn augment<R: Rng>(image: &Image, labels: &LabelMap, cfg: &AugmentConfig, rng: &mut R) -> (Image, LabelMap) {
    let (h, w) = (image.height, image.width);
    let (th, tw) = cfg.crop.unwrap_or((h, w));
    let (mut img, mut lab) = if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob.min(1.0)) {
        hflip(image, labels)
    } else {
        (image.clone(), labels.clone())
    };
    let scale = if cfg.scales.is_empty() {
        1.0
    } else {
        cfg.scales[rng.random_range(0..cfg.scales.len())]
    };
    if scale != 1.0 {
        let oh = ((h as f64 * scale).round() as usize).max(1);
        let ow = ((w as f64 * scale).round() as usize).max(1);
        (img, lab) = rescale(&img, &lab, oh, ow);
    }
    if (img.height, img.width) != (th, tw) {
        (img, lab) = fit(&img, &lab, th, tw, cfg.crop_mode, rng);
    }
    let b = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let k = if cfg.contrast > 0.0 {
        rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
    } else {
        1.0
    };
    if b != 0.0 || k != 1.0 {
        let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
        img.data
            .iter_mut()
            .for_each(|v| *v = (*v * k + (1.0 - k) * mean + b).clamp(0.0, 1.0));
    }
    (img, lab)
}
