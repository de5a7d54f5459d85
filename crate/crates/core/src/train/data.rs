//! Synthetic segmentation scenes: flat colored rectangles and ellipses on a
//! dark background, with per-pixel Gaussian noise.

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_std: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 4,
            noise_std: 0.05,
            train_size: 512,
            val_size: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return config_err("class count must be in 2..=255");
        }
        if self.min_shapes > self.max_shapes {
            return config_err("min_shapes exceeds max_shapes");
        }
        if self.height < 4 || self.width < 4 {
            return config_err("images must be at least 4x4");
        }
        if !(self.noise_std >= 0.0) {
            return config_err("noise must be non-negative");
        }
        Ok(())
    }
}

/// One image (channel-major RGB bytes) and its label mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `3 * h * w`, planes R, G, B.
    pub image: Vec<u8>,
    /// `h * w` class indices.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Image scaled to `[0, 1]` as a `(1, 3, h, w)` tensor.
    pub fn image_tensor(&self) -> Tensor4 {
        let data = self.image.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor4::from_vec(Shape4::new(1, 3, self.height, self.width), data).expect("image size")
    }

    /// Interleaved RGB bytes, as stored in PPM files.
    pub fn interleaved(&self) -> Vec<u8> {
        let p = self.pixels();
        (0..p).flat_map(|i| [self.image[i], self.image[p + i], self.image[2 * p + i]]).collect()
    }

    pub fn from_interleaved(height: usize, width: usize, rgb: &[u8], mask: Vec<u8>) -> Result<Self> {
        let p = height * width;
        if rgb.len() != 3 * p || mask.len() != p {
            return Err(Error::Data(format!("buffers do not match a {height}x{width} image")));
        }
        let mut image = vec![0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                image[c * p + i] = rgb[3 * i + c];
            }
        }
        Ok(Self {
            height,
            width,
            image,
            mask,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthDataset {
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Fixed, well separated RGB color of each class in `[0, 1]`.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.1, 0.1, 0.1],
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.9, 0.2],
        [0.8, 0.3, 0.9],
        [0.2, 0.9, 0.9],
        [0.9, 0.6, 0.3],
    ];
    if class < PALETTE.len() {
        PALETTE[class]
    } else {
        let k = class as f64;
        [(0.37 * k).fract(), (0.61 * k).fract(), (0.83 * k).fract()]
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

fn sample_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split << 40)
        .wrapping_add(index as u64)
}

fn generate_sample(cfg: &SynthConfig, split: u64, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let (h, w) = (cfg.height, cfg.width);
    let mut mask = vec![0u8; h * w];
    let shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    for s in 0..shapes {
        // the first shape cycles through the classes so every class occurs
        let class = if s == 0 {
            1 + index % (cfg.num_classes - 1)
        } else {
            rng.gen_range(1..cfg.num_classes)
        };
        let kind = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
        let sh = rng.gen_range(h / 4..=h / 2).max(2);
        let sw = rng.gen_range(w / 8..=w / 3).max(2);
        let top = rng.gen_range(0..=h - sh);
        let left = rng.gen_range(0..=w - sw);
        let (cy, cx) = (top as f64 + sh as f64 / 2.0, left as f64 + sw as f64 / 2.0);
        let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
        for r in top..top + sh {
            for c in left..left + sw {
                let inside = match kind {
                    Shape::Rect => true,
                    Shape::Ellipse => {
                        let dy = (r as f64 + 0.5 - cy) / ry;
                        let dx = (c as f64 + 0.5 - cx) / rx;
                        dy * dy + dx * dx <= 1.0
                    }
                };
                if inside {
                    mask[r * w + c] = class as u8;
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let p = h * w;
    let mut image = vec![0u8; 3 * p];
    for i in 0..p {
        let color = class_color(mask[i] as usize);
        for ch in 0..3 {
            let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let v = (color[ch] + n).clamp(0.0, 1.0);
            image[ch * p + i] = (v * 255.0).round() as u8;
        }
    }
    Sample {
        height: h,
        width: w,
        image,
        mask,
    }
}

/// Deterministic dataset; each sample has its own generator seeded from
/// `(seed, split, index)`.
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    Ok(SynthDataset {
        num_classes: cfg.num_classes,
        train: (0..cfg.train_size).map(|i| generate_sample(cfg, 0, i)).collect(),
        val: (0..cfg.val_size).map(|i| generate_sample(cfg, 1, i)).collect(),
    })
}

/// Stacks samples into an `(n, 3, h, w)` batch and a flat label vector.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor4, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data("batch samples differ in size".into()));
        }
        data.extend(s.image.iter().map(|&b| b as f64 / 255.0));
        labels.extend_from_slice(&s.mask);
    }
    Ok((Tensor4::from_vec(Shape4::new(samples.len(), 3, h, w), data)?, labels))
}
