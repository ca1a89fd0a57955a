//! Training-time augmentation with one geometric transform per triple.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::batch::{ImageStack, ModalBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Zero padding before the random crop back to the original size.
    pub crop_padding: usize,
    pub erase_prob: f64,
    pub erase_area_min: f64,
    pub erase_area_max: f64,
    pub erase_aspect_min: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            crop_padding: 1,
            erase_prob: 0.5,
            erase_area_min: 0.02,
            erase_area_max: 0.4,
            erase_aspect_min: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Geometric transform drawn once per instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// Crop origin inside the padded image.
    pub crop: (usize, usize),
    /// `(top, left, height, width)` of the erased rectangle.
    pub erase: Option<(usize, usize, usize, usize)>,
}

impl Transform {
    pub fn draw(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let pad = cfg.crop_padding;
        let crop = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
        let mut erase = None;
        if rng.random::<f64>() < cfg.erase_prob {
            // Standard random erasing: retry until the rectangle fits.
            for _ in 0..100 {
                let area = (height * width) as f64
                    * rng.random_range(cfg.erase_area_min..=cfg.erase_area_max);
                let log_r = rng.random_range(cfg.erase_aspect_min.ln()..=(1.0 / cfg.erase_aspect_min).ln());
                let aspect = log_r.exp();
                let eh = (area * aspect).sqrt().round() as usize;
                let ew = (area / aspect).sqrt().round() as usize;
                if eh >= 1 && ew >= 1 && eh < height && ew < width {
                    let top = rng.random_range(0..=height - eh);
                    let left = rng.random_range(0..=width - ew);
                    erase = Some((top, left, eh, ew));
                    break;
                }
            }
        }
        Transform { flip, crop, erase }
    }

    /// Apply to one `channels x height x width` image.
    pub fn apply(&self, img: &[f64], channels: usize, height: usize, width: usize, pad: usize) -> Vec<f64> {
        let mut out = vec![0.0; img.len()];
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    // position in the padded canvas, then back into the source
                    let py = y + self.crop.0;
                    let px = x + self.crop.1;
                    if py < pad || px < pad || py - pad >= height || px - pad >= width {
                        continue;
                    }
                    let (sy, mut sx) = (py - pad, px - pad);
                    if self.flip {
                        sx = width - 1 - sx;
                    }
                    out[(c * height + y) * width + x] = img[(c * height + sy) * width + sx];
                }
            }
        }
        if let Some((top, left, eh, ew)) = self.erase {
            for c in 0..channels {
                for y in top..top + eh {
                    for x in left..left + ew {
                        out[(c * height + y) * width + x] = 0.0;
                    }
                }
            }
        }
        out
    }
}

/// Augment every instance of `batch`, drawing each instance's transform from
/// `(seed, position)` and applying it identically to R, N and T.
pub fn augment_batch(batch: &ModalBatch, cfg: &AugmentConfig, seed: u64) -> ModalBatch {
    if !cfg.enabled {
        return batch.clone();
    }
    let mut out = batch.clone();
    let s0 = &batch.images[0];
    let (ch, h, w) = (s0.channels, s0.height, s0.width);
    for i in 0..batch.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ i as u64);
        let t = Transform::draw(cfg, h, w, &mut rng);
        for m in 0..3 {
            let src: &ImageStack = &batch.images[m];
            let img = t.apply(src.image(i), ch, h, w, cfg.crop_padding);
            out.images[m].image_mut(i).copy_from_slice(&img);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker_batch() -> ModalBatch {
        let (h, w) = (8, 6);
        let mut img = vec![0.5; 3 * h * w];
        img[2 * w + 1] = 9.0; // channel 0, (2, 1)
        let stack = ImageStack::from_images(3, h, w, &[&img, &img]);
        ModalBatch::new([stack.clone(), stack.clone(), stack], vec![0, 1], vec![1, 1]).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let b = marker_batch();
        assert_eq!(augment_batch(&b, &AugmentConfig::disabled(), 3), b);
    }

    #[test]
    fn flip_is_an_involution() {
        let b = marker_batch();
        let t = Transform { flip: true, crop: (0, 0), erase: None };
        let once = t.apply(b.images[0].image(0), 3, 8, 6, 0);
        let twice = t.apply(&once, 3, 8, 6, 0);
        assert_ne!(once, b.images[0].image(0));
        assert_eq!(twice, b.images[0].image(0));
    }

    #[test]
    fn same_transform_on_all_modalities() {
        let b = marker_batch();
        for seed in 0..20 {
            let a = augment_batch(&b, &AugmentConfig::default(), seed);
            for i in 0..2 {
                assert_eq!(a.images[0].image(i), a.images[1].image(i));
                assert_eq!(a.images[0].image(i), a.images[2].image(i));
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let b = marker_batch();
        let cfg = AugmentConfig::default();
        assert_eq!(augment_batch(&b, &cfg, 4), augment_batch(&b, &cfg, 4));
    }
}
