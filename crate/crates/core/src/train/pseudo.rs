//! Pseudo samples: randomly cropped, flipped and colour-jittered copies of
//! support images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub per_class: usize,
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            per_class: 15,
            crop_scale: [0.7, 1.0],
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("pseudo.crop_scale", "need 0 < min <= max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("pseudo.flip_prob", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.contrast) || !(self.brightness >= 0.0) {
            return Err(Error::config("pseudo", "contrast must lie in [0, 1) and brightness be non-negative"));
        }
        Ok(())
    }
}

/// One augmented copy of a `[c, h, w]` image, values clamped to `[0, 1]`.
pub fn augment_image(img: &[f64], shape: [usize; 3], cfg: &PseudoConfig, rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let scale = rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
    let ch = ((scale.sqrt() * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale.sqrt() * w as f64).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let flip = rng.random_bool(cfg.flip_prob);
    let bright = rng.random_range(-cfg.brightness..=cfg.brightness);
    let contrast = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);

    let sample = |plane: &[f64], y: f64, x: f64| {
        let y = y.clamp(0.0, (ch - 1) as f64);
        let x = x.clamp(0.0, (cw - 1) as f64);
        let (ya, xa) = (y.floor() as usize, x.floor() as usize);
        let (yb, xb) = ((ya + 1).min(ch - 1), (xa + 1).min(cw - 1));
        let (fy, fx) = (y - ya as f64, x - xa as f64);
        let at = |yy: usize, xx: usize| plane[(y0 + yy) * w + x0 + xx];
        (1.0 - fy) * ((1.0 - fx) * at(ya, xa) + fx * at(ya, xb)) + fy * ((1.0 - fx) * at(yb, xa) + fx * at(yb, xb))
    };
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        let plane = &img[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let sy = (i as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sx = (jj as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                out[k * h * w + i * w + j] = sample(plane, sy, sx);
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    for v in &mut out {
        *v = ((*v - mean) * contrast + mean + bright).clamp(0.0, 1.0);
    }
    out
}

/// `way * per_class` pseudo samples, class-major. The `j`-th copy of a class
/// starts from its `(j mod shot)`-th support image.
pub(crate) fn generate_pseudo(
    support_x: &Tensor,
    support_y: &[usize],
    way: usize,
    cfg: &PseudoConfig,
    seed_value: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let s = support_x.shape();
    let shape = [s[1], s[2], s[3]];
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(way * cfg.per_class * per);
    let mut labels = Vec::with_capacity(way * cfg.per_class);
    for class in 0..way {
        let members: Vec<usize> = (0..support_y.len()).filter(|&i| support_y[i] == class).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("class {class} has no support samples")));
        }
        for j in 0..cfg.per_class {
            let src = members[j % members.len()];
            let mut rng = seed::rng(seed::derive(seed_value, seed::PSEUDO, (class * cfg.per_class + j) as u64));
            data.extend(augment_image(&support_x.data()[src * per..(src + 1) * per], shape, cfg, &mut rng));
            labels.push(class);
        }
    }
    Ok((Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)?, labels))
}
