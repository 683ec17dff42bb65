//! Random scale, horizontal flip and crop, applied congruently to image and
//! label.

use rand::Rng;

use super::{Sample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::kernels::resize;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Output side length.
    pub crop: usize,
}

impl AugmentPolicy {
    pub fn standard(crop: usize) -> Self {
        AugmentPolicy {
            scale_min: 0.5,
            scale_max: 2.0,
            flip_prob: 0.5,
            crop,
        }
    }
}

/// One concrete draw of the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Top-left corner of the crop in scaled-image coordinates; negative
    /// when the scaled image is smaller than the crop and gets padded.
    pub top: isize,
    pub left: isize,
}

fn scaled(side: usize, scale: f64) -> usize {
    ((side as f64 * scale).round() as usize).max(1)
}

fn offset<R: Rng + ?Sized>(scaled: usize, crop: usize, rng: &mut R) -> isize {
    if scaled >= crop {
        rng.random_range(0..=scaled - crop) as isize
    } else {
        -(rng.random_range(0..=crop - scaled) as isize)
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            flip: false,
            top: 0,
            left: 0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(policy: &AugmentPolicy, h: usize, w: usize, rng: &mut R) -> Self {
        let scale = if policy.scale_max > policy.scale_min {
            rng.random_range(policy.scale_min..=policy.scale_max)
        } else {
            policy.scale_min
        };
        let flip = rng.random_bool(policy.flip_prob.clamp(0.0, 1.0));
        let top = offset(scaled(h, scale), policy.crop, rng);
        let left = offset(scaled(w, scale), policy.crop, rng);
        AugmentParams {
            scale,
            flip,
            top,
            left,
        }
    }
}

/// Draws parameters from `policy` and applies them.
pub fn augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R, policy: &AugmentPolicy) -> Result<Sample> {
    let p = AugmentParams::draw(policy, s.height(), s.width(), rng);
    apply(s, &p, policy.crop)
}

/// Scales (bilinear image, nearest label), flips, then crops to
/// `crop x crop`, padding with zeros and the ignore index.
pub fn apply(s: &Sample, p: &AugmentParams, crop: usize) -> Result<Sample> {
    if !(p.scale > 0.0 && p.scale.is_finite()) || crop == 0 {
        return Err(Error::Config(format!(
            "invalid augmentation scale {} / crop {crop}",
            p.scale
        )));
    }
    let (h, w) = (s.height(), s.width());
    let (sh, sw) = (scaled(h, p.scale), scaled(w, p.scale));
    let image = resize::forward(s.image.data(), 3, h, w, sh, sw);
    let label = nearest(&s.label, h, w, sh, sw);

    let mut out_img = vec![0.0; 3 * crop * crop];
    let mut out_lbl = vec![IGNORE_INDEX; crop * crop];
    for y in 0..crop {
        let sy = y as isize + p.top;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        for x in 0..crop {
            let sx = x as isize + p.left;
            if sx < 0 || sx >= sw as isize {
                continue;
            }
            let col = if p.flip {
                sw - 1 - sx as usize
            } else {
                sx as usize
            };
            let src = sy as usize * sw + col;
            out_lbl[y * crop + x] = label[src];
            for c in 0..3 {
                out_img[(c * crop + y) * crop + x] = image[c * sh * sw + src];
            }
        }
    }
    Sample::new(Tensor::from_vec(&[3, crop, crop], out_img)?, out_lbl)
}

/// Nearest-neighbor resize at half-pixel centers.
fn nearest(label: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let pick = |i: usize, src: usize, dst: usize| {
        (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
    };
    let cols: Vec<usize> = (0..ow).map(|x| pick(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let row = pick(y, h, oh) * w;
        out.extend(cols.iter().map(|&c| label[row + c]));
    }
    out
}

pub fn flip_horizontal(s: &Sample) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    let mirror = |plane: usize, y: usize, x: usize| plane * h * w + y * w + (w - 1 - x);
    let mut image = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            image.extend((0..w).map(|x| s.image.data()[mirror(c, y, x)]));
        }
    }
    let label = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| s.label[mirror(0, y, x)])
        .collect();
    Sample::new(Tensor::from_vec(&[3, h, w], image)?, label)
}
