//! Prediction-versus-ground-truth overlays.
//!
//! Foreground is any class other than 0. True positives are tinted green,
//! false positives red, false negatives blue, and the predicted foreground
//! boundary is drawn in yellow. Ignored ground-truth pixels are left as is.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};

const TP: [f32; 3] = [0.0, 0.8, 0.0];
const FP: [f32; 3] = [0.9, 0.0, 0.0];
const FN: [f32; 3] = [0.0, 0.2, 0.9];
const BOUNDARY: [u8; 3] = [255, 230, 0];
const ALPHA: f32 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OverlayCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl OverlayCounts {
    pub fn disagreements(&self) -> usize {
        self.false_positive + self.false_negative
    }
}

/// Pixels of predicted foreground with a 4-neighbour of a different class.
pub fn boundary(pred: &Array2<u8>) -> Array2<bool> {
    let (h, w) = pred.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v = pred[[y, x]];
        if v == 0 {
            return false;
        }
        let differs = |yy: usize, xx: usize| pred[[yy, xx]] != v;
        (y > 0 && differs(y - 1, x))
            || (y + 1 < h && differs(y + 1, x))
            || (x > 0 && differs(y, x - 1))
            || (x + 1 < w && differs(y, x + 1))
    })
}

pub fn overlay(image: &Array3<f32>, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<(RgbImage, OverlayCounts)> {
    let (c, h, w) = image.dim();
    if c != 3 || pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "overlay needs a 3-channel image and maps of its size; got {:?}, {:?}, {:?}",
            image.dim(),
            pred.dim(),
            gt.dim()
        )));
    }
    let edge = boundary(pred);
    let mut counts = OverlayCounts::default();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (p, g) = (pred[[y, x]], gt[[y, x]]);
            let tint = if g == IGNORE_INDEX {
                None
            } else if p != 0 && p == g {
                counts.true_positive += 1;
                Some(TP)
            } else if p != 0 {
                counts.false_positive += 1;
                Some(FP)
            } else if g != 0 {
                counts.false_negative += 1;
                Some(FN)
            } else {
                None
            };
            let px = if edge[[y, x]] {
                BOUNDARY
            } else {
                let mut rgb = [0u8; 3];
                for (k, v) in rgb.iter_mut().enumerate() {
                    let base = image[[k, y, x]].clamp(0.0, 1.0);
                    let mixed = match tint {
                        Some(t) => (1.0 - ALPHA) * base + ALPHA * t[k],
                        None => base,
                    };
                    *v = (mixed * 255.0).round() as u8;
                }
                rgb
            };
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok((out, counts))
}
