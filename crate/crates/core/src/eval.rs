//! Dice/Jaccard metrics and single-pass or sliding-window inference.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::augment::{pad_reflect3, standardize};
use crate::config::{InferenceMode, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, Segmenter};

/// Per-class Dice and Jaccard from counts aggregated over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
    pub mdice: f64,
    pub mjaccard: f64,
    pub n_images: usize,
}

/// Running intersection and set sizes per class.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    num_classes: usize,
    ignore: u8,
    inter: Vec<u64>,
    pred: Vec<u64>,
    gt: Vec<u64>,
    n_images: usize,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize, ignore: u8) -> Self {
        Self {
            num_classes,
            ignore,
            inter: vec![0; num_classes],
            pred: vec![0; num_classes],
            gt: vec![0; num_classes],
            n_images: 0,
        }
    }

    /// Pixels whose ground truth is the ignore value are skipped.
    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == self.ignore {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Data(format!("label {} outside 0..{c}", g.max(p))));
            }
            self.pred[p as usize] += 1;
            self.gt[g as usize] += 1;
            if p == g {
                self.inter[p as usize] += 1;
            }
        }
        self.n_images += 1;
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let mut dice = Vec::with_capacity(self.num_classes);
        let mut jaccard = Vec::with_capacity(self.num_classes);
        for k in 0..self.num_classes {
            let (i, p, g) = (self.inter[k], self.pred[k], self.gt[k]);
            if p + g == 0 {
                dice.push(1.0);
                jaccard.push(1.0);
            } else {
                dice.push(2.0 * i as f64 / (p + g) as f64);
                jaccard.push(i as f64 / (p + g - i) as f64);
            }
        }
        let n = self.num_classes.max(1) as f64;
        MetricReport {
            mdice: dice.iter().sum::<f64>() / n,
            mjaccard: jaccard.iter().sum::<f64>() / n,
            dice,
            jaccard,
            n_images: self.n_images,
        }
    }
}

pub fn dice_jaccard(preds: &[Array2<u8>], gts: &[Array2<u8>], num_classes: usize, ignore: u8) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut acc = MetricAccumulator::new(num_classes, ignore);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.report())
}

impl MetricReport {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("labeled_ratio,method,mdice_pct,mjaccard_pct");
        for k in 0..num_classes {
            write!(h, ",dice_c{k}_pct").unwrap();
        }
        for k in 0..num_classes {
            write!(h, ",jaccard_c{k}_pct").unwrap();
        }
        h.push_str(",n_images");
        h
    }

    /// One table row: labeled ratio, method, means and per-class values in percent.
    pub fn csv_row(&self, labeled_ratio: &str, method: &str) -> String {
        let mut r = format!(
            "{labeled_ratio},{method},{:.4},{:.4}",
            100.0 * self.mdice,
            100.0 * self.mjaccard
        );
        for v in self.dice.iter().chain(&self.jaccard) {
            write!(r, ",{:.4}", 100.0 * v).unwrap();
        }
        write!(r, ",{}", self.n_images).unwrap();
        r
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "mDice {:.2}%  mJaccard {:.2}%  ({} images)\n",
            100.0 * self.mdice,
            100.0 * self.mjaccard,
            self.n_images
        );
        for (k, (d, j)) in self.dice.iter().zip(&self.jaccard).enumerate() {
            writeln!(s, "  class {k}: Dice {:.2}%  Jaccard {:.2}%", 100.0 * d, 100.0 * j).unwrap();
        }
        s
    }
}

/// Window origins along one axis: multiples of `stride`, with the last window
/// shifted flush to the border.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + window < len).collect();
    starts.push(len - window);
    starts
}

/// Per-pixel count of windows covering it.
pub fn coverage_map(h: usize, w: usize, window: usize, stride: usize) -> Array2<u32> {
    let mut cov = Array2::<u32>::zeros((h, w));
    for &y in &window_starts(h, window, stride) {
        for &x in &window_starts(w, window, stride) {
            cov.slice_mut(s![y..(y + window).min(h), x..(x + window).min(w)])
                .mapv_inplace(|c| c + 1);
        }
    }
    cov
}

/// Average logits of overlapping windows. Images smaller than the window are
/// reflect-padded and the result is cropped back.
pub fn sliding_window_infer<F>(image: &Array3<f32>, window: usize, stride: usize, mut f: F) -> Result<Array3<f32>>
where
    F: FnMut(&Array3<f32>) -> Result<Array3<f32>>,
{
    if stride == 0 || stride > window {
        return Err(Error::Config(format!("stride {stride} must be in 1..={window}")));
    }
    let (_, h, w) = image.dim();
    let padded = pad_reflect3(image, window.saturating_sub(h), window.saturating_sub(w));
    let (_, ph, pw) = padded.dim();
    let mut sum: Option<Array3<f32>> = None;
    let cov = coverage_map(ph, pw, window, stride);
    for &y in &window_starts(ph, window, stride) {
        for &x in &window_starts(pw, window, stride) {
            let crop = padded.slice(s![.., y..y + window, x..x + window]).to_owned();
            let logits = f(&crop)?;
            let acc = sum.get_or_insert_with(|| Array3::zeros((logits.dim().0, ph, pw)));
            let mut region = acc.slice_mut(s![.., y..y + window, x..x + window]);
            region += &logits;
        }
    }
    let mut out = sum.expect("at least one window");
    for mut plane in out.outer_iter_mut() {
        plane.zip_mut_with(&cov, |v, &c| *v /= c as f32);
    }
    Ok(out.slice(s![.., ..h, ..w]).to_owned())
}

/// Per-pixel argmax over classes of `[C, H, W]` logits.
pub fn argmax_labels(logits: &Array3<f32>) -> Array2<u8> {
    let (c, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, y, x]] > logits[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    })
}

fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (_, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((c, h, w), v).map_err(|e| Error::Shape(e.to_string()))?)
}

fn forward_array(model: &Segmenter, image: &Array3<f32>, use_fused: bool) -> Result<Array3<f32>> {
    let x = images_to_tensor(std::slice::from_ref(image), model.device())?;
    tensor_to_array3(&model.predict_logits(&x, use_fused)?)
}

/// Class logits `[C, H, W]` for a raw `[0, 1]` image.
pub fn infer_logits(model: &Segmenter, image: &Array3<f32>, cfg: &TrainConfig) -> Result<Array3<f32>> {
    let img = standardize(image, cfg.data.mean, cfg.data.std);
    let use_fused = cfg.eval.use_fused;
    match cfg.eval.mode {
        InferenceMode::Single => {
            let (_, h, w) = img.dim();
            let p = model.patch_size();
            let padded = pad_reflect3(&img, h.next_multiple_of(p) - h, w.next_multiple_of(p) - w);
            let logits = forward_array(model, &padded, use_fused)?;
            Ok(logits.slice(s![.., ..h, ..w]).to_owned())
        }
        InferenceMode::Sliding => {
            if cfg.eval.window % model.patch_size() != 0 {
                return Err(Error::Config(format!(
                    "eval.window {} is not a multiple of the patch size",
                    cfg.eval.window
                )));
            }
            sliding_window_infer(&img, cfg.eval.window, cfg.eval.stride, |crop| forward_array(model, crop, use_fused))
        }
    }
}

pub fn predict(model: &Segmenter, image: &Array3<f32>, cfg: &TrainConfig) -> Result<Array2<u8>> {
    Ok(argmax_labels(&infer_logits(model, image, cfg)?))
}

pub fn evaluate(model: &Segmenter, samples: &[Sample], cfg: &TrainConfig) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut acc = MetricAccumulator::new(cfg.data.num_classes, cfg.data.ignore_index);
    for s in samples {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("evaluation image {:?} has no mask", s.id)))?;
        acc.add(&predict(model, &s.image, cfg)?, gt)?;
    }
    Ok(acc.report())
}
