//! Weak/strong view generation, CutMix and feature-level perturbation.
//!
//! All functions are pure in `(input, seed)`. The weak view applies only
//! geometry (rescale, crop, flip); the strong view applies the *same*
//! geometry and then photometric noise, so the two pixel grids correspond
//! one to one.

use candle_core::Tensor;
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// The geometric part of an augmentation, recorded so it can be replayed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub scale: f64,
    /// Size after rescaling, before padding.
    pub resized: (usize, usize),
    /// Reflect padding added at the bottom and right edges.
    pub pad: (usize, usize),
    /// Top-left corner of the crop in the padded image.
    pub crop_origin: (usize, usize),
    pub crop_size: usize,
    pub flip: bool,
}

/// Mirror an index into `0..n` (reflect without repeating the edge pixel).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let src = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f32) {
        let pos = ((o as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, pos - i0 as f32)
    };
    let rows: Vec<_> = (0..oh).map(|y| src(y, oh, h)).collect();
    let cols: Vec<_> = (0..ow).map(|x| src(x, ow, w)).collect();
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = image[[ch, y0, x0]] * (1.0 - tx) + image[[ch, y0, x1]] * tx;
        let bottom = image[[ch, y1, x0]] * (1.0 - tx) + image[[ch, y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Nearest-neighbour resize for label maps.
pub fn resize_nearest<T: Copy>(map: &Array2<T>, oh: usize, ow: usize) -> Array2<T> {
    let (h, w) = map.dim();
    if (h, w) == (oh, ow) {
        return map.clone();
    }
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
        map[[sy, sx]]
    })
}

/// Reflect-pad at the bottom and right.
pub fn pad_reflect3(image: &Array3<f32>, ph: usize, pw: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if ph == 0 && pw == 0 {
        return image.clone();
    }
    Array3::from_shape_fn((c, h + ph, w + pw), |(ch, y, x)| {
        image[[ch, reflect_index(y as isize, h), reflect_index(x as isize, w)]]
    })
}

pub fn pad_reflect2<T: Copy>(map: &Array2<T>, ph: usize, pw: usize) -> Array2<T> {
    let (h, w) = map.dim();
    if ph == 0 && pw == 0 {
        return map.clone();
    }
    Array2::from_shape_fn((h + ph, w + pw), |(y, x)| {
        map[[reflect_index(y as isize, h), reflect_index(x as isize, w)]]
    })
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_geometry(
    height: usize,
    width: usize,
    crop_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Geometry {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "geometry"));
    let scale = uniform(&mut rng, cfg.scale_range);
    let rh = ((height as f64 * scale).round() as usize).max(1);
    let rw = ((width as f64 * scale).round() as usize).max(1);
    let pad = (crop_size.saturating_sub(rh), crop_size.saturating_sub(rw));
    let (ph, pw) = (rh + pad.0, rw + pad.1);
    let top = rng.random_range(0..=ph - crop_size);
    let left = rng.random_range(0..=pw - crop_size);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    Geometry {
        scale,
        resized: (rh, rw),
        pad,
        crop_origin: (top, left),
        crop_size,
        flip,
    }
}

pub fn apply_geometry(image: &Array3<f32>, g: &Geometry) -> Array3<f32> {
    let resized = resize_bilinear(image, g.resized.0, g.resized.1);
    let padded = pad_reflect3(&resized, g.pad.0, g.pad.1);
    let (t, l, k) = (g.crop_origin.0, g.crop_origin.1, g.crop_size);
    let mut out = padded.slice(s![.., t..t + k, l..l + k]).to_owned();
    if g.flip {
        out.invert_axis(ndarray::Axis(2));
    }
    out
}

pub fn apply_geometry_mask<T: Copy>(mask: &Array2<T>, g: &Geometry) -> Array2<T> {
    let resized = resize_nearest(mask, g.resized.0, g.resized.1);
    let padded = pad_reflect2(&resized, g.pad.0, g.pad.1);
    let (t, l, k) = (g.crop_origin.0, g.crop_origin.1, g.crop_size);
    let mut out = padded.slice(s![t..t + k, l..l + k]).to_owned();
    if g.flip {
        out.invert_axis(ndarray::Axis(1));
    }
    out
}

/// Random rescale in `scale_range`, random crop to `crop_size` (reflect-padding
/// when the rescaled image is smaller) and horizontal flip.
pub fn weak_augment(
    image: &Array3<f32>,
    mask: Option<&Array2<u8>>,
    crop_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Array3<f32>, Option<Array2<u8>>, Geometry) {
    let (_, h, w) = image.dim();
    let g = sample_geometry(h, w, crop_size, cfg, seed);
    let img = apply_geometry(image, &g);
    let m = mask.map(|m| apply_geometry_mask(m, &g));
    (img, m, g)
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(img: &mut Array3<f32>, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) {
    let brightness = uniform(rng, [1.0 - cfg.brightness, 1.0 + cfg.brightness]).max(0.0) as f32;
    let contrast = uniform(rng, [1.0 - cfg.contrast, 1.0 + cfg.contrast]).max(0.0) as f32;
    let saturation = uniform(rng, [1.0 - cfg.saturation, 1.0 + cfg.saturation]).max(0.0) as f32;
    let hue = uniform(rng, [-cfg.hue, cfg.hue]) as f32;

    img.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));

    let (_, h, w) = img.dim();
    let mean_gray = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| luminance(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]))
        .sum::<f32>()
        / (h * w) as f32;
    img.mapv_inplace(|v| ((v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0));

    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let gray = luminance(r, g, b);
            let mut px = [r, g, b].map(|v| ((v - gray) * saturation + gray).clamp(0.0, 1.0));
            if hue != 0.0 {
                let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
                let (r2, g2, b2) = hsv_to_rgb(hh + hue, ss, vv);
                px = [r2, g2, b2];
            }
            for c in 0..3 {
                img[[c, y, x]] = px[c].clamp(0.0, 1.0);
            }
        }
    }
}

fn grayscale(img: &mut Array3<f32>) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let g = luminance(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for c in 0..3 {
                img[[c, y, x]] = g;
            }
        }
    }
}

fn gaussian_blur(img: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (c, h, w) = img.dim();
    let horizontal: Array3<f32> = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * img[[ch, y, reflect_index(x as isize + k as isize - radius, w)]])
            .sum()
    });
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| {
                wgt * horizontal[[ch, reflect_index(y as isize + k as isize - radius, h), x]]
            })
            .sum()
    })
}

/// Photometric part of the strong view, applied to an already-geometric image.
pub fn photometric(image: &Array3<f32>, cfg: &AugmentConfig, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "photometric"));
    let mut img = image.clone();
    if rng.random_bool(cfg.color_jitter_prob.clamp(0.0, 1.0)) {
        color_jitter(&mut img, &mut rng, cfg);
    }
    if rng.random_bool(cfg.grayscale_prob.clamp(0.0, 1.0)) {
        grayscale(&mut img);
    }
    if rng.random_bool(cfg.blur_prob.clamp(0.0, 1.0)) {
        let sigma = uniform(&mut rng, cfg.blur_sigma) as f32;
        img = gaussian_blur(&img, sigma);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Weak geometry followed by color jitter, random grayscale and Gaussian blur.
pub fn strong_augment(
    image: &Array3<f32>,
    crop_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> (Array3<f32>, Geometry) {
    let (weak, _, g) = weak_augment(image, None, crop_size, cfg, seed);
    (photometric(&weak, cfg, seed), g)
}

/// A weak and a strong view of one unlabeled image sharing one geometry.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub weak: Array3<f32>,
    pub strong: Array3<f32>,
    pub geometry: Geometry,
}

pub fn view_pair(image: &Array3<f32>, crop_size: usize, cfg: &AugmentConfig, seed: u64) -> ViewPair {
    let (weak, _, geometry) = weak_augment(image, None, crop_size, cfg, seed);
    let strong = photometric(&weak, cfg, seed);
    ViewPair {
        weak,
        strong,
        geometry,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Paste `region` of batch element `partner_index` into element `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixPlan {
    pub target: usize,
    pub region: CutBox,
    pub partner_index: usize,
}

/// One plan per mixed image. A batch of one yields no plans.
pub fn sample_cutmix_plans(
    batch: usize,
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Vec<CutMixPlan> {
    if batch < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cutmix"));
    let mut plans = Vec::new();
    for target in 0..batch {
        if !rng.random_bool(cfg.cutmix_prob.clamp(0.0, 1.0)) {
            continue;
        }
        let area = uniform(&mut rng, cfg.cutmix_area) * (height * width) as f64;
        let aspect = uniform(&mut rng, cfg.cutmix_aspect);
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, width);
        let top = rng.random_range(0..=height - bh);
        let left = rng.random_range(0..=width - bw);
        let mut partner = rng.random_range(0..batch - 1);
        if partner >= target {
            partner += 1;
        }
        plans.push(CutMixPlan {
            target,
            region: CutBox {
                top,
                left,
                height: bh,
                width: bw,
            },
            partner_index: partner,
        });
    }
    plans
}

/// Apply plans to `[C, H, W]` arrays; partners are read from the unmixed input.
pub fn mix_images(images: &[Array3<f32>], plans: &[CutMixPlan]) -> Vec<Array3<f32>> {
    let mut out = images.to_vec();
    for p in plans {
        let r = p.region;
        let src = images[p.partner_index].slice(s![.., r.top..r.top + r.height, r.left..r.left + r.width]);
        out[p.target]
            .slice_mut(s![.., r.top..r.top + r.height, r.left..r.left + r.width])
            .assign(&src);
    }
    out
}

/// Apply plans to `[H, W]` maps (labels, validity, confidence).
pub fn mix_maps<T: Copy>(maps: &[Array2<T>], plans: &[CutMixPlan]) -> Vec<Array2<T>> {
    let mut out = maps.to_vec();
    for p in plans {
        let r = p.region;
        let src = maps[p.partner_index].slice(s![r.top..r.top + r.height, r.left..r.left + r.width]);
        out[p.target]
            .slice_mut(s![r.top..r.top + r.height, r.left..r.left + r.width])
            .assign(&src);
    }
    out
}

/// Apply plans to a `[B, C, H, W]` tensor, e.g. logits of the unmixed batch.
pub fn mix_tensor(t: &Tensor, plans: &[CutMixPlan]) -> Result<Tensor> {
    if plans.is_empty() {
        return Ok(t.clone());
    }
    let (b, _, h, w) = t.dims4()?;
    let mut partner: Vec<u32> = (0..b as u32).collect();
    let mut mask = vec![0f64; b * h * w];
    for p in plans {
        partner[p.target] = p.partner_index as u32;
        let r = p.region;
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                mask[(p.target * h + y) * w + x] = 1.0;
            }
        }
    }
    let idx = Tensor::from_vec(partner, b, t.device())?;
    let src = t.index_select(&idx, 0)?;
    let mask = Tensor::from_vec(mask, (b, 1, h, w), t.device())?.to_dtype(t.dtype())?;
    let keep = (1.0 - &mask)?;
    Ok((t.broadcast_mul(&keep)? + src.broadcast_mul(&mask)?)?)
}

/// Sample plans and apply them to images and targets alike.
pub fn cutmix(
    images: &[Array3<f32>],
    targets: &[Array2<u8>],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Vec<Array3<f32>>, Vec<Array2<u8>>, Vec<CutMixPlan>)> {
    if images.len() != targets.len() {
        return Err(Error::Shape(format!(
            "cutmix: {} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    let Some(first) = images.first() else {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    };
    let (_, h, w) = first.dim();
    if images.iter().any(|i| i.dim().1 != h || i.dim().2 != w)
        || targets.iter().any(|t| t.dim() != (h, w))
    {
        return Err(Error::Shape("cutmix: batch elements differ in size".into()));
    }
    let plans = sample_cutmix_plans(images.len(), h, w, cfg, seed);
    Ok((mix_images(images, &plans), mix_maps(targets, &plans), plans))
}

/// Channel dropout: every `(batch, channel)` slice is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn feature_perturb(features: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("feature perturbation rate must be in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(features.clone());
    }
    let (b, c) = (features.dim(0)?, features.dim(1)?);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "feature-perturb"));
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..b * c)
        .map(|_| if rng.random_bool(rate) { 0.0 } else { keep })
        .collect();
    let mut shape = vec![b, c];
    shape.resize(features.rank(), 1);
    let mask = Tensor::from_vec(mask, shape, features.device())?.to_dtype(features.dtype())?;
    Ok(features.broadcast_mul(&mask)?)
}

/// Per-channel standardization `(x - mean) / std` of a `[3, H, W]` image.
pub fn standardize(image: &Array3<f32>, mean: [f32; 3], std: [f32; 3]) -> Array3<f32> {
    let mut out = image.clone();
    for c in 0..3 {
        out.slice_mut(s![c, .., ..]).mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    out
}
