//! Procedural stand-in for H&E gland images.
//!
//! Each image is a pink, low-frequency textured stroma with a few elliptical
//! glands: a purple epithelial rim dotted with dark nuclei around a pale
//! lumen. Masks mark the full ellipse (rim and lumen) as class 1.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::derive_seed_indexed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Inclusive range of gland count per image.
    pub n_blobs: (usize, usize),
    /// Range of ellipse semi-axis lengths as a fraction of `size`.
    pub blob_scale: (f32, f32),
    pub noise_sigma: f32,
    /// Per-image multiplicative color jitter amplitude.
    pub stain_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 40,
            size: 64,
            n_blobs: (1, 3),
            blob_scale: (0.15, 0.3),
            noise_sigma: 0.03,
            stain_jitter: 0.1,
            seed: 0,
        }
    }
}

const STROMA: [f32; 3] = [0.86, 0.56, 0.70];
const EPITHELIUM: [f32; 3] = [0.52, 0.30, 0.60];
const LUMEN: [f32; 3] = [0.96, 0.90, 0.94];
const NUCLEUS: [f32; 3] = [0.24, 0.14, 0.42];
const LUMEN_FRACTION: f32 = 0.55;

struct Ellipse {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    /// Normalized radius: <= 1 inside.
    fn radius(&self, y: f32, x: f32) -> f32 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Smooth noise in roughly [-1, 1]: a coarse random grid, bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Array2<f32> {
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let scale = cells as f32 / size as f32;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let gy = (y as f32 + 0.5) * scale;
        let gx = (x as f32 + 0.5) * scale;
        let y0 = (gy.floor() as usize).min(cells - 1);
        let x0 = (gx.floor() as usize).min(cells - 1);
        let ty = gy - y0 as f32;
        let tx = gx - x0 as f32;
        let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(spec.seed, "synthetic", index as u64));
    let size = spec.size;
    let sf = size as f32;

    let n_blobs = if spec.n_blobs.1 > spec.n_blobs.0 {
        rng.random_range(spec.n_blobs.0..=spec.n_blobs.1)
    } else {
        spec.n_blobs.0
    };
    let (smin, smax) = spec.blob_scale;
    let axis = |rng: &mut ChaCha8Rng| {
        let f = if smax > smin { rng.random_range(smin..smax) } else { smin };
        (f * sf).max(1.0)
    };
    let glands: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let a = axis(&mut rng);
            let b = axis(&mut rng);
            let theta = rng.random_range(0.0f32..std::f32::consts::PI);
            Ellipse {
                cy: rng.random_range(0.0..sf),
                cx: rng.random_range(0.0..sf),
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();

    // Nuclei sit in the epithelial rim of each gland.
    let mut nuclei: Vec<(f32, f32, f32)> = Vec::new();
    for g in &glands {
        let count = ((g.a + g.b) * 0.6) as usize + 3;
        for _ in 0..count {
            let t = rng.random_range(0.0f32..std::f32::consts::TAU);
            let r = rng.random_range(LUMEN_FRACTION + 0.1..0.95f32);
            let u = r * g.a * t.cos();
            let v = r * g.b * t.sin();
            let x = g.cx + u * g.cos - v * g.sin;
            let y = g.cy + u * g.sin + v * g.cos;
            nuclei.push((y, x, rng.random_range(0.8f32..1.8)));
        }
    }

    let jitter: [f32; 3] =
        std::array::from_fn(|_| 1.0 + spec.stain_jitter * rng.random_range(-1.0f32..1.0));
    let coarse = value_noise(&mut rng, size, 4);
    let fine = value_noise(&mut rng, size, (size / 6).max(2));
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).expect("non-negative sigma");

    let mut image = Array3::<f32>::zeros((3, size, size));
    let mut mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let r = glands
                .iter()
                .map(|g| g.radius(py, px))
                .fold(f32::INFINITY, f32::min);
            let tex = 0.06 * coarse[[y, x]] + 0.04 * fine[[y, x]];
            let base = if r <= 1.0 {
                mask[[y, x]] = 1;
                let in_nucleus = nuclei
                    .iter()
                    .any(|&(ny, nx, nr)| (py - ny).powi(2) + (px - nx).powi(2) <= nr * nr);
                if in_nucleus {
                    NUCLEUS
                } else if r < LUMEN_FRACTION {
                    LUMEN
                } else {
                    EPITHELIUM
                }
            } else {
                STROMA
            };
            for c in 0..3 {
                let v = base[c] * jitter[c] + tex + noise.sample(&mut rng);
                image[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }

    Sample {
        id: format!("syn_{index:04}"),
        image,
        mask: Some(mask),
    }
}

/// Generate `spec.n_images` labeled samples. Output depends only on `spec`.
pub fn generate_synthetic_glands(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.size < 32 {
        return Err(Error::Config(format!(
            "synthetic image size {} is below the 32-pixel minimum",
            spec.size
        )));
    }
    if spec.n_blobs.0 > spec.n_blobs.1 || spec.blob_scale.0 > spec.blob_scale.1 {
        return Err(Error::Config("synthetic ranges must be ordered (min, max)".into()));
    }
    if !(spec.noise_sigma >= 0.0) || spec.blob_scale.0 < 0.0 {
        return Err(Error::Config("synthetic noise and scales must be non-negative".into()));
    }
    Ok((0..spec.n_images).map(|i| generate_one(spec, i)).collect())
}
