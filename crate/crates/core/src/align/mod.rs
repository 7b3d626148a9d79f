//! Shared embedding space: normalized pixel embeddings compared by cosine
//! similarity against learnable class prototypes and prompt-derived text
//! embeddings.

mod text;

pub use text::{
    build_prompts, build_text_encoder, PromptTemplate, TextBranch, TextEncoderAdapter, ToyTextEncoder, BOS, EOT, PAD,
    PLACEHOLDER,
};

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Conv2d, ParamKind, ParamStore};

pub const NORM_EPS: f64 = 1e-8;

/// Unit-norm pixel embeddings `z` `[B, N, D]` on an `h x w` feature grid.
#[derive(Debug, Clone)]
pub struct PixelEmbeddings {
    pub z: Tensor,
    pub grid: (usize, usize),
}

/// 3x3 convolution from `f_high` to the embedding width.
#[derive(Debug, Clone)]
pub struct PixelProjector {
    pub conv: Conv2d,
}

impl PixelProjector {
    pub fn new(store: &mut ParamStore, in_ch: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, "align.pixel_head", in_ch, embed_dim, 3, 1, true)?,
        })
    }

    pub fn forward(&self, f_high: &Tensor) -> Result<PixelEmbeddings> {
        project_pixels(&self.conv, f_high)
    }
}

pub fn project_pixels(head: &Conv2d, f_high: &Tensor) -> Result<PixelEmbeddings> {
    let (b, _, h, w) = f_high.dims4()?;
    let e = head.forward(f_high)?;
    let d = e.dim(1)?;
    let z = e.reshape((b, d, h * w))?.transpose(1, 2)?;
    Ok(PixelEmbeddings {
        z: l2_normalize(&z, NORM_EPS)?,
        grid: (h, w),
    })
}

/// Learnable class prototypes `P` `[C, D]`.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub p: Var,
}

impl PrototypeBank {
    pub fn new(store: &mut ParamStore, num_classes: usize, embed_dim: usize) -> Result<Self> {
        let std = 1.0 / (embed_dim as f64).sqrt();
        Ok(Self {
            p: store.normal("align.prototypes", &[num_classes, embed_dim], std, ParamKind::Prototype)?,
        })
    }
}

/// `S[b, c] = z[b, n] . normalize(anchors)[c]`, reshaped to `[B, C, h, w]`.
pub fn cosine_logits(pixels: &PixelEmbeddings, anchors: &Tensor) -> Result<Tensor> {
    let (b, n, d) = pixels.z.dims3()?;
    let (c, da) = anchors.dims2()?;
    if d != da {
        return Err(Error::Shape(format!("pixel embeddings have width {d}, anchors {da}")));
    }
    let (h, w) = pixels.grid;
    if h * w != n {
        return Err(Error::Shape(format!("{n} embeddings do not fill a {h}x{w} grid")));
    }
    let a = l2_normalize(anchors, NORM_EPS)?;
    let s = pixels.z.broadcast_matmul(&a.t()?)?;
    Ok(s.transpose(1, 2)?.reshape((b, c, h, w))?)
}

pub fn prototype_logits(pixels: &PixelEmbeddings, prototypes: &Tensor) -> Result<Tensor> {
    cosine_logits(pixels, prototypes)
}

pub fn text_logits(pixels: &PixelEmbeddings, text: &Tensor) -> Result<Tensor> {
    cosine_logits(pixels, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn embeddings(rows: Vec<Vec<f64>>, grid: (usize, usize)) -> PixelEmbeddings {
        let n = rows.len();
        let d = rows[0].len();
        let t = Tensor::from_vec(rows.concat(), (1, n, d), &Device::Cpu).unwrap();
        PixelEmbeddings {
            z: l2_normalize(&t, NORM_EPS).unwrap(),
            grid,
        }
    }

    #[test]
    fn rows_are_unit_norm_and_shape_matches_grid() {
        let mut store = ParamStore::new(1, DType::F64, Device::Cpu);
        let head = PixelProjector::new(&mut store, 16, 8).unwrap();
        let f = Tensor::randn(0f64, 1., (2, 16, 4, 3), &Device::Cpu).unwrap();
        let z = head.forward(&f).unwrap();
        assert_eq!(z.z.dims(), &[2, 12, 8]);
        let norms = z.z.sqr().unwrap().sum(2).unwrap().sqrt().unwrap().flatten_all().unwrap();
        for v in norms.to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn self_similarity_is_one_and_orthogonal_is_zero() {
        let p = Tensor::new(&[[2.0f64, 0.0, 0.0], [0.0, 3.0, 0.0]], &Device::Cpu).unwrap();
        let z = embeddings(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 5.0]], (1, 2));
        let s = prototype_logits(&z, &p).unwrap();
        let v = s.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // Layout [B, C, 1, N]: class 0 then class 1.
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert_eq!(&v[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_hand_dot_products() {
        let p_raw = [[1.0f64, 2.0, 2.0], [0.0, -3.0, 4.0]];
        let z_raw = [[1.0f64, 1.0, 0.0], [0.5, -0.5, 1.0]];
        let p = Tensor::new(&p_raw, &Device::Cpu).unwrap();
        let z = embeddings(z_raw.iter().map(|r| r.to_vec()).collect(), (2, 1));
        let s = text_logits(&z, &p).unwrap();
        assert_eq!(s.dims(), &[1, 2, 2, 1]);
        let got = s.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let norm = |r: &[f64; 3]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..2 {
            for n in 0..2 {
                let dot: f64 = (0..3).map(|k| z_raw[n][k] * p_raw[c][k]).sum();
                let expect = dot / (norm(&z_raw[n]) * norm(&p_raw[c]));
                assert!((got[c * 2 + n] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototype_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let p = Var::from_tensor(&Tensor::new(&[[0.3f64, -0.7, 1.1], [0.9, 0.2, -0.4]], &dev).unwrap()).unwrap();
        let z = embeddings(vec![vec![1.0, 0.5, -0.2], vec![-0.3, 0.8, 0.6]], (1, 2));
        let weights = Tensor::new(&[[[[0.7f64, -1.3]], [[0.4, 2.0]]]], &dev).unwrap();
        let f = |p: &Tensor| {
            prototype_logits(&z, p).unwrap().mul(&weights).unwrap().sum_all().unwrap()
        };
        let grads = f(p.as_tensor()).backward().unwrap();
        let g = grads.get(p.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = p.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-3;
        for i in 0..base.len() {
            let shifted = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, (2, 3), &dev).unwrap();
                f(&t).to_scalar::<f64>().unwrap()
            };
            let num = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: analytic {} numeric {num}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn logits_bounded_and_scale_invariant(
            zs in proptest::collection::vec(-5.0f64..5.0, 12),
            ps in proptest::collection::vec(-5.0f64..5.0, 6),
            scale in 0.01f64..100.0,
        ) {
            let z = embeddings(zs.chunks(3).map(|c| c.to_vec()).collect(), (2, 2));
            let p = Tensor::from_vec(ps.clone(), (2, 3), &Device::Cpu).unwrap();
            let s = prototype_logits(&z, &p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            prop_assert!(s.iter().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
            let scaled = (p * scale).unwrap();
            let s2 = prototype_logits(&z, &scaled).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
