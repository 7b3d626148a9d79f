//! Image encoders that expose two intermediate token maps.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, D};

use crate::config::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::nn::{self, ParamKind, ParamStore};

/// A patch-based image encoder tapped at two depths.
///
/// Implementations return full token sequences (class token first); the
/// provided [`encode`](EncoderAdapter::encode) strips the class token and
/// folds the patch tokens back into `[B, width, H/p, W/p]` grids.
pub trait EncoderAdapter: Send + Sync {
    fn patch_size(&self) -> usize;
    fn width(&self) -> usize;
    /// 1-based block indices of the low and high taps.
    fn taps(&self) -> [usize; 2];
    fn is_frozen(&self) -> bool;

    /// Token sequences `[B, 1 + N, width]` at the low and high taps.
    fn tokens(&self, image: &Tensor) -> Result<(Tensor, Tensor)>;

    fn encode(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = image.dims4()?;
        let p = self.patch_size();
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 input channels, got {c}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by patch size {p}; pad the input to a multiple of {p}"
            )));
        }
        let (low, high) = self.tokens(image)?;
        let grid = |t: Tensor| -> Result<Tensor> {
            let (b, n, width) = t.dims3()?;
            if n != 1 + (h / p) * (w / p) {
                return Err(Error::Shape(format!("encoder produced {n} tokens for a {h}x{w} image")));
            }
            let t = t.narrow(1, 1, n - 1)?.transpose(1, 2)?.reshape((b, width, h / p, w / p))?;
            Ok(if self.is_frozen() { t.detach() } else { t })
        };
        Ok((grid(low)?, grid(high)?))
    }
}

fn kind_for(frozen: bool, trainable: ParamKind) -> ParamKind {
    if frozen {
        ParamKind::Frozen
    } else {
        trainable
    }
}

/// Layer norm over the last axis without learned affine terms.
pub(crate) fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

fn layer_norm_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm(x, eps)?.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

fn patchify(image: &Tensor, weight: &Tensor, bias: &Tensor, patch: usize) -> Result<Tensor> {
    let x = image.conv2d(weight, 0, patch, 1, 1)?;
    let x = x.broadcast_add(&bias.reshape((1, (), 1, 1))?)?;
    Ok(x.flatten_from(2)?.transpose(1, 2)?)
}

fn prepend_cls(tokens: &Tensor, cls: &Tensor) -> Result<Tensor> {
    let (b, _, width) = tokens.dims3()?;
    let cls = cls.reshape((1, 1, width))?.broadcast_as((b, 1, width))?;
    Ok(Tensor::cat(&[&cls, tokens], 1)?)
}

/// Fixed random stand-in for a pretrained ViT: a linear patch embedding and
/// two residual channel-mixing layers, tapped after each layer.
pub struct ToyEncoder {
    patch: usize,
    width: usize,
    taps: [usize; 2],
    frozen: bool,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    mix: [(Tensor, Tensor); 2],
}

impl ToyEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let (p, w) = (cfg.patch_size, cfg.width);
        let k = |t: ParamKind| kind_for(cfg.frozen, t);
        let fan_in = (3 * p * p) as f64;
        let patch_w = store.normal("encoder.patch.weight", &[w, 3, p, p], 1.0 / fan_in.sqrt(), k(ParamKind::Weight))?;
        let patch_b = store.normal("encoder.patch.bias", &[w], 0.1, k(ParamKind::Bias))?;
        let cls = store.normal("encoder.cls", &[w], 1.0, k(ParamKind::Bias))?;
        let mut layer = |i: usize| -> Result<(Tensor, Tensor)> {
            let wt = store.normal(&format!("encoder.mix{i}.weight"), &[w, w], 1.0 / (w as f64).sqrt(), k(ParamKind::Weight))?;
            let b = store.normal(&format!("encoder.mix{i}.bias"), &[w], 0.1, k(ParamKind::Bias))?;
            Ok((wt.as_tensor().clone(), b.as_tensor().clone()))
        };
        let mix = [layer(1)?, layer(2)?];
        let prep = |t: &candle_core::Var| if cfg.frozen { t.as_tensor().detach() } else { t.as_tensor().clone() };
        Ok(Self {
            patch: p,
            width: w,
            taps: cfg.taps,
            frozen: cfg.frozen,
            patch_w: prep(&patch_w),
            patch_b: prep(&patch_b),
            cls: prep(&cls),
            mix: if cfg.frozen {
                [(mix[0].0.detach(), mix[0].1.detach()), (mix[1].0.detach(), mix[1].1.detach())]
            } else {
                mix
            },
        })
    }

    fn mix_layer(&self, x: &Tensor, i: usize) -> Result<Tensor> {
        let (w, b) = &self.mix[i];
        let h = layer_norm(x, 1e-6)?.broadcast_matmul(&w.t()?)?.broadcast_add(b)?.tanh()?;
        Ok((x + h)?)
    }
}

impl EncoderAdapter for ToyEncoder {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn width(&self) -> usize {
        self.width
    }

    fn taps(&self) -> [usize; 2] {
        self.taps
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn tokens(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = patchify(image, &self.patch_w, &self.patch_b, self.patch)?;
        let x = prepend_cls(&x, &self.cls)?;
        let low = self.mix_layer(&x, 0)?;
        let high = self.mix_layer(&low, 1)?;
        Ok((low, high))
    }
}

struct VitBlock {
    norm1: (Tensor, Tensor),
    qkv: (Tensor, Tensor),
    proj: (Tensor, Tensor),
    norm2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
    layer_scale: Option<(Tensor, Tensor)>,
}

/// Standard pre-norm ViT (timm layout). With `weights` set, tensors are read
/// from a safetensors file using timm names; otherwise they are seeded random.
pub struct VitEncoder {
    patch: usize,
    width: usize,
    heads: usize,
    taps: [usize; 2],
    frozen: bool,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    /// `[1 + G*G, width]` for a square pretraining grid of side G.
    pos: Tensor,
    blocks: Vec<VitBlock>,
    norm_eps: f64,
}

struct WeightSource {
    loaded: Option<HashMap<String, Tensor>>,
}

impl WeightSource {
    fn fetch(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        shape: &[usize],
        std: f64,
        fill: Option<f64>,
        kind: ParamKind,
    ) -> Result<Tensor> {
        let key = format!("encoder.{name}");
        let var = match &mut self.loaded {
            Some(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| Error::Data(format!("encoder weights are missing tensor {name}")))?;
                let t = if t.dims() != shape && t.elem_count() == shape.iter().product::<usize>() {
                    t.reshape(shape)?
                } else {
                    t
                };
                if t.dims() != shape {
                    return Err(Error::Data(format!(
                        "encoder tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                store.insert(&key, t, kind)?
            }
            None => match fill {
                Some(v) => store.constant(&key, shape, v, kind)?,
                None => store.normal(&key, shape, std, kind)?,
            },
        };
        Ok(var.as_tensor().clone())
    }
}

impl VitEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, pretrain_grid: usize) -> Result<Self> {
        let loaded = match &cfg.weights {
            Some(path) => Some(load_safetensors(path)?),
            None => None,
        };
        let has_layer_scale = loaded
            .as_ref()
            .is_some_and(|m| m.contains_key("blocks.0.ls1.gamma"));
        let grid = match loaded.as_ref().and_then(|m| m.get("pos_embed")) {
            Some(t) => {
                let n = t.elem_count() / cfg.width;
                let g = ((n - 1) as f64).sqrt().round() as usize;
                if g * g + 1 != n {
                    return Err(Error::Data(format!("pos_embed has {n} tokens; expected 1 + G^2")));
                }
                g
            }
            None => pretrain_grid,
        };
        let mut src = WeightSource { loaded };
        let (p, w) = (cfg.patch_size, cfg.width);
        let hidden = w * cfg.mlp_ratio;
        let k = |t: ParamKind| kind_for(cfg.frozen, t);
        let lin_std = 0.02;

        let patch_w = src.fetch(store, "patch_embed.proj.weight", &[w, 3, p, p], lin_std, None, k(ParamKind::Weight))?;
        let patch_b = src.fetch(store, "patch_embed.proj.bias", &[w], 0.0, Some(0.0), k(ParamKind::Bias))?;
        let cls = src.fetch(store, "cls_token", &[1, 1, w], 0.02, None, k(ParamKind::Bias))?;
        let pos = src.fetch(store, "pos_embed", &[1, 1 + grid * grid, w], 0.02, None, k(ParamKind::Bias))?;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut pair = |name: &str, wshape: &[usize], bshape: &[usize], std: f64, wfill: Option<f64>, wkind: ParamKind| -> Result<(Tensor, Tensor)> {
                let wt = src.fetch(store, &format!("blocks.{i}.{name}.weight"), wshape, std, wfill, k(wkind))?;
                let b = src.fetch(store, &format!("blocks.{i}.{name}.bias"), bshape, 0.0, Some(0.0), k(if wkind == ParamKind::Norm { ParamKind::Norm } else { ParamKind::Bias }))?;
                Ok((wt, b))
            };
            let norm1 = pair("norm1", &[w], &[w], 0.0, Some(1.0), ParamKind::Norm)?;
            let qkv = pair("attn.qkv", &[3 * w, w], &[3 * w], lin_std, None, ParamKind::Weight)?;
            let proj = pair("attn.proj", &[w, w], &[w], lin_std, None, ParamKind::Weight)?;
            let norm2 = pair("norm2", &[w], &[w], 0.0, Some(1.0), ParamKind::Norm)?;
            let fc1 = pair("mlp.fc1", &[hidden, w], &[hidden], lin_std, None, ParamKind::Weight)?;
            let fc2 = pair("mlp.fc2", &[w, hidden], &[w], lin_std, None, ParamKind::Weight)?;
            let layer_scale = if has_layer_scale {
                Some((
                    src.fetch(store, &format!("blocks.{i}.ls1.gamma"), &[w], 0.0, Some(1.0), k(ParamKind::Norm))?,
                    src.fetch(store, &format!("blocks.{i}.ls2.gamma"), &[w], 0.0, Some(1.0), k(ParamKind::Norm))?,
                ))
            } else {
                None
            };
            blocks.push(VitBlock {
                norm1,
                qkv,
                proj,
                norm2,
                fc1,
                fc2,
                layer_scale,
            });
        }

        let detach = |t: Tensor| if cfg.frozen { t.detach() } else { t };
        let blocks = blocks
            .into_iter()
            .map(|b| VitBlock {
                norm1: (detach(b.norm1.0), detach(b.norm1.1)),
                qkv: (detach(b.qkv.0), detach(b.qkv.1)),
                proj: (detach(b.proj.0), detach(b.proj.1)),
                norm2: (detach(b.norm2.0), detach(b.norm2.1)),
                fc1: (detach(b.fc1.0), detach(b.fc1.1)),
                fc2: (detach(b.fc2.0), detach(b.fc2.1)),
                layer_scale: b.layer_scale.map(|(a, c)| (detach(a), detach(c))),
            })
            .collect();
        Ok(Self {
            patch: p,
            width: w,
            heads: cfg.heads,
            taps: cfg.taps,
            frozen: cfg.frozen,
            patch_w: detach(patch_w),
            patch_b: detach(patch_b),
            cls: detach(cls),
            pos: detach(pos.reshape((1 + grid * grid, w))?),
            blocks,
            norm_eps: 1e-6,
        })
    }

    /// Position embeddings resampled (bilinearly) to an `h x w` patch grid.
    fn positions(&self, h: usize, w: usize) -> Result<Tensor> {
        let n = self.pos.dim(0)?;
        let g = ((n - 1) as f64).sqrt().round() as usize;
        let cls_pos = self.pos.narrow(0, 0, 1)?;
        let grid = self
            .pos
            .narrow(0, 1, n - 1)?
            .t()?
            .reshape((1, self.width, g, g))?;
        let grid = nn::resize_bilinear(&grid, h, w)?
            .reshape((self.width, h * w))?
            .t()?;
        Ok(Tensor::cat(&[&cls_pos, &grid], 0)?)
    }

    fn block(&self, x: &Tensor, blk: &VitBlock) -> Result<Tensor> {
        let (b, t, w) = x.dims3()?;
        let hd = w / self.heads;
        let h = layer_norm_affine(x, &blk.norm1.0, &blk.norm1.1, self.norm_eps)?;
        let qkv = h.broadcast_matmul(&blk.qkv.0.t()?)?.broadcast_add(&blk.qkv.1)?;
        let qkv = qkv.reshape((b, t, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let kk = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&kk.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, w))?;
        let mut attn = out.broadcast_matmul(&blk.proj.0.t()?)?.broadcast_add(&blk.proj.1)?;
        if let Some((ls1, _)) = &blk.layer_scale {
            attn = attn.broadcast_mul(ls1)?;
        }
        let x = (x + attn)?;
        let h = layer_norm_affine(&x, &blk.norm2.0, &blk.norm2.1, self.norm_eps)?;
        let h = h.broadcast_matmul(&blk.fc1.0.t()?)?.broadcast_add(&blk.fc1.1)?.gelu_erf()?;
        let mut mlp = h.broadcast_matmul(&blk.fc2.0.t()?)?.broadcast_add(&blk.fc2.1)?;
        if let Some((_, ls2)) = &blk.layer_scale {
            mlp = mlp.broadcast_mul(ls2)?;
        }
        Ok((x + mlp)?)
    }
}

impl EncoderAdapter for VitEncoder {
    fn patch_size(&self) -> usize {
        self.patch
    }

    fn width(&self) -> usize {
        self.width
    }

    fn taps(&self) -> [usize; 2] {
        self.taps
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn tokens(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = image.dims4()?;
        let x = patchify(image, &self.patch_w, &self.patch_b, self.patch)?;
        let x = prepend_cls(&x, &self.cls)?;
        let mut x = x.broadcast_add(&self.positions(h / self.patch, w / self.patch)?)?;
        let [lo, hi] = self.taps;
        let mut low = None;
        for (i, blk) in self.blocks.iter().enumerate().take(hi) {
            x = self.block(&x, blk)?;
            if i + 1 == lo {
                low = Some(x.clone());
            }
        }
        let low = low.ok_or_else(|| Error::Config(format!("tap {lo} beyond encoder depth")))?;
        Ok((low, x))
    }
}

fn load_safetensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    let map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)
        .map_err(|e| Error::Data(format!("loading encoder weights {}: {e}", path.display())))?;
    map.into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(candle_core::DType::F64)?)))
        .collect()
}

pub fn build_encoder(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Box<dyn EncoderAdapter>> {
    Ok(match cfg.kind {
        EncoderKind::Toy => Box::new(ToyEncoder::new(store, cfg)?),
        // Pretraining resolution 224 with 16-pixel patches.
        EncoderKind::Uni => Box::new(VitEncoder::new(store, cfg, 224 / cfg.patch_size)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(11, DType::F32, Device::Cpu)
    }

    fn toy_cfg(width: usize) -> EncoderConfig {
        EncoderConfig {
            width,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn toy_taps_have_patch_grid_shape() {
        let mut s = store();
        let enc = ToyEncoder::new(&mut s, &toy_cfg(768)).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 3, 256, 256), &Device::Cpu).unwrap();
        let (f2, f9) = enc.encode(&x).unwrap();
        assert_eq!(f2.dims(), &[2, 768, 16, 16]);
        assert_eq!(f9.dims(), &[2, 768, 16, 16]);
        let small = Tensor::randn(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(enc.encode(&small).unwrap().0.dims(), &[1, 768, 4, 4]);
    }

    #[test]
    fn non_divisible_input_asks_for_padding() {
        let mut s = store();
        let enc = ToyEncoder::new(&mut s, &toy_cfg(32)).unwrap();
        let x = Tensor::zeros((1, 3, 40, 48), DType::F32, &Device::Cpu).unwrap();
        let err = enc.encode(&x).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn toy_weights_are_seed_determined() {
        let mut a = store();
        let mut b = store();
        ToyEncoder::new(&mut a, &toy_cfg(32)).unwrap();
        ToyEncoder::new(&mut b, &toy_cfg(32)).unwrap();
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            let va = pa.var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let vb = pb.var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(va, vb);
        }
        assert!(a.iter().all(|(_, p)| p.kind == ParamKind::Frozen));
        assert_eq!(a.trainable_count(), 0);
    }

    #[test]
    fn zero_images_give_identical_bias_response() {
        let mut s = store();
        let enc = ToyEncoder::new(&mut s, &toy_cfg(32)).unwrap();
        let z = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let (_, f9) = enc.encode(&z).unwrap();
        let v = f9.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let per_image = v.len() / 2;
        assert_eq!(v[..per_image], v[per_image..]);
        // Every patch sees the same zero input, so every position matches.
        let f = f9.get(0).unwrap().flatten_from(1).unwrap().to_vec2::<f32>().unwrap();
        for row in f {
            assert!(row.iter().all(|&x| x == row[0]));
        }
    }

    #[test]
    fn random_input_gives_nonzero_variance() {
        let mut s = store();
        let enc = ToyEncoder::new(&mut s, &toy_cfg(64)).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let (_, f9) = enc.encode(&x).unwrap();
        let v = f9.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / v.len() as f32;
        assert!(var > 1e-3, "variance {var}");
    }

    #[test]
    fn vit_taps_follow_block_indices() {
        let mut s = store();
        let cfg = EncoderConfig {
            kind: EncoderKind::Uni,
            width: 32,
            depth: 3,
            heads: 4,
            taps: [1, 3],
            ..EncoderConfig::default()
        };
        let enc = VitEncoder::new(&mut s, &cfg, 4).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 48, 32), &Device::Cpu).unwrap();
        let (low, high) = enc.encode(&x).unwrap();
        assert_eq!(low.dims(), &[1, 32, 3, 2]);
        assert_eq!(high.dims(), &[1, 32, 3, 2]);
        let (again, _) = enc.encode(&x).unwrap();
        assert_eq!(
            low.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn vit_loads_timm_safetensors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig {
            kind: EncoderKind::Uni,
            width: 16,
            depth: 2,
            heads: 2,
            taps: [1, 2],
            ..EncoderConfig::default()
        };
        // Export a randomly initialized encoder under timm names and reload it.
        let mut s = ParamStore::new(5, DType::F32, Device::Cpu);
        VitEncoder::new(&mut s, &cfg, 2).unwrap();
        let tensors: HashMap<String, Tensor> = s
            .iter()
            .map(|(n, p)| (n.trim_start_matches("encoder.").to_string(), p.var.as_tensor().clone()))
            .collect();
        let path = dir.path().join("vit.safetensors");
        candle_core::safetensors::save(&tensors, &path).unwrap();

        let mut s2 = ParamStore::new(99, DType::F32, Device::Cpu);
        let loaded = VitEncoder::new(&mut s2, &EncoderConfig { weights: Some(path), ..cfg.clone() }, 7).unwrap();
        let mut s3 = ParamStore::new(5, DType::F32, Device::Cpu);
        let original = VitEncoder::new(&mut s3, &cfg, 2).unwrap();
        let x = Tensor::randn(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let a = loaded.encode(&x).unwrap().1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = original.encode(&x).unwrap().1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
