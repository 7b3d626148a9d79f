//! The full segmenter: frozen encoder, projections, decoder head and the two
//! alignment branches, with all parameters in one [`ParamStore`].

use candle_core::{Device, Tensor};
use ndarray::Array3;

use crate::align::{
    build_text_encoder, prototype_logits, text_logits, PixelProjector, PrototypeBank, TextBranch,
};
use crate::backbone::{build_encoder, BackboneFeatures, DeepLabHead, EncoderAdapter, FeatureProjector};
use crate::config::{AlignLossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_logits, FusionWeights};
use crate::nn::{Mode, ParamStore};

/// Logits of one forward pass. Alignment maps stay at feature resolution.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, C, H, W]`.
    pub s_dl: Tensor,
    /// `[B, C, H', W']`.
    pub s_zp: Option<Tensor>,
    pub s_zt: Option<Tensor>,
    /// Text embedding matrix used for `s_zt`, `[C, D]`.
    pub text: Option<Tensor>,
}

pub struct Segmenter {
    pub store: ParamStore,
    pub num_classes: usize,
    pub fusion: FusionWeights,
    pub temperature: f64,
    pub align_kind: AlignLossKind,
    encoder: Box<dyn EncoderAdapter>,
    projector: FeatureProjector,
    decoder: DeepLabHead,
    pixel_head: Option<PixelProjector>,
    prototypes: Option<PrototypeBank>,
    text: Option<TextBranch>,
}

impl Segmenter {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.data.num_classes;
        let d = cfg.align.embed_dim;
        let mut store = ParamStore::new(cfg.seed, cfg.precision.dtype(), device.clone());
        let encoder = build_encoder(&mut store, &cfg.encoder)?;
        let projector = FeatureProjector::new(&mut store, encoder.width(), &cfg.decoder)?;
        let decoder = DeepLabHead::new(&mut store, &cfg.decoder, c)?;
        let any_branch = cfg.align.use_prototype || cfg.align.use_text;
        let pixel_head = if any_branch {
            Some(PixelProjector::new(&mut store, cfg.decoder.high_channels, d)?)
        } else {
            None
        };
        let prototypes = if cfg.align.use_prototype {
            Some(PrototypeBank::new(&mut store, c, d)?)
        } else {
            None
        };
        let text = if cfg.align.use_text {
            if cfg.align.class_names.len() != c {
                return Err(Error::Config(format!(
                    "align.class_names has {} entries for {c} classes",
                    cfg.align.class_names.len()
                )));
            }
            let adapter = build_text_encoder(&mut store, &cfg.text_encoder)?;
            Some(TextBranch::new(
                &mut store,
                adapter,
                &cfg.align.class_names,
                cfg.align.num_context_tokens,
                d,
                cfg.align.context_init_std,
            )?)
        } else {
            None
        };
        Ok(Self {
            store,
            num_classes: c,
            fusion: cfg.fusion.clone().into(),
            temperature: cfg.align.temperature,
            align_kind: cfg.align.loss,
            encoder,
            projector,
            decoder,
            pixel_head,
            prototypes,
            text,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.encoder.patch_size()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn has_prototypes(&self) -> bool {
        self.prototypes.is_some()
    }

    pub fn has_text(&self) -> bool {
        self.text.is_some()
    }

    pub fn prototypes(&self) -> Option<&Tensor> {
        self.prototypes.as_ref().map(|p| p.p.as_tensor())
    }

    pub fn text_branch(&self) -> Option<&TextBranch> {
        self.text.as_ref()
    }

    /// Encoder taps through the 1x1 projections.
    pub fn features(&self, image: &Tensor) -> Result<BackboneFeatures> {
        let image = image.to_dtype(self.store.dtype())?;
        let (f2, f9) = self.encoder.encode(&image)?;
        self.projector.forward(&f2, &f9)
    }

    pub fn decode(&self, f_low: &Tensor, f_high: &Tensor, out_hw: (usize, usize), mode: Mode) -> Result<Tensor> {
        self.decoder.forward(f_low, f_high, out_hw, mode)
    }

    pub fn text_embeddings(&self) -> Result<Option<Tensor>> {
        self.text.as_ref().map(|t| t.encode()).transpose()
    }

    /// Prototype and text logit maps for already computed features.
    pub fn align_maps(
        &self,
        feats: &BackboneFeatures,
        text: Option<&Tensor>,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let Some(head) = &self.pixel_head else {
            return Ok((None, None));
        };
        let z = head.forward(&feats.f_high)?;
        let s_zp = self.prototypes().map(|p| prototype_logits(&z, p)).transpose()?;
        let s_zt = text.map(|t| text_logits(&z, t)).transpose()?;
        Ok((s_zp, s_zt))
    }

    pub fn forward_features(
        &self,
        feats: &BackboneFeatures,
        out_hw: (usize, usize),
        text: Option<&Tensor>,
        mode: Mode,
    ) -> Result<ModelOutput> {
        let s_dl = self.decode(&feats.f_low, &feats.f_high, out_hw, mode)?;
        let (s_zp, s_zt) = self.align_maps(feats, text)?;
        Ok(ModelOutput {
            s_dl,
            s_zp,
            s_zt,
            text: text.cloned(),
        })
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let (_, _, h, w) = image.dims4()?;
        let feats = self.features(image)?;
        let text = self.text_embeddings()?;
        let out = self.forward_features(&feats, (h, w), text.as_ref(), mode)?;
        if out.s_dl.dims() != [image.dim(0)?, self.num_classes, h, w] {
            return Err(Error::Shape(format!("decoder produced {:?}", out.s_dl.dims())));
        }
        Ok(out)
    }

    pub fn fused(&self, out: &ModelOutput) -> Result<Tensor> {
        fuse_logits(&out.s_dl, out.s_zp.as_ref(), out.s_zt.as_ref(), &self.fusion)
    }

    /// Eval-mode logits for prediction: `S_dl`, or `S_fuse` when `use_fused`.
    pub fn predict_logits(&self, image: &Tensor, use_fused: bool) -> Result<Tensor> {
        let out = self.forward(image, Mode::Eval)?;
        let logits = if use_fused { self.fused(&out)? } else { out.s_dl };
        Ok(logits.detach())
    }
}

/// Stack `[3, H, W]` arrays into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[Array3<f32>], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!("image {:?} differs from {:?}", img.dim(), (c, h, w))));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecoderConfig, EncoderConfig, Precision};

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig {
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        cfg.encoder = EncoderConfig {
            width: 32,
            ..EncoderConfig::default()
        };
        cfg.decoder = DecoderConfig {
            low_channels: 8,
            high_channels: 16,
            aspp_channels: 8,
            low_reduce: 4,
            head_channels: 8,
            ..DecoderConfig::default()
        };
        cfg.align.embed_dim = 8;
        cfg
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny_config();
        let m = Segmenter::new(&cfg, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 3, 32, 48), &Device::Cpu).unwrap();
        let out = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(out.s_dl.dims(), &[2, 2, 32, 48]);
        assert_eq!(out.s_zp.as_ref().unwrap().dims(), &[2, 2, 2, 3]);
        assert_eq!(out.s_zt.as_ref().unwrap().dims(), &[2, 2, 2, 3]);
        assert_eq!(out.text.as_ref().unwrap().dims(), &[2, 8]);
        assert_eq!(m.fused(&out).unwrap().dims(), &[2, 2, 32, 48]);
    }

    #[test]
    fn branch_toggles_remove_parameters() {
        let mut cfg = tiny_config();
        cfg.align.use_prototype = false;
        cfg.align.use_text = false;
        let m = Segmenter::new(&cfg, &Device::Cpu).unwrap();
        assert!(m.store.iter().all(|(n, _)| !n.starts_with("align.") && !n.starts_with("text.")));
        let x = Tensor::randn(0f64, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let out = m.forward(&x, Mode::Eval).unwrap();
        assert!(out.s_zp.is_none() && out.s_zt.is_none());
    }

    #[test]
    fn mismatched_class_names_are_rejected() {
        let mut cfg = tiny_config();
        cfg.align.class_names = vec!["only".into()];
        assert!(Segmenter::new(&cfg, &Device::Cpu).is_err());
    }
}
