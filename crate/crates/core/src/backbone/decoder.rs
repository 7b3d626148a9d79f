//! DeepLabV3+ style head on top of two same-resolution feature maps.

use candle_core::Tensor;

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvBnRelu, Mode, ParamStore};

/// 1x1 projections from encoder width to the low/high decoder inputs.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    pub low: Conv2d,
    pub high: Conv2d,
}

/// Projected encoder features: `f_low` `[B, 256, H', W']`, `f_high` `[B, 2048, H', W']`
/// with the default widths.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    pub f_low: Tensor,
    pub f_high: Tensor,
}

impl FeatureProjector {
    pub fn new(store: &mut ParamStore, width: usize, cfg: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            low: Conv2d::new(store, "proj.low", width, cfg.low_channels, 1, 1, true)?,
            high: Conv2d::new(store, "proj.high", width, cfg.high_channels, 1, 1, true)?,
        })
    }

    pub fn forward(&self, f2: &Tensor, f9: &Tensor) -> Result<BackboneFeatures> {
        let expect = self.low.weight.dims()[1];
        for (name, f) in [("F2", f2), ("F9", f9)] {
            let c = f.dim(1)?;
            if c != expect {
                return Err(Error::Shape(format!("{name} has {c} channels, projection expects {expect}")));
            }
        }
        Ok(BackboneFeatures {
            f_low: self.low.forward(f2)?,
            f_high: self.high.forward(f9)?,
        })
    }
}

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3
/// branches, an image-pooling branch, then a 1x1 projection.
#[derive(Debug, Clone)]
pub struct Aspp {
    pointwise: ConvBnRelu,
    atrous: Vec<ConvBnRelu>,
    pool: Conv2d,
    project: ConvBnRelu,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        let (inc, c) = (cfg.high_channels, cfg.aspp_channels);
        let (m, e) = (cfg.bn_momentum, cfg.bn_eps);
        let pointwise = ConvBnRelu::new(store, "aspp.b0", inc, c, 1, 1, m, e)?;
        let atrous = cfg
            .aspp_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| ConvBnRelu::new(store, &format!("aspp.b{}", i + 1), inc, c, 3, rate, m, e))
            .collect::<Result<Vec<_>>>()?;
        // No batch norm on the pooled branch: with one pooled value per image
        // a batch of one has zero variance.
        let pool = Conv2d::new(store, "aspp.pool", inc, c, 1, 1, true)?;
        let project = ConvBnRelu::new(store, "aspp.project", 5 * c, c, 1, 1, m, e)?;
        Ok(Self {
            pointwise,
            atrous,
            pool,
            project,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let mut branches = vec![self.pointwise.forward(x, mode)?];
        for br in &self.atrous {
            branches.push(br.forward(x, mode)?);
        }
        let pooled = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let pooled = self.pool.forward(&pooled)?.relu()?;
        branches.push(pooled.broadcast_as((b, pooled.dim(1)?, h, w))?.contiguous()?);
        let cat = Tensor::cat(&branches, 1)?;
        self.project.forward(&cat, mode)
    }
}

#[derive(Debug, Clone)]
pub struct DeepLabHead {
    aspp: Aspp,
    reduce: ConvBnRelu,
    fuse1: ConvBnRelu,
    fuse2: ConvBnRelu,
    pub classifier: Conv2d,
}

impl DeepLabHead {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, num_classes: usize) -> Result<Self> {
        let (m, e) = (cfg.bn_momentum, cfg.bn_eps);
        Ok(Self {
            aspp: Aspp::new(store, cfg)?,
            reduce: ConvBnRelu::new(store, "decoder.reduce", cfg.low_channels, cfg.low_reduce, 1, 1, m, e)?,
            fuse1: ConvBnRelu::new(
                store,
                "decoder.fuse1",
                cfg.aspp_channels + cfg.low_reduce,
                cfg.head_channels,
                3,
                1,
                m,
                e,
            )?,
            fuse2: ConvBnRelu::new(store, "decoder.fuse2", cfg.head_channels, cfg.head_channels, 3, 1, m, e)?,
            classifier: Conv2d::new(store, "decoder.classifier", cfg.head_channels, num_classes, 1, 1, true)?,
        })
    }

    /// Class logits at `out_hw`.
    pub fn forward(&self, f_low: &Tensor, f_high: &Tensor, out_hw: (usize, usize), mode: Mode) -> Result<Tensor> {
        let (_, _, lh, lw) = f_low.dims4()?;
        let mut high = self.aspp.forward(f_high, mode)?;
        if high.dims()[2..] != [lh, lw] {
            high = nn::resize_bilinear(&high, lh, lw)?;
        }
        let low = self.reduce.forward(f_low, mode)?;
        let x = Tensor::cat(&[&high, &low], 1)?;
        let x = self.fuse2.forward(&self.fuse1.forward(&x, mode)?, mode)?;
        let logits = self.classifier.forward(&x)?;
        nn::resize_bilinear(&logits, out_hw.0, out_hw.1)
    }
}
