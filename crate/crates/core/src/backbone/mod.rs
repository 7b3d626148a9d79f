//! Visual segmentation backbone: a frozen patch encoder tapped at two depths,
//! 1x1 projections and a DeepLabV3+ head producing decoder logits.

mod decoder;
mod encoder;

pub use decoder::{Aspp, BackboneFeatures, DeepLabHead, FeatureProjector};
pub use encoder::{build_encoder, EncoderAdapter, ToyEncoder, VitEncoder};
#[allow(unused_imports)]
pub(crate) use encoder::layer_norm;
