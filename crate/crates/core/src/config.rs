//! Run configuration.
//!
//! [`TrainConfig`] is the single source of truth for a run. It is layered:
//! built-in defaults, then any number of TOML files, then `dotted.key=value`
//! overrides. The resolved config is embedded in every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub crop: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Use the unlabeled split (weak-to-strong consistency). When false the
    /// run is purely supervised on the labeled split.
    pub semi_supervised: bool,
    pub precision: Precision,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub align: AlignConfig,
    pub text_encoder: TextEncoderConfig,
    pub fusion: FusionConfig,
    pub pseudo: PseudoConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 80,
            lr0: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            crop: 256,
            batch_labeled: 4,
            batch_unlabeled: 4,
            semi_supervised: true,
            precision: Precision::F32,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            align: AlignConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            fusion: FusionConfig::default(),
            pseudo: PseudoConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub ignore_index: u8,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            ignore_index: 255,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Seeded fixed random patch embedding plus two mixing layers.
    Toy,
    /// ViT-B/16 geometry; loads timm-format safetensors when `weights` is set.
    Uni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// 1-based transformer block indices for the low and high taps.
    pub taps: [usize; 2],
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub frozen: bool,
    pub weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            taps: [2, 9],
            patch_size: 16,
            width: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            frozen: true,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub low_channels: usize,
    pub high_channels: usize,
    pub aspp_channels: usize,
    /// Dilation rates of the three atrous branches (the 1x1 branch is implicit).
    pub aspp_rates: [usize; 3],
    pub low_reduce: usize,
    pub head_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            low_channels: 256,
            high_channels: 2048,
            aspp_channels: 256,
            aspp_rates: [6, 12, 18],
            low_reduce: 48,
            head_channels: 256,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignLossKind {
    None,
    Cosine,
    Kl,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub embed_dim: usize,
    pub num_context_tokens: usize,
    pub class_names: Vec<String>,
    pub temperature: f64,
    pub use_prototype: bool,
    pub use_text: bool,
    pub loss: AlignLossKind,
    pub context_init_std: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            num_context_tokens: 4,
            class_names: vec!["background tissue".into(), "gland".into()],
            temperature: 1.0,
            use_prototype: true,
            use_text: true,
            loss: AlignLossKind::Mse,
            context_init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEncoderKind {
    Toy,
    Conch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub kind: TextEncoderKind,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub text_dim: usize,
    pub context_length: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            kind: TextEncoderKind::Toy,
            vocab_size: 64,
            token_dim: 64,
            text_dim: 512,
            context_length: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub eta_p: f64,
    pub eta_t: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            eta_p: 0.1,
            eta_t: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub tau_init: f64,
    pub ema_alpha: f64,
    pub tau_clamp: [f64; 2],
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.7,
            ema_alpha: 0.999,
            tau_clamp: [0.5, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weights of the hard, soft and correlation unsupervised terms.
    pub lambda: [f64; 3],
    pub kl_stopgrad_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [0.5, 0.25, 0.25],
            kl_stopgrad_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
    pub color_jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub cutmix_prob: f64,
    pub cutmix_area: [f64; 2],
    pub cutmix_aspect: [f64; 2],
    pub feature_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.5, 2.0],
            flip_prob: 0.5,
            color_jitter_prob: 0.5,
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.5,
            hue: 0.25,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            cutmix_prob: 0.5,
            cutmix_area: [0.1, 0.5],
            cutmix_aspect: [0.5, 2.0],
            feature_dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Single,
    Sliding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: InferenceMode,
    pub window: usize,
    pub stride: usize,
    /// Predict from fused logits instead of decoder logits.
    pub use_fused: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Single,
            window: 256,
            stride: 171,
            use_fused: false,
        }
    }
}

impl TrainConfig {
    /// Defaults, then each file in order, then each `key=value` override.
    pub fn load_layered<P: AsRef<Path>>(files: &[P], overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default())
            .map_err(|e| Error::Config(format!("serialize defaults: {e}")))?;
        for file in files {
            let path = file.as_ref();
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, layer);
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: TrainConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `dotted.key=value` overrides on top of this config.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = toml::Value::try_from(self.clone())
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        for ov in overrides {
            apply_override(&mut value, ov.as_ref())?;
        }
        let cfg: TrainConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.data.num_classes < 2 {
            return bad(format!("data.num_classes must be >= 2, got {}", self.data.num_classes));
        }
        if (self.data.num_classes as u32) > self.data.ignore_index as u32 {
            return bad("data.ignore_index must exceed every class id".into());
        }
        if self.align.class_names.len() != self.data.num_classes {
            return bad(format!(
                "align.class_names has {} entries but data.num_classes = {}",
                self.align.class_names.len(),
                self.data.num_classes
            ));
        }
        if self.encoder.patch_size == 0 || self.crop % self.encoder.patch_size != 0 {
            return bad(format!(
                "crop {} must be a positive multiple of encoder.patch_size {}",
                self.crop, self.encoder.patch_size
            ));
        }
        let [lo, hi] = self.encoder.taps;
        if lo == 0 || hi == 0 || lo > hi {
            return bad(format!("encoder.taps must be 1-based and ordered, got {:?}", self.encoder.taps));
        }
        if self.encoder.kind == EncoderKind::Uni && hi > self.encoder.depth {
            return bad(format!("encoder tap {hi} exceeds depth {}", self.encoder.depth));
        }
        if self.encoder.kind == EncoderKind::Uni && self.encoder.width % self.encoder.heads != 0 {
            return bad("encoder.width must be divisible by encoder.heads".into());
        }
        if self.batch_labeled == 0 || (self.semi_supervised && self.batch_unlabeled == 0) {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr0 > 0.0) || self.epochs == 0 {
            return bad("lr0 and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.augment.feature_dropout) {
            return bad("augment.feature_dropout must lie in [0, 1)".into());
        }
        let [tmin, tmax] = self.pseudo.tau_clamp;
        if !(0.0 <= tmin && tmin <= tmax && tmax <= 1.0) {
            return bad(format!("pseudo.tau_clamp invalid: {:?}", self.pseudo.tau_clamp));
        }
        if !(0.0..=1.0).contains(&self.pseudo.ema_alpha) {
            return bad("pseudo.ema_alpha must lie in [0, 1]".into());
        }
        if !(self.align.temperature > 0.0) {
            return bad("align.temperature must be positive".into());
        }
        if self.eval.stride == 0 || self.eval.stride > self.eval.window {
            return bad("eval.stride must be in 1..=eval.window".into());
        }
        if self.eval.window % self.encoder.patch_size != 0 {
            return bad("eval.window must be a multiple of encoder.patch_size".into());
        }
        if self.text_encoder.kind == TextEncoderKind::Conch {
            return bad(
                "text_encoder.kind = \"conch\" needs an external adapter; this build ships only \"toy\""
                    .into(),
            );
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// Parse a `dotted.key=value` override; the value is read as a TOML value,
/// falling back to a bare string.
pub fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?;
    let leaf = parts[parts.len() - 1];
    // Integer literals overriding float fields would otherwise fail to deserialize.
    let parsed = match (table.get(leaf), parsed) {
        (Some(existing), new) => coerce_like(existing, new),
        (None, new) => new,
    };
    table.insert(leaf.to_string(), parsed);
    Ok(())
}

fn coerce_like(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::Array(old), toml::Value::Array(items)) => {
            let proto = old.first();
            toml::Value::Array(
                items
                    .into_iter()
                    .map(|v| match proto {
                        Some(p) => coerce_like(p, v),
                        None => v,
                    })
                    .collect(),
            )
        }
        (_, new) => new,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 80);
        assert_eq!(c.lr0, 0.001);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.crop, 256);
        assert_eq!(c.align.num_context_tokens, 4);
        assert_eq!(c.fusion.eta_p, 0.1);
        assert_eq!(c.fusion.eta_t, 0.1);
        assert_eq!(c.pseudo.tau_init, 0.7);
        assert_eq!(c.loss.lambda, [0.5, 0.25, 0.25]);
        assert_eq!(c.encoder.taps, [2, 9]);
        assert_eq!(c.align.embed_dim, 256);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_stable() {
        let c = TrainConfig::default();
        let text = c.to_toml_string().unwrap();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(c, back);
        assert_eq!(text, back.to_toml_string().unwrap());
    }

    #[test]
    fn overrides_parse_arrays_and_coerce_ints() {
        let c = TrainConfig::default()
            .with_overrides(&["loss.lambda=[1,0,0]", "fusion.eta_p=0", "align.use_text=false"])
            .unwrap();
        assert_eq!(c.loss.lambda, [1.0, 0.0, 0.0]);
        assert_eq!(c.fusion.eta_p, 0.0);
        assert!(!c.align.use_text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::default().with_overrides(&["fusion.eta_q=0.2"]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn class_names_must_match_class_count() {
        let err = TrainConfig::default()
            .with_overrides(&["align.class_names=[\"only\"]"])
            .unwrap_err();
        assert!(err.to_string().contains("class_names"));
    }

    #[test]
    fn layered_files_merge_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        std::fs::write(&a, "epochs = 3\n[fusion]\neta_p = 0.5\n").unwrap();
        std::fs::write(&b, "[fusion]\neta_t = 0.25\n").unwrap();
        let c = TrainConfig::load_layered(&[a, b], &["epochs=5".to_string()]).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.fusion.eta_p, 0.5);
        assert_eq!(c.fusion.eta_t, 0.25);
    }
}
