//! Prompt construction and the frozen text encoder interface.

use candle_core::{Tensor, Var, D};

use crate::backbone::layer_norm;
use crate::config::{TextEncoderConfig, TextEncoderKind};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::rng::fnv1a;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOT: u32 = 2;
/// Token id sitting at learnable context positions before substitution.
pub const PLACEHOLDER: u32 = 3;

/// A frozen text transformer with a CLIP-style token layout.
pub trait TextEncoderAdapter: Send + Sync {
    fn token_dim(&self) -> usize;
    fn text_dim(&self) -> usize;
    fn context_length(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    /// `[C, L]` ids to `[C, L, D_tok]` embeddings.
    fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor>;
    /// `[L, D_tok]`.
    fn positional(&self) -> Result<Tensor>;
    /// Frozen transformer stack; `[C, L, D_tok]` to `[C, L, D_hidden]`.
    fn transform(&self, x: &Tensor) -> Result<Tensor>;
    /// Frozen `W_clip`; `[C, D_hidden]` to `[C, D_text]`.
    fn clip_projection(&self, h: &Tensor) -> Result<Tensor>;
}

/// Token layout `[BOS][v1..vM][class tokens][EOT][PAD...]` for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub class_name: String,
    pub num_context: usize,
    pub token_ids: Vec<u32>,
    pub eot_index: usize,
}

pub fn build_prompts(
    class_names: &[String],
    num_context: usize,
    adapter: &dyn TextEncoderAdapter,
) -> Result<Vec<PromptTemplate>> {
    if class_names.is_empty() {
        return Err(Error::Config("at least one class name is required".into()));
    }
    let len = adapter.context_length();
    class_names
        .iter()
        .map(|name| {
            let words = adapter.tokenize(name);
            if words.is_empty() {
                return Err(Error::Config(format!("class name {name:?} has no tokens")));
            }
            if words.len() + num_context + 2 > len {
                return Err(Error::Config(format!(
                    "class name {name:?} needs {} tokens; at most {} fit with {num_context} context tokens",
                    words.len(),
                    len.saturating_sub(num_context + 2)
                )));
            }
            let mut ids = vec![BOS];
            ids.extend(std::iter::repeat_n(PLACEHOLDER, num_context));
            ids.extend(&words);
            ids.push(EOT);
            let eot_index = ids.len() - 1;
            ids.resize(len, PAD);
            Ok(PromptTemplate {
                class_name: name.clone(),
                num_context,
                token_ids: ids,
                eot_index,
            })
        })
        .collect()
}

/// Seeded random stand-in for a pretrained text tower: word-hash tokenizer,
/// token and position tables, one causal attention layer and a fixed
/// projection to `D_text`.
pub struct ToyTextEncoder {
    vocab: usize,
    token_dim: usize,
    text_dim: usize,
    context_length: usize,
    token_table: Tensor,
    position_table: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w_clip: Tensor,
}

impl ToyTextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &TextEncoderConfig) -> Result<Self> {
        if cfg.vocab_size <= PLACEHOLDER as usize + 1 {
            return Err(Error::Config("text_encoder.vocab_size must exceed the 4 reserved ids".into()));
        }
        let (v, d, l) = (cfg.vocab_size, cfg.token_dim, cfg.context_length);
        let frozen = |store: &mut ParamStore, name: &str, shape: &[usize], std: f64| -> Result<Tensor> {
            Ok(store
                .normal(&format!("text.{name}"), shape, std, ParamKind::Frozen)?
                .as_tensor()
                .detach())
        };
        let attn_std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            vocab: v,
            token_dim: d,
            text_dim: cfg.text_dim,
            context_length: l,
            token_table: frozen(store, "token_embedding", &[v, d], 0.02)?,
            position_table: frozen(store, "positional_embedding", &[l, d], 0.01)?,
            wq: frozen(store, "attn.wq", &[d, d], attn_std)?,
            wk: frozen(store, "attn.wk", &[d, d], attn_std)?,
            wv: frozen(store, "attn.wv", &[d, d], attn_std)?,
            wo: frozen(store, "attn.wo", &[d, d], attn_std)?,
            w_clip: frozen(store, "w_clip", &[d, cfg.text_dim], attn_std)?,
        })
    }
}

impl TextEncoderAdapter for ToyTextEncoder {
    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        let reserved = PLACEHOLDER as u64 + 1;
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| (reserved + fnv1a(w.to_lowercase().as_bytes()) % (self.vocab as u64 - reserved)) as u32)
            .collect()
    }

    fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (c, l) = ids.dims2()?;
        let flat = self.token_table.index_select(&ids.flatten_all()?, 0)?;
        Ok(flat.reshape((c, l, self.token_dim))?)
    }

    fn positional(&self) -> Result<Tensor> {
        Ok(self.position_table.clone())
    }

    fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let l = x.dim(1)?;
        let q = x.broadcast_matmul(&self.wq)?;
        let k = x.broadcast_matmul(&self.wk)?;
        let v = x.broadcast_matmul(&self.wv)?;
        let scores = (q.matmul(&k.t()?)? / (self.token_dim as f64).sqrt())?;
        let mask: Vec<f64> = (0..l * l)
            .map(|i| if i % l > i / l { -1e9 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, (l, l), x.device())?.to_dtype(x.dtype())?;
        let att = candle_nn::ops::softmax(&scores.broadcast_add(&mask)?, D::Minus1)?;
        let mixed = att.matmul(&v)?.broadcast_matmul(&self.wo)?;
        layer_norm(&(x + mixed)?, 1e-5)
    }

    fn clip_projection(&self, h: &Tensor) -> Result<Tensor> {
        Ok(h.matmul(&self.w_clip)?)
    }
}

pub fn build_text_encoder(store: &mut ParamStore, cfg: &TextEncoderConfig) -> Result<Box<dyn TextEncoderAdapter>> {
    match cfg.kind {
        TextEncoderKind::Toy => Ok(Box::new(ToyTextEncoder::new(store, cfg)?)),
        TextEncoderKind::Conch => Err(Error::Config(
            "text_encoder.kind = \"conch\" requires the external CONCH plugin, which is not bundled".into(),
        )),
    }
}

/// Learnable parts of the text branch: per-class context vectors and `W_proj`.
pub struct TextBranch {
    pub adapter: Box<dyn TextEncoderAdapter>,
    pub templates: Vec<PromptTemplate>,
    /// `[C, M, D_tok]`; absent when `M = 0`.
    pub context: Option<Var>,
    /// `[D, D_text]`, no bias.
    pub w_proj: Var,
}

impl TextBranch {
    pub fn new(
        store: &mut ParamStore,
        adapter: Box<dyn TextEncoderAdapter>,
        class_names: &[String],
        num_context: usize,
        embed_dim: usize,
        context_std: f64,
    ) -> Result<Self> {
        let templates = build_prompts(class_names, num_context, adapter.as_ref())?;
        let c = templates.len();
        let context = if num_context > 0 {
            Some(store.normal("align.context", &[c, num_context, adapter.token_dim()], context_std, ParamKind::Context)?)
        } else {
            None
        };
        let dt = adapter.text_dim();
        let eye: Vec<f64> = (0..embed_dim * dt)
            .map(|i| if i / dt == i % dt { 1.0 } else { 0.0 })
            .collect();
        let w_proj = store.from_vec("align.w_proj", &[embed_dim, dt], eye, ParamKind::Weight)?;
        Ok(Self {
            adapter,
            templates,
            context,
            w_proj,
        })
    }

    /// Text embedding matrix `T` `[C, D]`.
    pub fn encode(&self) -> Result<Tensor> {
        let device = self.w_proj.device();
        let c = self.templates.len();
        let l = self.adapter.context_length();
        let ids: Vec<u32> = self.templates.iter().flat_map(|t| t.token_ids.iter().copied()).collect();
        let ids = Tensor::from_vec(ids, (c, l), device)?;
        let dtype = self.w_proj.dtype();
        let emb = self.adapter.embed_tokens(&ids)?.to_dtype(dtype)?;
        let x = match &self.context {
            Some(ctx) => {
                let m = ctx.dims()[1];
                Tensor::cat(&[&emb.narrow(1, 0, 1)?, ctx.as_tensor(), &emb.narrow(1, 1 + m, l - 1 - m)?], 1)?
            }
            None => emb,
        };
        let x = x.broadcast_add(&self.adapter.positional()?.to_dtype(dtype)?)?;
        let h = self.adapter.transform(&x)?;
        let eot = Tensor::from_vec(
            self.templates.iter().map(|t| t.eot_index as u32).collect::<Vec<_>>(),
            (c, 1, 1),
            device,
        )?;
        let hd = h.dim(2)?;
        let h_eot = h.gather(&eot.broadcast_as((c, 1, hd))?.contiguous()?, 1)?.squeeze(1)?;
        let text = self.adapter.clip_projection(&h_eot)?;
        Ok(text.matmul(&self.w_proj.as_tensor().t()?)?)
    }
}
