use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// What a stored tensor is, which decides how the optimizer treats it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight: trained with weight decay.
    Weight,
    Bias,
    /// Normalization scale/shift.
    Norm,
    Prototype,
    Context,
    /// Part of a frozen pretrained component; never updated.
    Frozen,
    /// Non-trainable running statistic.
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::Frozen | ParamKind::Buffer)
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Prototype => "prototype",
            ParamKind::Context => "context",
            ParamKind::Frozen => "frozen",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm" => ParamKind::Norm,
            "prototype" => ParamKind::Prototype,
            "context" => ParamKind::Context,
            "frozen" => ParamKind::Frozen,
            "buffer" => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Every named tensor of a model, in creation order.
///
/// Initial values are drawn from a stream keyed by `(seed, name)`, so a
/// parameter's initialization does not depend on what was created before it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            entries: IndexMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, values: Tensor, kind: ParamKind) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&values.to_dtype(self.dtype)?)?;
        self.entries.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, kind: ParamKind) -> Result<Var> {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        let n = shape.iter().product::<usize>();
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, t, kind)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t, kind)
    }

    pub fn from_vec(&mut self, name: &str, shape: &[usize], values: Vec<f64>, kind: ParamKind) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, t, kind)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.iter().filter(|(_, p)| p.kind.is_trainable())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values in trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.var.elem_count()).sum()
    }
}
