use candle_core::{Tensor, Var};

use super::params::{ParamKind, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    kernel: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    /// Square kernel, stride 1, "same" padding (`dilation * (kernel - 1) / 2`).
    /// Weights use He-normal initialization over the fan-in.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_ch], 0.0, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let center_only = self.kernel > 1 && self.padding >= h && self.padding >= w;
        let y = if center_only {
            // Every off-center tap lands in the zero padding, so only the
            // center column of the kernel contributes.
            let c = self.kernel / 2;
            let w_center = self.weight.as_tensor().narrow(2, c, 1)?.narrow(3, c, 1)?;
            x.conv2d(&w_center, 0, 1, 1, 1)?
        } else {
            x.conv2d(self.weight.as_tensor(), self.padding, 1, self.dilation, 1)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0, ParamKind::Norm)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0, ParamKind::Norm)?,
            running_mean: store.constant(&format!("{name}.running_mean"), &[channels], 0.0, ParamKind::Buffer)?,
            running_var: store.constant(&format!("{name}.running_var"), &[channels], 1.0, ParamKind::Buffer)?,
            momentum,
            eps,
        })
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
                let mean = flat.mean_keepdim(1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(1)?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
                let m = self.momentum;
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        bn_momentum: f64,
        bn_eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, dilation, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch, bn_momentum, bn_eps)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// `y = x W^T (+ b)` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn from_vars(weight: Var, bias: Option<Var>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}
