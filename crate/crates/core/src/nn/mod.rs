//! Small building blocks on top of candle: named parameters, layers and
//! differentiable resampling.

mod layers;
mod params;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, Linear, Mode};
pub use params::{Param, ParamKind, ParamStore};

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// `[out_len, in_len]` bilinear interpolation weights with half-pixel centers.
pub fn interp_matrix(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let t = pos - i0 as f64;
        m[o * in_len + i0] += 1.0 - t;
        m[o * in_len + i1] += t;
    }
    m
}

fn interp_tensor(out_len: usize, in_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(interp_matrix(out_len, in_len), (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of `[B, C, h, w]` to `[B, C, oh, ow]`, written as two
/// matrix products so it is differentiable.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let rows = interp_tensor(oh, h, x.dtype(), x.device())?;
    let cols_t = interp_tensor(ow, w, x.dtype(), x.device())?.t()?.contiguous()?;
    let flat = x.reshape((b * c, h, w))?;
    let y = rows.broadcast_matmul(&flat)?.broadcast_matmul(&cols_t)?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Row-wise L2 normalization over the last axis, `x / max(||x||, eps)`.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(x.rank() - 1)?.sqrt()?;
    Ok(x.broadcast_div(&norm.maximum(eps)?)?)
}
