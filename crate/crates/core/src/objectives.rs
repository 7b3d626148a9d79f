//! Loss terms and the overall training objective.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::log_softmax;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align::NORM_EPS;
use crate::config::AlignLossKind;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, resize_bilinear};

/// One-hot encoded targets with ignored pixels zeroed out.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[B, C, H, W]`; all-zero over classes where the pixel is ignored.
    pub onehot: Tensor,
    pub count: usize,
    pub shape: (usize, usize, usize),
}

impl Targets {
    pub fn new(labels: &[Array2<u8>], num_classes: usize, ignore: u8, dtype: DType, device: &Device) -> Result<Self> {
        let b = labels.len();
        if b == 0 {
            return Err(Error::Shape("empty target batch".into()));
        }
        let (h, w) = labels[0].dim();
        let hw = h * w;
        let mut data = vec![0f64; b * num_classes * hw];
        let mut count = 0;
        for (bi, lab) in labels.iter().enumerate() {
            if lab.dim() != (h, w) {
                return Err(Error::Shape(format!("target {bi} is {:?}, expected {:?}", lab.dim(), (h, w))));
            }
            for (p, &y) in lab.iter().enumerate() {
                if y == ignore {
                    continue;
                }
                if y as usize >= num_classes {
                    return Err(Error::Data(format!(
                        "target value {y} outside 0..{num_classes} (and not the ignore value {ignore})"
                    )));
                }
                data[(bi * num_classes + y as usize) * hw + p] = 1.0;
                count += 1;
            }
        }
        Ok(Self {
            onehot: Tensor::from_vec(data, (b, num_classes, h, w), device)?.to_dtype(dtype)?,
            count,
            shape: (b, h, w),
        })
    }
}

/// A masked mean together with the number of pixels it averages over.
#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub value: Tensor,
    pub count: usize,
}

impl MaskedLoss {
    /// True when every pixel was ignored and the loss is the constant 0.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Mean cross-entropy over non-ignored pixels; 0 (flagged empty) if none remain.
pub fn ce_ignore(logits: &Tensor, targets: &Targets) -> Result<MaskedLoss> {
    let (b, c, h, w) = logits.dims4()?;
    if targets.onehot.dims() != [b, c, h, w] {
        return Err(Error::Shape(format!(
            "logits {:?} do not match targets {:?}",
            logits.dims(),
            targets.onehot.dims()
        )));
    }
    if targets.count == 0 {
        return Ok(MaskedLoss {
            value: Tensor::zeros((), logits.dtype(), logits.device())?,
            count: 0,
        });
    }
    let nll = log_softmax(logits, 1)?.mul(&targets.onehot)?.sum_all()?.neg()?;
    Ok(MaskedLoss {
        value: (nll / targets.count as f64)?,
        count: targets.count,
    })
}

/// Convenience wrapper building [`Targets`] from label maps.
pub fn ce_ignore_labels(logits: &Tensor, labels: &[Array2<u8>], ignore: u8) -> Result<MaskedLoss> {
    let t = Targets::new(labels, logits.dim(1)?, ignore, logits.dtype(), logits.device())?;
    ce_ignore(logits, &t)
}

/// Mean over pixels of `KL(softmax(strong) || softmax(target))`.
pub fn kl_consistency(strong: &Tensor, target: &Tensor, stop_grad_target: bool) -> Result<Tensor> {
    if strong.dims() != target.dims() {
        return Err(Error::Shape(format!("KL inputs {:?} vs {:?}", strong.dims(), target.dims())));
    }
    let target = if stop_grad_target { target.detach() } else { target.clone() };
    let (b, _, h, w) = strong.dims4()?;
    let log_s = log_softmax(strong, 1)?;
    let log_t = log_softmax(&target, 1)?;
    let kl = log_s.exp()?.mul(&(log_s - log_t)?)?.sum_all()?;
    Ok((kl / (b * h * w) as f64)?)
}

/// Discrepancy between normalized prototypes and text embeddings, both `[C, D]`.
pub fn alignment_loss(p: &Tensor, t: &Tensor, kind: AlignLossKind) -> Result<Tensor> {
    if p.dims() != t.dims() {
        return Err(Error::Shape(format!("prototypes {:?} vs text {:?}", p.dims(), t.dims())));
    }
    let np = l2_normalize(p, NORM_EPS)?;
    let nt = l2_normalize(t, NORM_EPS)?;
    Ok(match kind {
        AlignLossKind::None => Tensor::zeros((), p.dtype(), p.device())?,
        AlignLossKind::Mse => (np - nt)?.sqr()?.mean_all()?,
        AlignLossKind::Cosine => (1.0 - np.mul(&nt)?.sum(D::Minus1)?)?.mean_all()?,
        // Per class, KL between softmax distributions over embedding dims.
        AlignLossKind::Kl => {
            let lp = log_softmax(&np, D::Minus1)?;
            let lt = log_softmax(&nt, D::Minus1)?;
            lp.exp()?.mul(&(lp - lt)?)?.sum(D::Minus1)?.mean_all()?
        }
    })
}

/// Upsample a feature-resolution logit map to the label size and apply a temperature.
pub fn align_logits_for_ce(map: &Tensor, out_hw: (usize, usize), temperature: f64) -> Result<Tensor> {
    let up = resize_bilinear(map, out_hw.0, out_hw.1)?;
    Ok(if temperature == 1.0 { up } else { (up / temperature)? })
}

#[derive(Debug, Clone)]
pub struct SupervisedTerms {
    pub dl: MaskedLoss,
    pub proto: Option<MaskedLoss>,
    pub text: Option<MaskedLoss>,
    pub align: Option<Tensor>,
}

impl SupervisedTerms {
    pub fn sum(&self) -> Result<Tensor> {
        let mut s = self.dl.value.clone();
        for t in [&self.proto, &self.text].into_iter().flatten() {
            s = (s + &t.value)?;
        }
        if let Some(a) = &self.align {
            s = (s + a)?;
        }
        Ok(s)
    }
}

/// Inputs to the supervised objective; alignment maps are at feature resolution.
pub struct SupervisedInputs<'a> {
    pub s_dl: &'a Tensor,
    pub s_zp: Option<&'a Tensor>,
    pub s_zt: Option<&'a Tensor>,
    pub prototypes: Option<&'a Tensor>,
    pub text: Option<&'a Tensor>,
    pub temperature: f64,
    pub align_kind: AlignLossKind,
}

pub fn supervised_loss(inp: &SupervisedInputs, targets: &Targets) -> Result<SupervisedTerms> {
    let (_, _, h, w) = inp.s_dl.dims4()?;
    let aligned = |m: Option<&Tensor>| -> Result<Option<MaskedLoss>> {
        m.map(|m| ce_ignore(&align_logits_for_ce(m, (h, w), inp.temperature)?, targets))
            .transpose()
    };
    let align = match (inp.prototypes, inp.text, inp.align_kind) {
        (_, _, AlignLossKind::None) => None,
        (Some(p), Some(t), kind) => Some(alignment_loss(p, t, kind)?),
        _ => None,
    };
    Ok(SupervisedTerms {
        dl: ce_ignore(inp.s_dl, targets)?,
        proto: aligned(inp.s_zp)?,
        text: aligned(inp.s_zt)?,
        align,
    })
}

#[derive(Debug, Clone)]
pub struct UnsupervisedTerms {
    pub hard: MaskedLoss,
    pub soft: Tensor,
    pub corr: MaskedLoss,
}

impl UnsupervisedTerms {
    pub fn weighted_sum(&self, lambda: [f64; 3]) -> Result<Tensor> {
        Ok((((&self.hard.value * lambda[0])? + (&self.soft * lambda[1])?)? + (&self.corr.value * lambda[2])?)?)
    }
}

/// Hard CE of the strong view against gated pseudo-labels, KL of the strong
/// view to the (mixed) weak logits, and CE of the feature-perturbed weak view.
pub fn unsupervised_loss(
    strong: &Tensor,
    weak_target: &Tensor,
    perturbed: &Tensor,
    strong_targets: &Targets,
    weak_targets: &Targets,
    stop_grad_target: bool,
) -> Result<UnsupervisedTerms> {
    Ok(UnsupervisedTerms {
        hard: ce_ignore(strong, strong_targets)?,
        soft: kl_consistency(strong, weak_target, stop_grad_target)?,
        corr: ce_ignore(perturbed, weak_targets)?,
    })
}

pub fn total_loss(sup: &Tensor, unsup: &Tensor) -> Result<Tensor> {
    Ok(((sup + unsup)? * 0.5)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SupReport {
    pub dl: f64,
    pub proto: f64,
    pub text: f64,
    pub align: f64,
}

impl SupReport {
    pub fn sum(&self) -> f64 {
        self.dl + self.proto + self.text + self.align
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UnsupReport {
    pub hard: f64,
    pub soft: f64,
    pub corr: f64,
}

impl UnsupReport {
    pub fn weighted(&self, lambda: [f64; 3]) -> f64 {
        lambda[0] * self.hard + lambda[1] * self.soft + lambda[2] * self.corr
    }
}

/// Scalar values of every loss component for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sup: SupReport,
    pub unsup: UnsupReport,
    pub lambda: [f64; 3],
    pub valid_pixel_fraction: f64,
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossReport {
    pub fn from_terms(
        total: &Tensor,
        sup: &SupervisedTerms,
        unsup: Option<&UnsupervisedTerms>,
        lambda: [f64; 3],
        valid_pixel_fraction: f64,
    ) -> Result<Self> {
        let opt = |m: &Option<MaskedLoss>| -> Result<f64> { m.as_ref().map(|m| scalar(&m.value)).unwrap_or(Ok(0.0)) };
        let sup = SupReport {
            dl: scalar(&sup.dl.value)?,
            proto: opt(&sup.proto)?,
            text: opt(&sup.text)?,
            align: sup.align.as_ref().map(scalar).unwrap_or(Ok(0.0))?,
        };
        let unsup = match unsup {
            Some(u) => UnsupReport {
                hard: scalar(&u.hard.value)?,
                soft: scalar(&u.soft)?,
                corr: scalar(&u.corr.value)?,
            },
            None => UnsupReport::default(),
        };
        Ok(Self {
            total: scalar(total)?,
            sup,
            unsup,
            lambda,
            valid_pixel_fraction,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.sup.dl,
            self.sup.proto,
            self.sup.text,
            self.sup.align,
            self.unsup.hard,
            self.unsup.soft,
            self.unsup.corr,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
