//! Logit fusion, confidence-gated pseudo-labels and the EMA threshold.

use candle_core::{DType, Tensor};
use ndarray::Array2;

use crate::config::{FusionConfig, PseudoConfig};
use crate::error::{Error, Result};
use crate::nn::resize_bilinear;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub eta_p: f64,
    pub eta_t: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionConfig::default().into()
    }
}

impl From<FusionConfig> for FusionWeights {
    fn from(c: FusionConfig) -> Self {
        Self {
            eta_p: c.eta_p,
            eta_t: c.eta_t,
        }
    }
}

/// `S_dl + eta_p * up(S_zp) + eta_t * up(S_zt)`; absent branches contribute nothing.
pub fn fuse_logits(s_dl: &Tensor, s_zp: Option<&Tensor>, s_zt: Option<&Tensor>, w: &FusionWeights) -> Result<Tensor> {
    let (_, c, h, wd) = s_dl.dims4()?;
    let mut out = s_dl.clone();
    for (name, map, eta) in [("prototype", s_zp, w.eta_p), ("text", s_zt, w.eta_t)] {
        let Some(map) = map else { continue };
        let mc = map.dim(1)?;
        if mc != c {
            return Err(Error::Shape(format!("{name} logits have {mc} classes, decoder logits {c}")));
        }
        if eta == 0.0 {
            continue;
        }
        out = (out + (resize_bilinear(map, h, wd)? * eta)?)?;
    }
    Ok(out)
}

/// Per-image hard labels from the weak view, with their confidence gate.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Vec<Array2<u8>>,
    pub valid: Vec<Array2<bool>>,
    pub confidence: Vec<Array2<f32>>,
}

impl PseudoLabelMap {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().map(|v| v.iter().filter(|&&b| b).count()).sum()
    }

    pub fn pixel_count(&self) -> usize {
        self.valid.iter().map(|v| v.len()).sum()
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        let n = self.pixel_count();
        (n > 0).then(|| {
            self.confidence.iter().flat_map(|c| c.iter()).map(|&c| c as f64).sum::<f64>() / n as f64
        })
    }

    /// Labels with invalid pixels replaced by `ignore`, ready for a CE target.
    pub fn gated_targets(&self, ignore: u8) -> Vec<Array2<u8>> {
        self.labels
            .iter()
            .zip(&self.valid)
            .map(|(l, v)| {
                let mut t = l.clone();
                t.zip_mut_with(v, |x, &ok| {
                    if !ok {
                        *x = ignore
                    }
                });
                t
            })
            .collect()
    }
}

/// Softmax over classes, argmax labels, max-probability confidence and
/// `confidence >= tau` validity, per image of a `[B, C, H, W]` logit map.
pub fn generate_pseudo_labels(s_fuse: &Tensor, tau: f64) -> Result<PseudoLabelMap> {
    let (b, c, h, w) = s_fuse.dims4()?;
    if c > 256 {
        return Err(Error::Shape(format!("{c} classes do not fit u8 labels")));
    }
    let v = s_fuse.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logits while generating pseudo-labels".into()));
    }
    let hw = h * w;
    let mut out = PseudoLabelMap {
        labels: Vec::with_capacity(b),
        valid: Vec::with_capacity(b),
        confidence: Vec::with_capacity(b),
    };
    for bi in 0..b {
        let mut labels = Array2::<u8>::zeros((h, w));
        let mut valid = Array2::from_elem((h, w), false);
        let mut conf = Array2::<f32>::zeros((h, w));
        for p in 0..hw {
            let at = |k: usize| v[(bi * c + k) * hw + p];
            let (mut best, mut max) = (0, at(0));
            for k in 1..c {
                if at(k) > max {
                    best = k;
                    max = at(k);
                }
            }
            let denom: f64 = (0..c).map(|k| (at(k) - max).exp()).sum();
            let confidence = 1.0 / denom;
            let (y, x) = (p / w, p % w);
            labels[[y, x]] = best as u8;
            conf[[y, x]] = confidence as f32;
            valid[[y, x]] = confidence >= tau;
        }
        out.labels.push(labels);
        out.valid.push(valid);
        out.confidence.push(conf);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdState {
    pub tau: f64,
    pub alpha: f64,
    pub min: f64,
    pub max: f64,
}

impl ThresholdState {
    pub fn new(cfg: &PseudoConfig) -> Self {
        Self {
            tau: cfg.tau_init,
            alpha: cfg.ema_alpha,
            min: cfg.tau_clamp[0],
            max: cfg.tau_clamp[1],
        }
    }
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self::new(&PseudoConfig::default())
    }
}

/// `tau' = alpha * tau + (1 - alpha) * mean(confidences)`, clamped; an empty
/// batch leaves the state unchanged.
pub fn update_threshold(state: ThresholdState, confidences: &[f64]) -> ThresholdState {
    if confidences.is_empty() {
        return state;
    }
    let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
    update_threshold_with_mean(state, mean)
}

pub fn update_threshold_with_mean(state: ThresholdState, mean: f64) -> ThresholdState {
    let tau = (state.alpha * state.tau + (1.0 - state.alpha) * mean).clamp(state.min, state.max);
    ThresholdState { tau, ..state }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_weights_return_decoder_logits_exactly() {
        let dl = Tensor::randn(0f64, 1., (2, 2, 8, 8), &Device::Cpu).unwrap();
        let zp = Tensor::randn(0f64, 1., (2, 2, 2, 2), &Device::Cpu).unwrap();
        let w = FusionWeights { eta_p: 0.0, eta_t: 0.0 };
        let f = fuse_logits(&dl, Some(&zp), Some(&zp), &w).unwrap();
        assert_eq!(
            f.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            dl.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn single_pixel_hand_example() {
        let dl = t4(vec![2.0, 1.0], (1, 2, 1, 1));
        let zp = t4(vec![1.0, 0.0], (1, 2, 1, 1));
        let zt = t4(vec![0.0, 1.0], (1, 2, 1, 1));
        let f = fuse_logits(&dl, Some(&zp), Some(&zt), &FusionWeights::default()).unwrap();
        let v = f.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 2.1).abs() < 1e-7 && (v[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let dl = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let zp = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(fuse_logits(&dl, Some(&zp), None, &FusionWeights::default()).is_err());
    }

    #[test]
    fn confident_pixel_is_valid() {
        let pl = generate_pseudo_labels(&t4(vec![3.0, -3.0], (1, 2, 1, 1)), 0.7).unwrap();
        let sigma6 = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((pl.confidence[0][[0, 0]] as f64 - sigma6).abs() < 1e-6);
        assert_eq!(pl.labels[0][[0, 0]], 0);
        assert!(pl.valid[0][[0, 0]]);
        let tie = generate_pseudo_labels(&t4(vec![1.0, 1.0], (1, 2, 1, 1)), 0.7).unwrap();
        assert_eq!(tie.confidence[0][[0, 0]], 0.5);
        assert!(!tie.valid[0][[0, 0]]);
        let all = generate_pseudo_labels(&t4(vec![1.0, 1.0], (1, 2, 1, 1)), 0.0).unwrap();
        assert_eq!(all.valid_count(), 1);
    }

    #[test]
    fn threshold_updates() {
        let s = ThresholdState::default();
        assert_eq!(s.tau, 0.7);
        assert_eq!(update_threshold(s, &[0.7, 0.7]).tau, 0.7);
        assert_eq!(update_threshold(s, &[]), s);
        let fast = ThresholdState { alpha: 0.9, ..s };
        assert!((update_threshold(fast, &[0.9]).tau - 0.72).abs() < 1e-12);
        let low = update_threshold(ThresholdState { alpha: 0.0, ..s }, &[0.1]);
        assert_eq!(low.tau, 0.5);
    }

    #[test]
    fn threshold_converges_geometrically() {
        let mut s = ThresholdState { alpha: 0.9, ..ThresholdState::default() };
        for k in 1..=100 {
            s = update_threshold(s, &[0.8]);
            let expect = 0.8 - 0.1 * 0.9f64.powi(k);
            assert!((s.tau - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gate_is_monotone_in_tau(v in proptest::collection::vec(-4.0f64..4.0, 2 * 3 * 5 * 5)) {
            let logits = t4(v, (2, 3, 5, 5));
            let mut last = usize::MAX;
            for i in 0..20 {
                let tau = i as f64 / 19.0;
                let pl = generate_pseudo_labels(&logits, tau).unwrap();
                let n = pl.valid_count();
                prop_assert!(n <= last);
                last = n;
                for b in 0..2 {
                    for (c, ok) in pl.confidence[b].iter().zip(pl.valid[b].iter()) {
                        if *ok {
                            prop_assert!(*c as f64 >= tau - 1e-7);
                        }
                    }
                }
            }
        }

        #[test]
        fn fusion_is_linear_and_argmax_shift_invariant(
            v in proptest::collection::vec(-3.0f64..3.0, 2 * 4 * 4 + 2 * 2 * 2 * 2),
            a in -3.0f64..3.0,
            shift in -5.0f64..5.0,
        ) {
            let dl = t4(v[..32].to_vec(), (1, 2, 4, 4));
            let zp = t4(v[32..40].to_vec(), (1, 2, 2, 2));
            let zt = t4(v[40..].to_vec(), (1, 2, 2, 2));
            let w = FusionWeights::default();
            let f = fuse_logits(&dl, Some(&zp), Some(&zt), &w).unwrap();
            let scaled = fuse_logits(&(&dl * a).unwrap(), Some(&(&zp * a).unwrap()), Some(&(&zt * a).unwrap()), &w).unwrap();
            let lhs = scaled.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let rhs = (&f * a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let shifted = (&f + shift).unwrap();
            let l0 = generate_pseudo_labels(&f, 0.5).unwrap();
            let l1 = generate_pseudo_labels(&shifted, 0.5).unwrap();
            prop_assert_eq!(l0.labels, l1.labels);
        }
    }
}
