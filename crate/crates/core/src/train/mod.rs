//! Weak-to-strong semi-supervised training.
//!
//! Each step: supervised losses on a labeled batch; a weak-view forward on
//! an unlabeled batch whose fused logits give gated pseudo-labels; CutMix of
//! strong views and pseudo-labels; hard CE and KL on the strong view; CE on
//! the feature-perturbed weak view; SGD on `(L_sup + L_unsup) / 2`; EMA
//! update of the confidence threshold.

mod batch;
mod optim;
mod trainer;

pub use batch::BatchSampler;
pub use optim::{poly_lr, Sgd};
pub use trainer::{
    build_teacher, supervised_objective, unsupervised_objective, LabeledBatch, StepReport, Teacher, Trainer,
    UnlabeledViews,
};

/// Mean of each loss component over a set of steps.
pub fn mean_report(steps: &[StepReport]) -> crate::objectives::LossReport {
    use crate::objectives::LossReport;
    let n = steps.len().max(1) as f64;
    let mut m = LossReport::default();
    for s in steps {
        let l = &s.loss;
        m.total += l.total / n;
        m.sup.dl += l.sup.dl / n;
        m.sup.proto += l.sup.proto / n;
        m.sup.text += l.sup.text / n;
        m.sup.align += l.sup.align / n;
        m.unsup.hard += l.unsup.hard / n;
        m.unsup.soft += l.unsup.soft / n;
        m.unsup.corr += l.unsup.corr / n;
        m.valid_pixel_fraction += l.valid_pixel_fraction / n;
        m.lambda = l.lambda;
    }
    m
}
