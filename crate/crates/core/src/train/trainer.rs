use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::augment::{
    feature_perturb, mix_images, mix_maps, mix_tensor, sample_cutmix_plans, standardize, view_pair, weak_augment,
    CutMixPlan,
};
use crate::backbone::BackboneFeatures;
use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{generate_pseudo_labels, update_threshold_with_mean, PseudoLabelMap, ThresholdState};
use crate::model::{images_to_tensor, Segmenter};
use crate::nn::Mode;
use crate::objectives::{
    supervised_loss, total_loss, unsupervised_loss, LossReport, SupervisedInputs, SupervisedTerms, Targets,
    UnsupervisedTerms,
};
use crate::rng::derive_seed_indexed;

use super::batch::BatchSampler;
use super::optim::{poly_lr, Sgd};

/// Standardized labeled crops and their one-hot targets.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub targets: Targets,
}

/// Weak and strong views of unlabeled crops, sharing one geometry per image.
#[derive(Debug, Clone)]
pub struct UnlabeledViews {
    pub weak: Tensor,
    pub strong: Vec<Array3<f32>>,
}

/// Everything derived from the weak view without gradient: pseudo-labels,
/// the CutMix plan and the mixed targets for the strong view.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub pseudo: PseudoLabelMap,
    pub plans: Vec<CutMixPlan>,
    /// Mixed strong images, `[B, 3, H, W]`.
    pub strong_images: Tensor,
    /// Gated pseudo-labels after mixing, for the strong view.
    pub strong_targets: Targets,
    /// Gated pseudo-labels as generated, for the perturbed weak view.
    pub weak_targets: Targets,
    /// Weak decoder logits mixed like the strong view; the KL target.
    pub weak_logits_mixed: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: LossReport,
}

pub fn supervised_objective(model: &Segmenter, batch: &LabeledBatch, text: Option<&Tensor>) -> Result<SupervisedTerms> {
    let (_, _, h, w) = batch.images.dims4()?;
    let feats = model.features(&batch.images)?;
    let out = model.forward_features(&feats, (h, w), text, Mode::Train)?;
    supervised_loss(
        &SupervisedInputs {
            s_dl: &out.s_dl,
            s_zp: out.s_zp.as_ref(),
            s_zt: out.s_zt.as_ref(),
            prototypes: model.prototypes(),
            text,
            temperature: model.temperature,
            align_kind: model.align_kind,
        },
        &batch.targets,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn build_teacher(
    model: &Segmenter,
    weak_feats: &BackboneFeatures,
    views: &UnlabeledViews,
    text: Option<&Tensor>,
    tau: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Teacher> {
    let (b, _, h, w) = views.weak.dims4()?;
    let out = model.forward_features(weak_feats, (h, w), text, Mode::Train)?;
    let fused = model.fused(&out)?.detach();
    let pseudo = generate_pseudo_labels(&fused, tau)?;
    let plans = sample_cutmix_plans(b, h, w, &cfg.augment, seed);
    let strong = mix_images(&views.strong, &plans);
    let ignore = cfg.data.ignore_index;
    let gated = pseudo.gated_targets(ignore);
    let mixed = mix_maps(&gated, &plans);
    let c = model.num_classes;
    let dtype = model.store.dtype();
    let device = model.device();
    Ok(Teacher {
        strong_images: images_to_tensor(&strong, device)?.to_dtype(dtype)?,
        strong_targets: Targets::new(&mixed, c, ignore, dtype, device)?,
        weak_targets: Targets::new(&gated, c, ignore, dtype, device)?,
        weak_logits_mixed: mix_tensor(&out.s_dl.detach(), &plans)?,
        pseudo,
        plans,
    })
}

pub fn unsupervised_objective(
    model: &Segmenter,
    weak_feats: &BackboneFeatures,
    teacher: &Teacher,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<UnsupervisedTerms> {
    let (_, _, h, w) = teacher.strong_images.dims4()?;
    let strong_feats = model.features(&teacher.strong_images)?;
    let strong = model.decode(&strong_feats.f_low, &strong_feats.f_high, (h, w), Mode::Train)?;
    let rate = cfg.augment.feature_dropout;
    let f_low = feature_perturb(&weak_feats.f_low, rate, derive_seed_indexed(seed, "fp", 0))?;
    let f_high = feature_perturb(&weak_feats.f_high, rate, derive_seed_indexed(seed, "fp", 1))?;
    let perturbed = model.decode(&f_low, &f_high, (h, w), Mode::Train)?;
    unsupervised_loss(
        &strong,
        &teacher.weak_logits_mixed,
        &perturbed,
        &teacher.strong_targets,
        &teacher.weak_targets,
        cfg.loss.kl_stopgrad_target,
    )
}

/// Owns the model, optimizer, threshold and data for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Segmenter,
    pub optim: Sgd,
    pub threshold: ThresholdState,
    pub step: usize,
    pub total_steps: usize,
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
    sampler: BatchSampler,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, labeled: Vec<Sample>, unlabeled: Vec<Sample>, device: &Device) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Data("training needs at least one labeled image".into()));
        }
        for s in &labeled {
            s.validate(cfg.data.num_classes)?;
            if s.mask.is_none() {
                return Err(Error::Data(format!("labeled image {:?} has no mask", s.id)));
            }
        }
        let unlabeled = if cfg.semi_supervised { unlabeled } else { Vec::new() };
        let model = Segmenter::new(&cfg, device)?;
        if cfg.crop % model.patch_size() != 0 {
            return Err(Error::Config(format!(
                "crop {} is not a multiple of the patch size {}",
                cfg.crop,
                model.patch_size()
            )));
        }
        let sampler = BatchSampler {
            n_labeled: labeled.len(),
            n_unlabeled: unlabeled.len(),
            batch_labeled: cfg.batch_labeled,
            batch_unlabeled: cfg.batch_unlabeled,
            seed: cfg.seed,
        };
        let total_steps = cfg.epochs * sampler.iters_per_epoch();
        Ok(Self {
            optim: Sgd::new(cfg.momentum, cfg.weight_decay),
            threshold: ThresholdState::new(&cfg.pseudo),
            step: 0,
            total_steps,
            labeled,
            unlabeled,
            sampler,
            model,
            cfg,
        })
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.sampler.iters_per_epoch()
    }

    pub fn epoch(&self) -> usize {
        self.step / self.iters_per_epoch()
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        poly_lr(step, self.total_steps, self.cfg.lr0, self.cfg.poly_power)
    }

    fn step_seed(&self, step: usize, label: &str) -> u64 {
        derive_seed_indexed(self.cfg.seed, label, step as u64)
    }

    fn prepare(&self, img: &Array3<f32>) -> Array3<f32> {
        standardize(img, self.cfg.data.mean, self.cfg.data.std)
    }

    pub fn labeled_batch(&self, step: usize) -> Result<LabeledBatch> {
        let seed = self.step_seed(step, "labeled-aug");
        let mut images = Vec::new();
        let mut masks: Vec<Array2<u8>> = Vec::new();
        for (j, i) in self.sampler.labeled(step).into_iter().enumerate() {
            let s = &self.labeled[i];
            let (img, mask, _) = weak_augment(
                &s.image,
                s.mask.as_ref(),
                self.cfg.crop,
                &self.cfg.augment,
                derive_seed_indexed(seed, "sample", j as u64),
            );
            images.push(self.prepare(&img));
            masks.push(mask.expect("labeled samples carry masks"));
        }
        let dtype = self.model.store.dtype();
        let device = self.model.device();
        Ok(LabeledBatch {
            images: images_to_tensor(&images, device)?.to_dtype(dtype)?,
            targets: Targets::new(&masks, self.cfg.data.num_classes, self.cfg.data.ignore_index, dtype, device)?,
        })
    }

    pub fn unlabeled_views(&self, step: usize) -> Result<Option<UnlabeledViews>> {
        let idx = self.sampler.unlabeled(step);
        if idx.is_empty() {
            return Ok(None);
        }
        let seed = self.step_seed(step, "unlabeled-aug");
        let (mut weak, mut strong) = (Vec::new(), Vec::new());
        for (j, i) in idx.into_iter().enumerate() {
            let v = view_pair(
                &self.unlabeled[i].image,
                self.cfg.crop,
                &self.cfg.augment,
                derive_seed_indexed(seed, "sample", j as u64),
            );
            weak.push(self.prepare(&v.weak));
            strong.push(self.prepare(&v.strong));
        }
        Ok(Some(UnlabeledViews {
            weak: images_to_tensor(&weak, self.model.device())?.to_dtype(self.model.store.dtype())?,
            strong,
        }))
    }

    /// One optimization step; see the crate docs for the order of operations.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.step >= self.total_steps {
            return Err(Error::Config(format!("schedule finished after {} steps", self.total_steps)));
        }
        let step = self.step;
        let lr = self.lr_at(step)?;
        let lambda = self.cfg.loss.lambda;
        let text = self.model.text_embeddings()?;

        let labeled = self.labeled_batch(step)?;
        let sup = supervised_objective(&self.model, &labeled, text.as_ref())?;
        let sup_sum = sup.sum()?;

        let mut unsup = None;
        let mut mean_conf = None;
        let mut valid_fraction = 0.0;
        if let Some(views) = self.unlabeled_views(step)? {
            let seed = self.step_seed(step, "unsup");
            let feats = self.model.features(&views.weak)?;
            let teacher = build_teacher(&self.model, &feats, &views, text.as_ref(), self.threshold.tau, &self.cfg, seed)?;
            mean_conf = teacher.pseudo.mean_confidence();
            valid_fraction = teacher.pseudo.valid_count() as f64 / teacher.pseudo.pixel_count().max(1) as f64;
            unsup = Some(unsupervised_objective(&self.model, &feats, &teacher, &self.cfg, seed)?);
        }
        let unsup_sum = match &unsup {
            Some(u) => u.weighted_sum(lambda)?,
            None => sup_sum.zeros_like()?,
        };
        let total = total_loss(&sup_sum, &unsup_sum)?;
        let report = LossReport::from_terms(&total, &sup, unsup.as_ref(), lambda, valid_fraction)?;
        if !report.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}: {report:?}")));
        }
        let grads = total.backward()?;
        self.optim.step(&self.model.store, &grads, lr)?;
        if let Some(m) = mean_conf {
            self.threshold = update_threshold_with_mean(self.threshold, m);
        }
        self.step += 1;
        Ok(StepReport {
            step,
            lr,
            tau: self.threshold.tau,
            loss: report,
        })
    }

    pub fn run_steps(&mut self, n: usize) -> Result<Vec<StepReport>> {
        (0..n).map(|_| self.train_step()).collect()
    }

    /// Steps until the end of the current epoch.
    pub fn train_epoch(&mut self) -> Result<Vec<StepReport>> {
        let ipe = self.iters_per_epoch();
        let remaining = ipe - self.step % ipe;
        self.run_steps(remaining.min(self.total_steps - self.step))
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }
}
