//! Outer minimization: standard training plus the four adversarial variants
//! (single-task domains, the task-agnostic ball, and the task-oriented
//! two-candidate selection), with momentum SGD and a step-decay schedule.
//!
//! Attacks within a batch always see the parameters frozen at the start of
//! the batch; one attack-generation pass and one update happen per batch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::anchors::{self, AnchorAssignment};
use crate::attack::{
    self, AttackDomain, AttackSpec, ChosenDomain, LabeledImageRef,
};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{DetectorModel, ModelConfig, PARAM_NAMES};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LR_DECAY: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainVariant {
    /// Clean images only.
    Std,
    /// Classification task domain.
    Cls,
    /// Localization task domain.
    Loc,
    /// Task-agnostic ball, summed loss.
    Con,
    /// Task-oriented domain with per-image candidate selection.
    Mtd,
}

impl TrainVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainVariant::Std => "std",
            TrainVariant::Cls => "cls",
            TrainVariant::Loc => "loc",
            TrainVariant::Con => "con",
            TrainVariant::Mtd => "mtd",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "std" => Ok(TrainVariant::Std),
            "cls" => Ok(TrainVariant::Cls),
            "loc" => Ok(TrainVariant::Loc),
            "con" => Ok(TrainVariant::Con),
            "mtd" => Ok(TrainVariant::Mtd),
            other => Err(Error::Config(format!("unknown training variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Global step indices where the learning rate decays by `LR_DECAY`;
    /// empty means 60% and 80% of the total step count.
    pub milestones: Vec<usize>,
    /// Budget and schedule of the inner attack; its domain and seed fields
    /// are ignored (derived from the variant and the training seed).
    pub attack: AttackSpec,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: TrainVariant, seed: u64) -> Self {
        TrainConfig {
            variant,
            epochs: 60,
            batch_size: 16,
            lr: 2e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            attack: AttackSpec::for_training(AttackDomain::Cls, 8.0, 0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("milestones must be strictly increasing".into()));
        }
        self.attack.validate()
    }

    pub fn resolved_milestones(&self, total_steps: usize) -> Vec<usize> {
        if self.milestones.is_empty() {
            vec![total_steps * 6 / 10, total_steps * 8 / 10]
        } else {
            self.milestones.clone()
        }
    }

    pub fn to_kv(&self) -> String {
        let ms: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        format!(
            "batch_size={}\nepochs={}\nlr={}\nmilestones={}\nmomentum={}\nseed={}\nvariant={}\nweight_decay={}\n",
            self.batch_size,
            self.epochs,
            self.lr,
            ms.join(","),
            self.momentum,
            self.seed,
            self.variant.as_str(),
            self.weight_decay,
        )
    }
}

/// Momentum SGD with decoupled weight decay over flat parameter buffers.
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32, param_sizes: &[usize]) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update: `v = momentum*v + g; p -= lr*v + lr*wd*p`.
    ///
    /// Returns false (leaving parameters and velocity untouched) when any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f32) -> bool {
        debug_assert_eq!(params.len(), self.velocity.len());
        for g in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return false;
            }
        }
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] + g[i];
                p[i] -= lr * vel[i] + lr * self.weight_decay * p[i];
            }
        }
        true
    }
}

/// Per-epoch aggregates reported by the trainer.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss_cls: f64,
    pub mean_loss_loc: f64,
    /// Fraction of images whose selection mask chose the classification
    /// candidate; populated only by the task-oriented variant.
    pub cls_selection_rate: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Updates skipped because of non-finite gradients.
    pub skipped_steps: usize,
    /// Images that fell back to their clean version after a flagged attack.
    pub attack_fallbacks: usize,
}

impl TrainReport {
    /// CSV with columns `epoch,loss_cls,loss_loc,cls_selection_rate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_cls,loss_loc,cls_selection_rate\n");
        for e in &self.epochs {
            let rate = e
                .cls_selection_rate
                .map(|r| format!("{r:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                e.epoch, e.mean_loss_cls, e.mean_loss_loc, rate
            ));
        }
        out
    }
}

/// Observer for checkpoints and progress; the CLI writes files from these.
pub trait TrainSink {
    fn on_epoch(&mut self, _stats: &EpochStats) {}
    fn on_milestone(&mut self, _step: usize, _model: &DetectorModel) -> Result<()> {
        Ok(())
    }
}

/// Sink that discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

struct AdvOutcome {
    image: Tensor,
    chosen: Option<ChosenDomain>,
    fallback: bool,
}

/// Builds the training image for one example under the variant's domain.
fn make_adversarial(
    model: &DetectorModel,
    img: &LabeledImage,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<AdvOutcome> {
    let base = AttackSpec {
        seed,
        ..cfg.attack.clone()
    };
    let view = LabeledImageRef::from(img);
    match cfg.variant {
        TrainVariant::Std => Ok(AdvOutcome {
            image: img.image.clone(),
            chosen: None,
            fallback: false,
        }),
        TrainVariant::Cls | TrainVariant::Con => {
            let domain = if cfg.variant == TrainVariant::Cls {
                AttackDomain::Cls
            } else {
                AttackDomain::Union
            };
            let (image, _) = attack::pgd_attack_lean(model, &view, &AttackSpec { domain, ..base })?;
            Ok(AdvOutcome {
                image,
                chosen: None,
                fallback: false,
            })
        }
        TrainVariant::Loc => {
            let (image, flagged) = attack::pgd_attack_lean(
                model,
                &view,
                &AttackSpec {
                    domain: AttackDomain::Loc,
                    ..base
                },
            )?;
            if flagged {
                // Undefined localization loss: train on the clean image.
                Ok(AdvOutcome {
                    image: img.image.clone(),
                    chosen: None,
                    fallback: true,
                })
            } else {
                Ok(AdvOutcome {
                    image,
                    chosen: None,
                    fallback: false,
                })
            }
        }
        TrainVariant::Mtd => {
            let (image, chosen, _) = attack::task_oriented_lean(
                model,
                &view,
                &AttackSpec {
                    domain: AttackDomain::TaskOriented,
                    ..base
                },
            )?;
            Ok(AdvOutcome {
                image,
                chosen: Some(chosen),
                fallback: false,
            })
        }
    }
}

/// Total-loss gradient for one image; returns per-parameter gradients plus
/// the two loss values.
fn image_gradient(
    model: &DetectorModel,
    image: &Tensor,
    assignments: &[AnchorAssignment],
) -> Result<(Vec<Vec<f32>>, f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.leaf_req(image, false)?;
    let out = model.forward(&mut tape, x, true)?;
    let bundle = loss::multibox_loss(&mut tape, &out, assignments)?;
    let total = tape.add(bundle.loss_cls, bundle.loss_loc)?;
    let loss_cls = tape.scalar_value(bundle.loss_cls) as f64;
    let loss_loc = tape.scalar_value(bundle.loss_loc) as f64;
    let mut grads = tape.backward(total)?;
    let out_grads: Vec<Vec<f32>> = out
        .params
        .as_array()
        .iter()
        .zip(model.params())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((out_grads, loss_cls, loss_loc))
}

pub fn train(
    data: &[LabeledImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainReport)> {
    train_with_sink(data, model_cfg, cfg, &mut NullSink)
}

pub fn train_with_sink(
    data: &[LabeledImage],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<(DetectorModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let mut model = DetectorModel::init(model_cfg, cfg.seed)?;
    let assignments: Vec<Vec<AnchorAssignment>> = data
        .par_iter()
        .map(|img| anchors::match_anchors(&img.annotations, model.anchors(), attack::MATCH_THRESHOLD))
        .collect::<Result<_>>()?;

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let milestones = cfg.resolved_milestones(total_steps);
    let param_sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay, &param_sizes);
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream_rng(cfg.seed, rng::STREAM_SHUFFLE, epoch as u64));

        let mut sum_cls = 0.0f64;
        let mut sum_loc = 0.0f64;
        let mut n_seen = 0usize;
        let mut cls_chosen = 0usize;
        let mut mtd_total = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            // Inner maximization on the frozen snapshot.
            let advs: Vec<AdvOutcome> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let seed = rng::derive_seed(
                        cfg.seed,
                        rng::STREAM_ATTACK,
                        ((step as u64) << 16) | pos as u64,
                    );
                    make_adversarial(&model, &data[idx], cfg, seed)
                })
                .collect::<Result<_>>()?;

            // Outer step: batch-mean gradient of the total loss.
            let per_image: Vec<(Vec<Vec<f32>>, f64, f64)> = batch
                .par_iter()
                .zip(&advs)
                .map(|(&idx, adv)| image_gradient(&model, &adv.image, &assignments[idx]))
                .collect::<Result<_>>()?;

            let inv = 1.0 / batch.len() as f64;
            let mut batch_grads: Vec<Vec<f32>> =
                param_sizes.iter().map(|&n| vec![0.0; n]).collect();
            {
                let mut acc: Vec<Vec<f64>> = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
                for (grads, lc, ll) in &per_image {
                    sum_cls += lc;
                    sum_loc += ll;
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for i in 0..g.len() {
                            a[i] += g[i] as f64;
                        }
                    }
                }
                for (b, a) in batch_grads.iter_mut().zip(&acc) {
                    for i in 0..a.len() {
                        b[i] = (a[i] * inv) as f32;
                    }
                }
            }
            n_seen += batch.len();
            for adv in &advs {
                if adv.fallback {
                    report.attack_fallbacks += 1;
                }
                if cfg.variant == TrainVariant::Mtd {
                    mtd_total += 1;
                    if adv.chosen == Some(ChosenDomain::Cls) {
                        cls_chosen += 1;
                    }
                }
            }

            let decays = milestones.iter().filter(|&&m| step >= m).count();
            let lr = cfg.lr * LR_DECAY.powi(decays as i32);
            let grad_refs: Vec<&[f32]> = batch_grads.iter().map(|g| g.as_slice()).collect();
            let mut param_refs: Vec<&mut [f32]> = model
                .params_mut()
                .iter_mut()
                .map(|p| p.values_mut())
                .collect();
            if !sgd.step(&mut param_refs, &grad_refs, lr) {
                report.skipped_steps += 1;
                log::warn!("step {step}: non-finite gradient, update skipped");
            }

            step += 1;
            if milestones.contains(&step) {
                sink.on_milestone(step, &model)?;
            }
        }

        let stats = EpochStats {
            epoch,
            mean_loss_cls: sum_cls / n_seen as f64,
            mean_loss_loc: sum_loc / n_seen as f64,
            cls_selection_rate: (cfg.variant == TrainVariant::Mtd)
                .then(|| cls_chosen as f64 / mtd_total.max(1) as f64),
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        sink.on_epoch(&stats);
        report.epochs.push(stats);
    }
    debug_assert_eq!(PARAM_NAMES.len(), model.params().len());
    Ok((model, report))
}
