//! Gradient attacks on the detector: epsilon-ball projection, per-task
//! FGSM/PGD, the task-oriented two-candidate attack, and composite-loss
//! attacks built from targeted/non-targeted classification and localization
//! terms over the candidate anchor set.
//!
//! Every attack is a pure function of (model snapshot, image, spec); batch
//! callers derive one seed per image before dispatching.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{self, AnchorAssignment};
use crate::bbox::{self, Annotation, VAR_CENTER};
use crate::error::{Error, Result};
use crate::loss::{self, LossBundle};
use crate::model::DetectorModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// IoU threshold for anchor/ground-truth matching during attack and
/// training loss construction.
pub const MATCH_THRESHOLD: f32 = 0.5;

/// IoU threshold defining the candidate anchor set (strictly greater).
pub const CANDIDATE_IOU: f32 = 0.5;

pub const MAX_EPSILON: f32 = 32.0;
pub const PIXEL_MAX: f32 = 255.0;

/// Which loss drives the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackDomain {
    /// Maximize the classification loss only.
    Cls,
    /// Maximize the localization loss only.
    Loc,
    /// Maximize the summed loss over the task-agnostic ball.
    Union,
    /// One candidate per task domain, keep whichever maximizes the total.
    TaskOriented,
}

impl AttackDomain {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackDomain::Cls => "cls",
            AttackDomain::Loc => "loc",
            AttackDomain::Union => "union",
            AttackDomain::TaskOriented => "task_oriented",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(AttackDomain::Cls),
            "loc" => Ok(AttackDomain::Loc),
            "union" => Ok(AttackDomain::Union),
            "task_oriented" => Ok(AttackDomain::TaskOriented),
            other => Err(Error::Config(format!("unknown attack domain '{other}'"))),
        }
    }
}

/// Budget and schedule of one attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    /// l-inf budget in pixel units.
    pub epsilon: f32,
    pub steps: u32,
    pub step_size: f32,
    pub domain: AttackDomain,
    /// Per-ground-truth target labels (foreground space) for targeted
    /// composite terms.
    pub targeted: Option<Vec<usize>>,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    /// Evaluation-style spec: no random start, step size epsilon for a
    /// single step and 2 (capped at 2*epsilon) for multi-step runs.
    pub fn for_eval(domain: AttackDomain, epsilon: f32, steps: u32, seed: u64) -> Self {
        AttackSpec {
            epsilon,
            steps,
            step_size: Self::default_step_size(epsilon, steps),
            domain,
            targeted: None,
            random_start: false,
            seed,
        }
    }

    /// Training-style spec per the adversarial training loop: random start,
    /// one step of size epsilon.
    pub fn for_training(domain: AttackDomain, epsilon: f32, seed: u64) -> Self {
        AttackSpec {
            epsilon,
            steps: 1,
            step_size: epsilon,
            domain,
            targeted: None,
            random_start: true,
            seed,
        }
    }

    pub fn default_step_size(epsilon: f32, steps: u32) -> f32 {
        if steps <= 1 {
            epsilon
        } else {
            2.0f32.min(2.0 * epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return Err(Error::Invalid(format!(
                "epsilon must lie in [0, {MAX_EPSILON}], got {}",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::Invalid("steps must be >= 1".into()));
        }
        if self.step_size < 0.0 || self.step_size > 2.0 * self.epsilon {
            return Err(Error::Invalid(format!(
                "step_size {} must lie in [0, 2*epsilon = {}]",
                self.step_size,
                2.0 * self.epsilon
            )));
        }
        Ok(())
    }

    /// Serializes to the plain-text key=value block used by CLI configs.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("domain={}\n", self.domain.as_str()));
        s.push_str(&format!("epsilon={}\n", self.epsilon));
        s.push_str(&format!("random_start={}\n", self.random_start));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("step_size={}\n", self.step_size));
        s.push_str(&format!("steps={}\n", self.steps));
        if let Some(t) = &self.targeted {
            let list: Vec<String> = t.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("targets={}\n", list.join(",")));
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = AttackSpec::for_eval(AttackDomain::Cls, 8.0, 20, 0);
        let mut saw_step_size = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", ln + 1)));
            };
            let bad = |what: &str| Error::Config(format!("bad {what} '{v}'"));
            match k.trim() {
                "domain" => spec.domain = AttackDomain::from_str(v.trim())?,
                "epsilon" => spec.epsilon = v.trim().parse().map_err(|_| bad("epsilon"))?,
                "steps" => spec.steps = v.trim().parse().map_err(|_| bad("steps"))?,
                "step_size" => {
                    spec.step_size = v.trim().parse().map_err(|_| bad("step_size"))?;
                    saw_step_size = true;
                }
                "random_start" => {
                    spec.random_start = v.trim().parse().map_err(|_| bad("random_start"))?
                }
                "seed" => spec.seed = v.trim().parse().map_err(|_| bad("seed"))?,
                "targets" => {
                    let list: Result<Vec<usize>> = v
                        .trim()
                        .split(',')
                        .map(|t| t.trim().parse::<usize>().map_err(|_| bad("targets")))
                        .collect();
                    spec.targeted = Some(list?);
                }
                other => return Err(Error::Config(format!("unknown attack key '{other}'"))),
            }
        }
        if !saw_step_size {
            spec.step_size = Self::default_step_size(spec.epsilon, spec.steps);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Task domain actually selected by the task-oriented mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChosenDomain {
    Cls,
    Loc,
}

/// A finished attack with its provenance.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub image: Tensor,
    pub spec: AttackSpec,
    /// Populated by the task-oriented attack's selection mask.
    pub chosen_domain: Option<ChosenDomain>,
    pub clean_loss_cls: f64,
    pub clean_loss_loc: f64,
    pub final_loss_cls: f64,
    pub final_loss_loc: f64,
    /// Objective the attack ascended, evaluated at the clean image and at
    /// the emitted one. For loss-domain attacks this is the selected loss;
    /// for composite attacks it is the weighted objective.
    pub objective_clean: f64,
    pub objective_final: f64,
    /// Set when the localization loss was undefined (no positive anchors).
    pub loc_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    Cls,
    Loc,
    Sum,
}

/// Clamps `candidate` into the epsilon ball around `center` intersected
/// with the valid pixel range.
pub fn project(candidate: &Tensor, center: &Tensor, epsilon: f32) -> Result<Tensor> {
    if candidate.shape() != center.shape() {
        return Err(Error::Shape(format!(
            "project: candidate {:?} vs center {:?}",
            candidate.shape(),
            center.shape()
        )));
    }
    let vals: Vec<f32> = candidate
        .values()
        .iter()
        .zip(center.values())
        .map(|(&v, &c)| v.clamp(c - epsilon, c + epsilon).clamp(0.0, PIXEL_MAX))
        .collect();
    Tensor::new(candidate.shape().to_vec(), vals)
}

pub fn linf_distance(a: &Tensor, b: &Tensor) -> f32 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + step * sign(grad)`, projected. Exposed for the attack internals and
/// their tests; `grad = None` means a zero gradient everywhere.
pub(crate) fn apply_signed_step(
    x: &Tensor,
    grad: Option<&[f32]>,
    step: f32,
    center: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    match grad {
        None => project(x, center, epsilon),
        Some(g) => {
            let vals: Vec<f32> = x
                .values()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| v + step * sign(gv))
                .collect();
            let stepped = Tensor::new(x.shape().to_vec(), vals)?;
            project(&stepped, center, epsilon)
        }
    }
}

/// Gradient of the selected loss with respect to the image. Returns the
/// gradient plus whether the localization loss was undefined.
pub(crate) fn input_gradient(
    model: &DetectorModel,
    image: &Tensor,
    assignments: &[AnchorAssignment],
    selector: LossSelector,
) -> Result<(Option<Vec<f32>>, bool)> {
    let mut tape = Tape::new();
    let x = tape.leaf_req(image, true)?;
    let out = model.forward(&mut tape, x, false)?;
    let bundle = loss::multibox_loss(&mut tape, &out, assignments)?;
    let loc_undefined = bundle.npos == 0;
    if selector == LossSelector::Loc && loc_undefined {
        return Ok((None, true));
    }
    let loss = match selector {
        LossSelector::Cls => bundle.loss_cls,
        LossSelector::Loc => bundle.loss_loc,
        LossSelector::Sum => tape.add(bundle.loss_cls, bundle.loss_loc)?,
    };
    let mut grads = tape.backward(loss)?;
    Ok((grads.take(x), loc_undefined && selector != LossSelector::Cls))
}

/// Both task losses at an image, without gradients.
pub fn task_losses(
    model: &DetectorModel,
    image: &Tensor,
    assignments: &[AnchorAssignment],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.leaf_req(image, false)?;
    let out = model.forward(&mut tape, x, false)?;
    let bundle: LossBundle = loss::multibox_loss(&mut tape, &out, assignments)?;
    Ok((
        tape.scalar_value(bundle.loss_cls) as f64,
        tape.scalar_value(bundle.loss_loc) as f64,
    ))
}

/// One signed-gradient ascent step on the selected loss, projected into the
/// epsilon ball around `center`. When the selected loss is undefined the
/// input is returned unchanged and the event flagged.
pub fn fgsm_step(
    model: &DetectorModel,
    image: &Tensor,
    annotations: &[Annotation],
    selector: LossSelector,
    step_size: f32,
    center: &Tensor,
    epsilon: f32,
) -> Result<(Tensor, bool)> {
    let assignments = anchors::match_anchors(annotations, model.anchors(), MATCH_THRESHOLD)?;
    fgsm_step_matched(model, image, &assignments, selector, step_size, center, epsilon)
}

fn fgsm_step_matched(
    model: &DetectorModel,
    image: &Tensor,
    assignments: &[AnchorAssignment],
    selector: LossSelector,
    step_size: f32,
    center: &Tensor,
    epsilon: f32,
) -> Result<(Tensor, bool)> {
    let (grad, undefined) = input_gradient(model, image, assignments, selector)?;
    if selector == LossSelector::Loc && undefined {
        return Ok((image.clone(), true));
    }
    let out = apply_signed_step(image, grad.as_deref(), step_size, center, epsilon)?;
    Ok((out, undefined))
}

fn random_start(image: &Tensor, epsilon: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if epsilon <= 0.0 {
        return Ok(image.clone());
    }
    let vals: Vec<f32> = image
        .values()
        .iter()
        .map(|&v| v + rng.random_range(-epsilon..=epsilon))
        .collect();
    let noisy = Tensor::new(image.shape().to_vec(), vals)?;
    project(&noisy, image, epsilon)
}

fn pgd_chain(
    model: &DetectorModel,
    start: &Tensor,
    center: &Tensor,
    assignments: &[AnchorAssignment],
    selector: LossSelector,
    spec: &AttackSpec,
) -> Result<(Tensor, bool)> {
    let mut x = project(start, center, spec.epsilon)?;
    let mut flagged = false;
    for _ in 0..spec.steps {
        let (next, f) = fgsm_step_matched(
            model,
            &x,
            assignments,
            selector,
            spec.step_size,
            center,
            spec.epsilon,
        )?;
        x = next;
        flagged |= f;
    }
    Ok((x, flagged))
}

fn pgd_selector(domain: AttackDomain) -> Result<LossSelector> {
    match domain {
        AttackDomain::Cls => Ok(LossSelector::Cls),
        AttackDomain::Loc => Ok(LossSelector::Loc),
        AttackDomain::Union => Ok(LossSelector::Sum),
        AttackDomain::TaskOriented => Err(Error::Invalid(
            "pgd_attack takes Cls/Loc/Union; use task_oriented_attack".into(),
        )),
    }
}

/// PGD without the provenance loss evaluations; the training loop's inner
/// maximization only needs the image and the undefined-loss flag.
pub(crate) fn pgd_attack_lean(
    model: &DetectorModel,
    image: &LabeledImageRef<'_>,
    spec: &AttackSpec,
) -> Result<(Tensor, bool)> {
    spec.validate()?;
    let selector = pgd_selector(spec.domain)?;
    let assignments = anchors::match_anchors(image.annotations, model.anchors(), MATCH_THRESHOLD)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start = if spec.random_start {
        random_start(image.image, spec.epsilon, &mut rng)?
    } else {
        image.image.clone()
    };
    pgd_chain(model, &start, image.image, &assignments, selector, spec)
}

/// Projected gradient ascent within a single loss domain (`Cls`, `Loc`) or
/// on the summed loss (`Union`).
pub fn pgd_attack(
    model: &DetectorModel,
    image: &LabeledImageRef<'_>,
    spec: &AttackSpec,
) -> Result<AdversarialExample> {
    spec.validate()?;
    let selector = pgd_selector(spec.domain)?;
    let assignments = anchors::match_anchors(image.annotations, model.anchors(), MATCH_THRESHOLD)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start = if spec.random_start {
        random_start(image.image, spec.epsilon, &mut rng)?
    } else {
        image.image.clone()
    };
    let (x, flagged) = pgd_chain(model, &start, image.image, &assignments, selector, spec)?;

    let (clean_cls, clean_loc) = task_losses(model, image.image, &assignments)?;
    let (final_cls, final_loc) = task_losses(model, &x, &assignments)?;
    let pick = |cls: f64, loc: f64| match selector {
        LossSelector::Cls => cls,
        LossSelector::Loc => loc,
        LossSelector::Sum => cls + loc,
    };
    Ok(AdversarialExample {
        image: x,
        spec: spec.clone(),
        chosen_domain: None,
        clean_loss_cls: clean_cls,
        clean_loss_loc: clean_loc,
        final_loss_cls: final_cls,
        final_loss_loc: final_loc,
        objective_clean: pick(clean_cls, clean_loc),
        objective_final: pick(final_cls, final_loc),
        loc_undefined: flagged,
    })
}

struct TaskOrientedOutcome {
    image: Tensor,
    chosen: ChosenDomain,
    final_cls: f64,
    final_loc: f64,
    loc_undefined: bool,
}

fn task_oriented_core(
    model: &DetectorModel,
    image: &LabeledImageRef<'_>,
    spec: &AttackSpec,
) -> Result<TaskOrientedOutcome> {
    spec.validate()?;
    if spec.domain != AttackDomain::TaskOriented {
        return Err(Error::Invalid(format!(
            "task_oriented_attack requires the TaskOriented domain, got {}",
            spec.domain.as_str()
        )));
    }
    let assignments = anchors::match_anchors(image.annotations, model.anchors(), MATCH_THRESHOLD)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start = random_start(image.image, spec.epsilon, &mut rng)?;

    let (x_cls, _) = pgd_chain(model, &start, image.image, &assignments, LossSelector::Cls, spec)?;
    let (x_loc, loc_flagged) =
        pgd_chain(model, &start, image.image, &assignments, LossSelector::Loc, spec)?;

    let (cls_cls, cls_loc) = task_losses(model, &x_cls, &assignments)?;
    let (loc_cls, loc_loc) = task_losses(model, &x_loc, &assignments)?;
    let total_at_cls = cls_cls + cls_loc;
    let total_at_loc = loc_cls + loc_loc;

    let choose_cls = loc_flagged || total_at_cls > total_at_loc;
    let (image_out, chosen, final_cls, final_loc) = if choose_cls {
        (x_cls, ChosenDomain::Cls, cls_cls, cls_loc)
    } else {
        (x_loc, ChosenDomain::Loc, loc_cls, loc_loc)
    };
    Ok(TaskOrientedOutcome {
        image: image_out,
        chosen,
        final_cls,
        final_loc,
        loc_undefined: loc_flagged,
    })
}

/// Task-oriented attack without provenance, for the training loop.
pub(crate) fn task_oriented_lean(
    model: &DetectorModel,
    image: &LabeledImageRef<'_>,
    spec: &AttackSpec,
) -> Result<(Tensor, ChosenDomain, bool)> {
    let out = task_oriented_core(model, image, spec)?;
    Ok((out.image, out.chosen, out.loc_undefined))
}

/// The task-oriented attack: from one random point in the ball, take the
/// configured steps separately in the classification and localization
/// domains, then keep whichever candidate maximizes the total loss. The
/// comparison is strict, so ties keep the localization candidate; an
/// undefined localization loss forces the classification candidate.
pub fn task_oriented_attack(
    model: &DetectorModel,
    image: &LabeledImageRef<'_>,
    spec: &AttackSpec,
) -> Result<AdversarialExample> {
    let out = task_oriented_core(model, image, spec)?;
    let TaskOrientedOutcome {
        image: image_out,
        chosen,
        final_cls,
        final_loc,
        loc_undefined: loc_flagged,
    } = out;
    let assignments = anchors::match_anchors(image.annotations, model.anchors(), MATCH_THRESHOLD)?;
    let (clean_cls, clean_loc) = task_losses(model, image.image, &assignments)?;
    Ok(AdversarialExample {
        image: image_out,
        spec: spec.clone(),
        chosen_domain: Some(chosen),
        clean_loss_cls: clean_cls,
        clean_loss_loc: clean_loc,
        final_loss_cls: final_cls,
        final_loss_loc: final_loc,
        objective_clean: clean_cls + clean_loc,
        objective_final: final_cls + final_loc,
        loc_undefined: loc_flagged,
    })
}

/// Weighted composite objective over the candidate anchor set.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    pub cls_targeted: f32,
    pub cls_untargeted: f32,
    pub loc_targeted: f32,
    pub loc_untargeted: f32,
    /// Per-ground-truth target labels (foreground space) for the targeted
    /// classification term. Required when `cls_targeted > 0`.
    pub targets: Option<Vec<usize>>,
}

/// Composite attack presets mirroring the published attack families.
#[derive(Debug, Clone, PartialEq)]
pub enum CompositePreset {
    /// Targeted plus non-targeted classification terms.
    DagLike,
    /// Non-targeted classification plus a targeted localization term that
    /// drags offsets half an anchor width sideways.
    RapLike,
    Custom(CompositeWeights),
}

impl CompositePreset {
    pub fn as_str(&self) -> &'static str {
        match self {
            CompositePreset::DagLike => "dag_like",
            CompositePreset::RapLike => "rap_like",
            CompositePreset::Custom(_) => "custom",
        }
    }
}

/// Fixed permutation of true labels used as default targeted labels:
/// each foreground class maps to the next one (mod class count).
fn permuted_targets(annotations: &[Annotation], foreground: usize) -> Vec<usize> {
    annotations
        .iter()
        .map(|a| (a.label + 1) % foreground)
        .collect()
}

struct CompositeObjective {
    weights: CompositeWeights,
    /// Candidate anchor indices and their assigned ground truth.
    candidates: Vec<(usize, usize)>,
}

impl CompositeObjective {
    fn build(
        model: &DetectorModel,
        annotations: &[Annotation],
        preset: &CompositePreset,
    ) -> Result<Self> {
        let foreground = model.config.classes - 1;
        let weights = match preset {
            CompositePreset::DagLike => CompositeWeights {
                cls_targeted: 1.0,
                cls_untargeted: 1.0,
                loc_targeted: 0.0,
                loc_untargeted: 0.0,
                targets: Some(permuted_targets(annotations, foreground)),
            },
            CompositePreset::RapLike => CompositeWeights {
                cls_targeted: 0.0,
                cls_untargeted: 1.0,
                loc_targeted: 1.0,
                loc_untargeted: 0.0,
                targets: None,
            },
            CompositePreset::Custom(w) => {
                let mut w = w.clone();
                if w.cls_targeted > 0.0 && w.targets.is_none() {
                    return Err(Error::Invalid(
                        "targeted composite attack requires target labels".into(),
                    ));
                }
                if let Some(t) = &w.targets {
                    if t.len() != annotations.len() {
                        return Err(Error::Invalid(format!(
                            "{} targets for {} objects",
                            t.len(),
                            annotations.len()
                        )));
                    }
                    if t.iter().any(|&l| l >= foreground) {
                        return Err(Error::LabelRange {
                            label: *t.iter().max().unwrap(),
                            classes: foreground,
                        });
                    }
                } else if w.cls_targeted > 0.0 {
                    w.targets = Some(permuted_targets(annotations, foreground));
                }
                w
            }
        };

        // Candidate set: anchors whose prior overlaps any ground truth with
        // IoU strictly above 0.5, carrying their best-matching object.
        let mut candidates = Vec::new();
        for (ai, anchor) in model.anchors().boxes.iter().enumerate() {
            let mut best = 0.0f32;
            let mut best_gt = usize::MAX;
            for (gi, ann) in annotations.iter().enumerate() {
                let v = bbox::iou(anchor, &ann.bbox);
                if v > best {
                    best = v;
                    best_gt = gi;
                }
            }
            if best > CANDIDATE_IOU {
                candidates.push((ai, best_gt));
            }
        }
        Ok(CompositeObjective { weights, candidates })
    }

    /// Builds the scalar objective on a tape with the forward outputs of
    /// `image`; returns the objective value id.
    fn emit(
        &self,
        tape: &mut Tape,
        model: &DetectorModel,
        annotations: &[Annotation],
        out: &crate::model::ForwardOut,
    ) -> Result<crate::tape::ValueId> {
        let n = model.num_anchors();
        let mut objective = tape.constant(Vec::new(), vec![0.0])?;
        if self.candidates.is_empty() {
            return Ok(objective);
        }
        let w = &self.weights;

        if w.cls_untargeted > 0.0 || w.cls_targeted > 0.0 {
            let mut true_labels = vec![0u32; n];
            let mut tgt_labels = vec![0u32; n];
            let mut cand_w = vec![0.0f32; n];
            for &(ai, gi) in &self.candidates {
                cand_w[ai] = 1.0;
                true_labels[ai] = (annotations[gi].label + 1) as u32;
                if let Some(t) = &w.targets {
                    tgt_labels[ai] = (t[gi] + 1) as u32;
                }
            }
            let cand_w = Arc::new(cand_w);
            if w.cls_untargeted > 0.0 {
                let ce = tape.softmax_cross_entropy(
                    out.logits,
                    Arc::new(true_labels),
                    cand_w.clone(),
                )?;
                let term = tape.scale(ce, w.cls_untargeted)?;
                objective = tape.add(objective, term)?;
            }
            if w.cls_targeted > 0.0 {
                let ce = tape.softmax_cross_entropy(out.logits, Arc::new(tgt_labels), cand_w)?;
                // Maximizing the objective minimizes the CE to the target.
                let term = tape.scale(ce, -w.cls_targeted)?;
                objective = tape.add(objective, term)?;
            }
        }

        if w.loc_untargeted > 0.0 || w.loc_targeted > 0.0 {
            let mut mask = vec![0.0f32; n * 4];
            let mut true_t = vec![0.0f32; n * 4];
            let mut shifted_t = vec![0.0f32; n * 4];
            for &(ai, gi) in &self.candidates {
                let t = bbox::encode_box(&annotations[gi].bbox, &model.anchors().boxes[ai])?;
                mask[ai * 4..ai * 4 + 4].fill(1.0);
                true_t[ai * 4..ai * 4 + 4].copy_from_slice(&t);
                let mut s = t;
                // Translate the regression target by +0.5 anchor widths.
                s[0] += 0.5 / VAR_CENTER;
                shifted_t[ai * 4..ai * 4 + 4].copy_from_slice(&s);
            }
            let mask_id = tape.constant(vec![n, 4], mask)?;
            if w.loc_untargeted > 0.0 {
                let t_id = tape.constant(vec![n, 4], true_t)?;
                let sl = tape.smooth_l1(out.offsets, t_id, mask_id)?;
                let term = tape.scale(sl, w.loc_untargeted)?;
                objective = tape.add(objective, term)?;
            }
            if w.loc_targeted > 0.0 {
                let t_id = tape.constant(vec![n, 4], shifted_t)?;
                let sl = tape.smooth_l1(out.offsets, t_id, mask_id)?;
                // Pull predictions toward the displaced boxes.
                let term = tape.scale(sl, -w.loc_targeted)?;
                objective = tape.add(objective, term)?;
            }
        }
        Ok(objective)
    }

    fn value_and_grad(
        &self,
        model: &DetectorModel,
        annotations: &[Annotation],
        image: &Tensor,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f32>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf_req(image, want_grad)?;
        let out = model.forward(&mut tape, x, false)?;
        let obj = self.emit(&mut tape, model, annotations, &out)?;
        let value = tape.scalar_value(obj) as f64;
        if !want_grad {
            return Ok((value, None));
        }
        let mut grads = tape.backward(obj)?;
        Ok((value, grads.take(x)))
    }
}

/// PGD on a weighted composite of targeted/non-targeted task terms over the
/// candidate anchors.
pub fn composite_attack(
    model: &DetectorModel,
    image: &LabeledImageRef<'_>,
    preset: &CompositePreset,
    spec: &AttackSpec,
) -> Result<AdversarialExample> {
    spec.validate()?;
    let objective = CompositeObjective::build(model, image.annotations, preset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = if spec.random_start {
        random_start(image.image, spec.epsilon, &mut rng)?
    } else {
        image.image.clone()
    };
    for _ in 0..spec.steps {
        let (_, grad) = objective.value_and_grad(model, image.annotations, &x, true)?;
        x = apply_signed_step(&x, grad.as_deref(), spec.step_size, image.image, spec.epsilon)?;
    }
    let (obj_clean, _) = objective.value_and_grad(model, image.annotations, image.image, false)?;
    let (obj_final, _) = objective.value_and_grad(model, image.annotations, &x, false)?;

    let assignments = anchors::match_anchors(image.annotations, model.anchors(), MATCH_THRESHOLD)?;
    let (clean_cls, clean_loc) = task_losses(model, image.image, &assignments)?;
    let (final_cls, final_loc) = task_losses(model, &x, &assignments)?;
    Ok(AdversarialExample {
        image: x,
        spec: spec.clone(),
        chosen_domain: None,
        clean_loss_cls: clean_cls,
        clean_loss_loc: clean_loc,
        final_loss_cls: final_cls,
        final_loss_loc: final_loc,
        objective_clean: obj_clean,
        objective_final: obj_final,
        loc_undefined: false,
    })
}

/// Borrowed view of an image plus its annotations, accepted by every attack.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImageRef<'a> {
    pub image: &'a Tensor,
    pub annotations: &'a [Annotation],
}

impl<'a> From<&'a crate::data::LabeledImage> for LabeledImageRef<'a> {
    fn from(li: &'a crate::data::LabeledImage) -> Self {
        LabeledImageRef {
            image: &li.image,
            annotations: &li.annotations,
        }
    }
}
