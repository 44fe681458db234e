//! Measurement suite: VOC-style mAP@0.5 over post-NMS detections, pre-NMS
//! candidate-set metrics, task-gradient alignment statistics, attack sweeps,
//! the task-domain ablation grid, and transferred-attack evaluation.

use rayon::prelude::*;

use crate::attack::{
    self, AttackDomain, AttackSpec, CompositePreset, LabeledImageRef, LossSelector,
};
use crate::bbox::{self, BBox};
use crate::data::LabeledImage;
use crate::detect::{self, DetectConfig, Detection};
use crate::error::{Error, Result};
use crate::model::DetectorModel;
use crate::rng;

pub const MAP_IOU: f32 = 0.5;

/// Sweep grids matching the reported figures.
pub const SWEEP_STEPS: [u32; 6] = [1, 2, 5, 10, 20, 50];
pub const SWEEP_EPSILONS: [f32; 6] = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0];
pub const SWEEP_FIXED_EPSILON: f32 = 8.0;
pub const SWEEP_FIXED_STEPS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricName {
    Map50,
    CandAcc,
    CandIou,
    CosAlign,
    MagRatio,
    CleanMap50,
}

impl MetricName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::Map50 => "map50",
            MetricName::CandAcc => "cand_acc",
            MetricName::CandIou => "cand_iou",
            MetricName::CosAlign => "cos_align",
            MetricName::MagRatio => "mag_ratio",
            MetricName::CleanMap50 => "clean_map50",
        }
    }
}

/// One named scalar result keyed by model, attack, and sweep coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub model: String,
    pub attack: String,
    pub metric: MetricName,
    pub steps: Option<u32>,
    pub epsilon: Option<f32>,
    pub value: f64,
}

/// Serializes records with the fixed header
/// `model,attack,metric,steps,epsilon,value`.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("model,attack,metric,steps,epsilon,value\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.model,
            r.attack,
            r.metric.as_str(),
            r.steps.map(|s| s.to_string()).unwrap_or_default(),
            r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            r.value
        ));
    }
    out
}

/// Attack applied during an evaluation, with a stable id for record keys.
#[derive(Debug, Clone)]
pub enum EvalAttack {
    None,
    Pgd(AttackSpec),
    TaskOriented(AttackSpec),
    Composite(CompositePreset, AttackSpec),
}

impl EvalAttack {
    pub fn id(&self) -> String {
        match self {
            EvalAttack::None => "none".into(),
            EvalAttack::Pgd(s) => format!("pgd_{}", s.domain.as_str()),
            EvalAttack::TaskOriented(_) => "task_oriented".into(),
            EvalAttack::Composite(p, _) => p.as_str().into(),
        }
    }

    pub fn spec(&self) -> Option<&AttackSpec> {
        match self {
            EvalAttack::None => None,
            EvalAttack::Pgd(s) | EvalAttack::TaskOriented(s) | EvalAttack::Composite(_, s) => {
                Some(s)
            }
        }
    }

    /// Standard attack battery at one budget/step setting.
    pub fn battery(epsilon: f32, steps: u32, seed: u64) -> Vec<EvalAttack> {
        vec![
            EvalAttack::None,
            EvalAttack::Pgd(AttackSpec::for_eval(AttackDomain::Cls, epsilon, steps, seed)),
            EvalAttack::Pgd(AttackSpec::for_eval(AttackDomain::Loc, epsilon, steps, seed)),
            EvalAttack::Composite(
                CompositePreset::DagLike,
                AttackSpec::for_eval(AttackDomain::Union, epsilon, steps, seed),
            ),
            EvalAttack::Composite(
                CompositePreset::RapLike,
                AttackSpec::for_eval(AttackDomain::Union, epsilon, steps, seed),
            ),
        ]
    }
}

/// Generates the adversarial version of one image, with the per-image seed
/// derived from the attack seed and the image index.
pub fn perturb_image(
    model: &DetectorModel,
    img: &LabeledImage,
    atk: &EvalAttack,
    index: usize,
) -> Result<crate::tensor::Tensor> {
    let view = LabeledImageRef::from(img);
    match atk {
        EvalAttack::None => Ok(img.image.clone()),
        EvalAttack::Pgd(spec) => {
            let spec = spec
                .clone()
                .with_seed(rng::derive_seed(spec.seed, rng::STREAM_ATTACK, index as u64));
            Ok(attack::pgd_attack(model, &view, &spec)?.image)
        }
        EvalAttack::TaskOriented(spec) => {
            let spec = spec
                .clone()
                .with_seed(rng::derive_seed(spec.seed, rng::STREAM_ATTACK, index as u64));
            Ok(attack::task_oriented_attack(model, &view, &spec)?.image)
        }
        EvalAttack::Composite(preset, spec) => {
            let spec = spec
                .clone()
                .with_seed(rng::derive_seed(spec.seed, rng::STREAM_ATTACK, index as u64));
            Ok(attack::composite_attack(model, &view, preset, &spec)?.image)
        }
    }
}

/// Materializes the attacked dataset (annotations unchanged).
pub fn apply_attack(
    model: &DetectorModel,
    data: &[LabeledImage],
    atk: &EvalAttack,
) -> Result<Vec<LabeledImage>> {
    data.par_iter()
        .enumerate()
        .map(|(i, img)| {
            Ok(LabeledImage {
                image: perturb_image(model, img, atk, i)?,
                annotations: img.annotations.clone(),
            })
        })
        .collect()
}

/// All-point (precision-envelope) average precision from ranked hits.
fn average_precision(hits: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let n = hits.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // Envelope from the right, then integrate over recall increments.
    let mut env = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * env[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// mAP@0.5 from per-image post-NMS detections and ground truth.
///
/// Detections are ranked by descending score (ties broken by image then
/// anchor), greedily matched to the best unmatched ground truth of the same
/// class with IoU >= 0.5; duplicates count as false positives. AP uses
/// all-point precision-envelope integration; mAP averages over classes with
/// at least one ground-truth instance.
pub fn map50_from_detections(
    per_image: &[(Vec<Detection>, &[crate::bbox::Annotation])],
    classes: usize,
) -> f64 {
    let mut ap_sum = 0.0f64;
    let mut classes_with_gt = 0usize;
    for class in 1..classes {
        let mut total_gt = 0usize;
        for (_, anns) in per_image {
            total_gt += anns.iter().filter(|a| a.label + 1 == class).count();
        }
        if total_gt == 0 {
            continue;
        }
        classes_with_gt += 1;

        let mut dets: Vec<(f32, usize, usize, BBox)> = Vec::new();
        for (img_idx, (d, _)) in per_image.iter().enumerate() {
            for det in d.iter().filter(|d| d.class == class) {
                dets.push((det.score, img_idx, det.anchor, det.bbox));
            }
        }
        dets.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut matched: Vec<Vec<bool>> = per_image
            .iter()
            .map(|(_, anns)| vec![false; anns.len()])
            .collect();
        let mut hits = Vec::with_capacity(dets.len());
        for (_, img_idx, _, dbox) in &dets {
            let anns = per_image[*img_idx].1;
            let mut best = MAP_IOU;
            let mut best_gt: Option<usize> = None;
            for (gi, ann) in anns.iter().enumerate() {
                if ann.label + 1 != class || matched[*img_idx][gi] {
                    continue;
                }
                let v = bbox::iou(dbox, &ann.bbox);
                if v >= best && (best_gt.is_none() || v > best) {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            match best_gt {
                Some(gi) => {
                    matched[*img_idx][gi] = true;
                    hits.push(true);
                }
                None => hits.push(false),
            }
        }
        ap_sum += average_precision(&hits, total_gt);
    }
    if classes_with_gt == 0 {
        0.0
    } else {
        ap_sum / classes_with_gt as f64
    }
}

/// mAP@0.5 of a model on a dataset, optionally under attack.
pub fn map50(
    model: &DetectorModel,
    data: &[LabeledImage],
    atk: &EvalAttack,
    det_cfg: &DetectConfig,
) -> Result<f64> {
    det_cfg.validate()?;
    let detections: Vec<Vec<Detection>> = data
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let image = perturb_image(model, img, atk, i)?;
            let raw = detect::raw_detections(model, &image)?;
            Ok(detect::nms(&raw, det_cfg))
        })
        .collect::<Result<_>>()?;
    let per_image: Vec<(Vec<Detection>, &[crate::bbox::Annotation])> = detections
        .into_iter()
        .zip(data)
        .map(|(d, img)| (d, img.annotations.as_slice()))
        .collect();
    Ok(map50_from_detections(&per_image, model.config.classes))
}

/// Pre-NMS candidate-set metrics: classification accuracy and mean IoU of
/// the decoded boxes, over anchors whose prior overlaps some ground truth
/// with IoU strictly above 0.5.
pub fn candidate_metrics(
    model: &DetectorModel,
    data: &[LabeledImage],
    atk: &EvalAttack,
) -> Result<(f64, f64)> {
    let per_image: Vec<(usize, usize, f64)> = data
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let image = perturb_image(model, img, atk, i)?;
            let raw = detect::raw_detections(model, &image)?;
            let mut candidates = 0usize;
            let mut correct = 0usize;
            let mut iou_sum = 0.0f64;
            for (ai, anchor) in model.anchors().boxes.iter().enumerate() {
                let mut best = 0.0f32;
                let mut best_gt = usize::MAX;
                for (gi, ann) in img.annotations.iter().enumerate() {
                    let v = bbox::iou(anchor, &ann.bbox);
                    if v > best {
                        best = v;
                        best_gt = gi;
                    }
                }
                if best <= attack::CANDIDATE_IOU {
                    continue;
                }
                let ann = &img.annotations[best_gt];
                candidates += 1;
                if raw.argmax_class(ai) == ann.label + 1 {
                    correct += 1;
                }
                iou_sum += bbox::iou(&raw.boxes[ai], &ann.bbox) as f64;
            }
            Ok((candidates, correct, iou_sum))
        })
        .collect::<Result<_>>()?;

    let total: usize = per_image.iter().map(|(c, _, _)| c).sum();
    if total == 0 {
        return Err(Error::NoCandidates);
    }
    let correct: usize = per_image.iter().map(|(_, c, _)| c).sum();
    let iou_sum: f64 = per_image.iter().map(|(_, _, s)| s).sum();
    Ok((correct as f64 / total as f64, iou_sum / total as f64))
}

/// Per-image task-gradient comparison.
#[derive(Debug, Clone, Default)]
pub struct AlignmentStats {
    /// cosine(g_cls, g_loc) per image.
    pub cos: Vec<f64>,
    /// |g_cls| / |g_loc| per image.
    pub ratio: Vec<f64>,
    /// Images skipped because one task gradient had zero norm (or the
    /// localization loss was undefined).
    pub skipped: usize,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

impl AlignmentStats {
    pub fn mean_cos(&self) -> f64 {
        self.cos.iter().sum::<f64>() / self.cos.len().max(1) as f64
    }

    pub fn median_cos(&self) -> f64 {
        median(&self.cos)
    }

    pub fn mean_ratio(&self) -> f64 {
        self.ratio.iter().sum::<f64>() / self.ratio.len().max(1) as f64
    }

    pub fn median_ratio(&self) -> f64 {
        median(&self.ratio)
    }
}

/// Cosine alignment and magnitude ratio of the two task gradients with
/// respect to the input image, per sample image.
pub fn gradient_alignment(model: &DetectorModel, sample: &[LabeledImage]) -> Result<AlignmentStats> {
    if sample.is_empty() {
        return Err(Error::Invalid("gradient_alignment needs a non-empty sample".into()));
    }
    let per_image: Vec<Option<(f64, f64)>> = sample
        .par_iter()
        .map(|img| {
            let assignments =
                crate::anchors::match_anchors(&img.annotations, model.anchors(), attack::MATCH_THRESHOLD)?;
            let (gc, _) =
                attack::input_gradient(model, &img.image, &assignments, LossSelector::Cls)?;
            let (gl, undefined) =
                attack::input_gradient(model, &img.image, &assignments, LossSelector::Loc)?;
            let (Some(gc), Some(gl)) = (gc, gl) else {
                return Ok(None);
            };
            if undefined {
                return Ok(None);
            }
            let mut dot = 0.0f64;
            let mut nc = 0.0f64;
            let mut nl = 0.0f64;
            for (a, b) in gc.iter().zip(&gl) {
                dot += *a as f64 * *b as f64;
                nc += (*a as f64).powi(2);
                nl += (*b as f64).powi(2);
            }
            let (nc, nl) = (nc.sqrt(), nl.sqrt());
            if nc == 0.0 || nl == 0.0 {
                return Ok(None);
            }
            Ok(Some((dot / (nc * nl), nc / nl)))
        })
        .collect::<Result<_>>()?;

    let mut stats = AlignmentStats::default();
    for item in per_image {
        match item {
            Some((c, r)) => {
                stats.cos.push(c);
                stats.ratio.push(r);
            }
            None => stats.skipped += 1,
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Steps,
    Epsilon,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Steps => "steps",
            SweepAxis::Epsilon => "epsilon",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(SweepAxis::Steps),
            "epsilon" => Ok(SweepAxis::Epsilon),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// mAP of each model across one sweep axis under a fixed attack domain.
/// The steps sweep fixes epsilon at 8; the budget sweep fixes 20 steps
/// (`fixed_steps` overrides the latter).
pub fn sweep(
    models: &[(String, &DetectorModel)],
    axis: SweepAxis,
    domain: AttackDomain,
    data: &[LabeledImage],
    det_cfg: &DetectConfig,
    seed: u64,
    fixed_steps: Option<u32>,
) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let coords: Vec<(u32, f32)> = match axis {
        SweepAxis::Steps => SWEEP_STEPS
            .iter()
            .map(|&s| (s, SWEEP_FIXED_EPSILON))
            .collect(),
        SweepAxis::Epsilon => SWEEP_EPSILONS
            .iter()
            .map(|&e| (fixed_steps.unwrap_or(SWEEP_FIXED_STEPS), e))
            .collect(),
    };
    for (id, model) in models {
        for &(steps, epsilon) in &coords {
            let atk = EvalAttack::Pgd(AttackSpec::for_eval(domain, epsilon, steps, seed));
            let value = map50(model, data, &atk, det_cfg)?;
            records.push(MetricRecord {
                model: id.clone(),
                attack: atk.id(),
                metric: MetricName::Map50,
                steps: Some(steps),
                epsilon: Some(epsilon),
                value,
            });
        }
    }
    Ok(records)
}

/// Full model-by-attack mAP grid plus one worst-case-over-attacks row per
/// model. The clean column carries no attack machinery at all.
pub fn ablation_grid(
    models: &[(String, &DetectorModel)],
    data: &[LabeledImage],
    det_cfg: &DetectConfig,
    epsilon: f32,
    steps: u32,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let attacks = EvalAttack::battery(epsilon, steps, seed);
    let mut records = Vec::new();
    for (id, model) in models {
        let mut worst: Option<f64> = None;
        for atk in &attacks {
            let value = map50(model, data, atk, det_cfg)?;
            let is_clean = matches!(atk, EvalAttack::None);
            records.push(MetricRecord {
                model: id.clone(),
                attack: atk.id(),
                metric: MetricName::Map50,
                steps: (!is_clean).then_some(steps),
                epsilon: (!is_clean).then_some(epsilon),
                value,
            });
            if !is_clean {
                worst = Some(worst.map_or(value, |w: f64| w.min(value)));
            }
        }
        records.push(MetricRecord {
            model: id.clone(),
            attack: "worst".into(),
            metric: MetricName::Map50,
            steps: Some(steps),
            epsilon: Some(epsilon),
            value: worst.unwrap_or(0.0),
        });
    }
    Ok(records)
}

/// Evaluates a victim model against attacks generated on source models.
/// Sources must share the victim's input shape and class count.
pub fn transfer_eval(
    victim: (&str, &DetectorModel),
    sources: &[(String, &DetectorModel)],
    preset: CompositePreset,
    data: &[LabeledImage],
    det_cfg: &DetectConfig,
    epsilon: f32,
    steps: u32,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let (victim_id, victim_model) = victim;
    for (sid, source) in sources {
        if source.config.classes != victim_model.config.classes {
            return Err(Error::Shape(format!(
                "transfer: source '{sid}' has {} classes, victim has {}",
                source.config.classes, victim_model.config.classes
            )));
        }
    }
    let spec = AttackSpec::for_eval(AttackDomain::Union, epsilon, steps, seed);
    let atk = EvalAttack::Composite(preset.clone(), spec);
    let mut records = Vec::new();

    let clean = map50(victim_model, data, &EvalAttack::None, det_cfg)?;
    records.push(MetricRecord {
        model: victim_id.to_string(),
        attack: "none".into(),
        metric: MetricName::CleanMap50,
        steps: None,
        epsilon: None,
        value: clean,
    });

    let white_box = map50(victim_model, data, &atk, det_cfg)?;
    records.push(MetricRecord {
        model: victim_id.to_string(),
        attack: format!("{}:white_box", atk.id()),
        metric: MetricName::Map50,
        steps: Some(steps),
        epsilon: Some(epsilon),
        value: white_box,
    });

    for (sid, source) in sources {
        let adv = apply_attack(source, data, &atk)?;
        let value = map50(victim_model, &adv, &EvalAttack::None, det_cfg)?;
        records.push(MetricRecord {
            model: victim_id.to_string(),
            attack: format!("{}:from_{}", atk.id(), sid),
            metric: MetricName::Map50,
            steps: Some(steps),
            epsilon: Some(epsilon),
            value,
        });
    }
    Ok(records)
}
