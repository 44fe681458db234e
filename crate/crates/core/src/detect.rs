//! Inference path: raw per-anchor detections (softmax probabilities plus
//! decoded boxes) and per-class greedy non-maximum suppression.

use crate::bbox::{self, BBox};
use crate::error::Result;
use crate::model::DetectorModel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// NMS and score filtering knobs used for post-NMS evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DetectConfig {
    pub iou_threshold: f32,
    pub score_threshold: f32,
    pub max_keep: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            iou_threshold: 0.45,
            score_threshold: 0.01,
            max_keep: 200,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("score_threshold", self.score_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(crate::error::Error::Invalid(format!(
                    "{name} must lie in (0,1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Pre-NMS outputs: one probability row (summing to 1) and one decoded box
/// per anchor.
#[derive(Debug, Clone)]
pub struct RawDetections {
    pub classes: usize,
    /// `[num_anchors * classes]`, row-major.
    pub probs: Vec<f32>,
    pub boxes: Vec<BBox>,
}

impl RawDetections {
    pub fn prob(&self, anchor: usize, class: usize) -> f32 {
        self.probs[anchor * self.classes + class]
    }

    pub fn argmax_class(&self, anchor: usize) -> usize {
        let row = &self.probs[anchor * self.classes..(anchor + 1) * self.classes];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// One post-NMS detection. `class` is in detector space (1..classes);
/// background never appears.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f32,
    pub bbox: BBox,
    /// Anchor the detection came from; used for deterministic tie-breaks.
    pub anchor: usize,
}

/// Runs the detector without gradients and decodes every anchor.
pub fn raw_detections(model: &DetectorModel, image: &Tensor) -> Result<RawDetections> {
    let mut tape = Tape::new();
    let x = tape.leaf_req(image, false)?;
    let out = model.forward(&mut tape, x, false)?;
    let c = model.config.classes;
    let n = model.num_anchors();
    let logits = tape.value(out.logits);
    let offsets = tape.value(out.offsets);

    let mut probs = vec![0.0f32; n * c];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f64;
        for &v in row {
            sum += ((v - m) as f64).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            probs[i * c + j] = (((v - m) as f64).exp() / sum) as f32;
        }
    }
    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let t = [
            offsets[i * 4],
            offsets[i * 4 + 1],
            offsets[i * 4 + 2],
            offsets[i * 4 + 3],
        ];
        boxes.push(bbox::decode_box(&t, &model.anchors().boxes[i])?);
    }
    Ok(RawDetections {
        classes: c,
        probs,
        boxes,
    })
}

/// Per-class greedy NMS: keep the highest-scoring box, suppress anything
/// with IoU >= `iou_threshold` against a kept box, drop scores below the
/// threshold, cap at `max_keep` over all classes. Output is sorted by class,
/// then descending score.
pub fn nms(raw: &RawDetections, cfg: &DetectConfig) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let n = raw.boxes.len();
    for class in 1..raw.classes {
        let mut cands: Vec<Detection> = (0..n)
            .filter_map(|a| {
                let score = raw.prob(a, class);
                (score >= cfg.score_threshold).then(|| Detection {
                    class,
                    score,
                    bbox: raw.boxes[a],
                    anchor: a,
                })
            })
            .collect();
        cands.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then(x.anchor.cmp(&y.anchor))
        });
        let mut class_kept: Vec<Detection> = Vec::new();
        'cand: for d in cands {
            for k in &class_kept {
                if bbox::iou(&d.bbox, &k.bbox) >= cfg.iou_threshold {
                    continue 'cand;
                }
            }
            class_kept.push(d);
        }
        kept.extend(class_kept);
    }
    if kept.len() > cfg.max_keep {
        // Keep the strongest max_keep overall, then restore class order.
        kept.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then(x.class.cmp(&y.class))
                .then(x.anchor.cmp(&y.anchor))
        });
        kept.truncate(cfg.max_keep);
    }
    kept.sort_by(|x, y| {
        x.class
            .cmp(&y.class)
            .then(y.score.partial_cmp(&x.score).unwrap())
            .then(x.anchor.cmp(&y.anchor))
    });
    kept
}
