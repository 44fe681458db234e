//! Shared oracles for the integration suites: central-difference gradients,
//! a literal greedy NMS, and an exact-rational average-precision reference.
//! Everything here is independent of the implementation paths it checks.

#![allow(dead_code)]

pub mod fd;
pub mod oracle_checks;

use robdet_core::bbox::{self, Annotation, BBox};
use robdet_core::detect::Detection;
use robdet_core::tape::{Tape, ValueId};
use robdet_core::tensor::Tensor;

/// Scalar loss as a function of a set of leaf tensors, rebuilt on a fresh
/// tape per evaluation.
pub type LossFn<'a> = &'a dyn Fn(&[Tensor]) -> f32;

/// Central difference at one element of one leaf.
pub fn numeric_grad(f: LossFn, leaves: &[Tensor], leaf: usize, idx: usize, h: f32) -> f64 {
    let eval = |delta: f32| -> f64 {
        let mut perturbed: Vec<Tensor> = leaves.to_vec();
        perturbed[leaf].values_mut()[idx] += delta;
        f(&perturbed) as f64
    };
    (eval(h) - eval(-h)) / (2.0 * h as f64)
}

/// Analytic gradients of a tape-built loss for every leaf.
pub fn analytic_grads(
    build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId,
    leaves: &[Tensor],
) -> Vec<Vec<f32>> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves
        .iter()
        .map(|t| tape.leaf_req(t, true).expect("leaf"))
        .collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward");
    ids.iter()
        .zip(leaves)
        .map(|(&id, t)| grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-4 {
        (analytic - numeric).abs() * 10.0 // forces < 1e-2 iff |diff| < 1e-3
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Deterministic xorshift-style sampler for test point selection.
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = robdet_core::rng::splitmix64(self.0);
        self.0
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u as f32
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let vals: Vec<f32> = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), vals).expect("test tensor")
    }
}

/// Literal greedy NMS: repeatedly take the best remaining detection of each
/// class and erase everything it suppresses. Quadratic and obvious.
pub fn nms_oracle(
    dets: &[Detection],
    classes: usize,
    iou_threshold: f32,
    score_threshold: f32,
    max_keep: usize,
) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for class in 1..classes {
        let mut remaining: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class == class && d.score >= score_threshold)
            .cloned()
            .collect();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (a, b) = (&remaining[i], &remaining[best]);
                if a.score > b.score || (a.score == b.score && a.anchor < b.anchor) {
                    best = i;
                }
            }
            let chosen = remaining.swap_remove(best);
            remaining.retain(|d| bbox::iou(&d.bbox, &chosen.bbox) < iou_threshold);
            kept.push(chosen);
        }
    }
    if kept.len() > max_keep {
        kept.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap()
                .then(x.class.cmp(&y.class))
                .then(x.anchor.cmp(&y.anchor))
        });
        kept.truncate(max_keep);
    }
    kept.sort_by(|x, y| {
        x.class
            .cmp(&y.class)
            .then(y.score.partial_cmp(&x.score).unwrap())
            .then(x.anchor.cmp(&y.anchor))
    });
    kept
}

/// Exact rational arithmetic for the AP reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frac {
    pub num: u128,
    pub den: u128,
}

impl Frac {
    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num.max(1), den);
        Frac {
            num: num / g,
            den: den / g,
        }
    }

    pub fn add(self, other: Frac) -> Frac {
        Frac::new(self.num * other.den + other.num * self.den, self.den * other.den)
    }

    pub fn mul(self, other: Frac) -> Frac {
        Frac::new(self.num * other.num, self.den * other.den)
    }

    pub fn ge(self, other: Frac) -> bool {
        self.num * other.den >= other.num * self.den
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Exact mAP@0.5 reference: same ranking and greedy matching semantics,
/// all-point AP computed in exact rational arithmetic as
/// `sum over TP ranks of max-future-precision / total_gt`.
pub fn map50_oracle(per_image: &[(Vec<Detection>, &[Annotation])], classes: usize) -> f64 {
    let mut ap_sum = Frac::new(0, 1);
    let mut with_gt = 0u128;
    for class in 1..classes {
        let total_gt: usize = per_image
            .iter()
            .map(|(_, anns)| anns.iter().filter(|a| a.label + 1 == class).count())
            .sum();
        if total_gt == 0 {
            continue;
        }
        with_gt += 1;

        let mut dets: Vec<(f32, usize, usize, BBox)> = Vec::new();
        for (img, (d, _)) in per_image.iter().enumerate() {
            for det in d.iter().filter(|d| d.class == class) {
                dets.push((det.score, img, det.anchor, det.bbox));
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
        let mut hits = Vec::new();
        for (_, img, _, dbox) in &dets {
            let anns = per_image[*img].1;
            let mut best_iou = 0.5f32;
            let mut best: Option<usize> = None;
            for (gi, ann) in anns.iter().enumerate() {
                if ann.label + 1 != class || matched[*img][gi] {
                    continue;
                }
                let v = bbox::iou(dbox, &ann.bbox);
                if v >= best_iou && (best.is_none() || v > best_iou) {
                    best_iou = v;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                matched[*img][gi] = true;
                hits.push(true);
            } else {
                hits.push(false);
            }
        }

        // AP = sum over TP ranks i of max_{j >= i} (tp_j / (j+1)) / total_gt.
        let mut tp_counts = Vec::with_capacity(hits.len());
        let mut tp = 0u128;
        for &h in &hits {
            if h {
                tp += 1;
            }
            tp_counts.push(tp);
        }
        let mut ap = Frac::new(0, 1);
        for i in 0..hits.len() {
            if !hits[i] {
                continue;
            }
            let mut best = Frac::new(0, 1);
            for j in i..hits.len() {
                let p = Frac::new(tp_counts[j], (j + 1) as u128);
                if p.ge(best) {
                    best = p;
                }
            }
            ap = ap.add(best.mul(Frac::new(1, total_gt as u128)));
        }
        ap_sum = ap_sum.add(ap);
    }
    if with_gt == 0 {
        0.0
    } else {
        ap_sum.mul(Frac::new(1, with_gt)).to_f64()
    }
}
