//! Anchor (prior box) generation and anchor/ground-truth matching.

use crate::bbox::{self, Annotation, BBox};
use crate::error::{Error, Result};

/// One feature map's anchor layout: square grid plus the scale/ratio tiling
/// applied at every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapConfig {
    pub grid: usize,
    pub scales: Vec<f32>,
    pub ratios: Vec<f32>,
}

impl FeatureMapConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub maps: Vec<FeatureMapConfig>,
}

impl AnchorConfig {
    /// Two maps (16x16 then 8x8), one scale per map, three aspect ratios.
    pub fn default_two_map() -> Self {
        AnchorConfig {
            maps: vec![
                FeatureMapConfig {
                    grid: 16,
                    scales: vec![0.15],
                    ratios: vec![1.0, 2.0, 0.5],
                },
                FeatureMapConfig {
                    grid: 8,
                    scales: vec![0.35],
                    ratios: vec![1.0, 2.0, 0.5],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::Invalid("anchor config has no feature maps".into()));
        }
        for m in &self.maps {
            if m.grid < 1 {
                return Err(Error::Invalid("anchor grid size must be >= 1".into()));
            }
            if m.scales.is_empty() || m.ratios.is_empty() {
                return Err(Error::Invalid("anchor map needs scales and ratios".into()));
            }
            if m.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
                return Err(Error::Invalid("anchor scales must lie in (0, 1]".into()));
            }
            if m.ratios.iter().any(|&r| r <= 0.0) {
                return Err(Error::Invalid("anchor ratios must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn total_anchors(&self) -> usize {
        self.maps
            .iter()
            .map(|m| m.grid * m.grid * m.anchors_per_cell())
            .sum()
    }

    /// Serialized form used by checkpoints and config files:
    /// `grid:scale,..:ratio,..;grid:scale,..:ratio,..`
    pub fn to_config_string(&self) -> String {
        self.maps
            .iter()
            .map(|m| {
                let s = m.scales.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                let r = m.ratios.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                format!("{}:{}:{}", m.grid, s, r)
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_config_string(s: &str) -> Result<Self> {
        let mut maps = Vec::new();
        for part in s.split(';') {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 3 {
                return Err(Error::Config(format!(
                    "anchor map '{part}' is not grid:scales:ratios"
                )));
            }
            let grid = fields[0]
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad anchor grid '{}'", fields[0])))?;
            let parse_list = |t: &str| -> Result<Vec<f32>> {
                t.split(',')
                    .map(|v| {
                        v.parse::<f32>()
                            .map_err(|_| Error::Config(format!("bad anchor number '{v}'")))
                    })
                    .collect()
            };
            maps.push(FeatureMapConfig {
                grid,
                scales: parse_list(fields[1])?,
                ratios: parse_list(fields[2])?,
            });
        }
        let cfg = AnchorConfig { maps };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All prior boxes of a configuration, in a fixed deterministic order:
/// maps in config order, cells row-major, then (scale, ratio) pairs.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Generates anchors centered at `((i+0.5)/g, (j+0.5)/g)` with extents
/// `(s*sqrt(r), s/sqrt(r))`, clamped to the unit square.
pub fn generate_anchors(config: &AnchorConfig) -> Result<AnchorSet> {
    config.validate()?;
    let mut boxes = Vec::with_capacity(config.total_anchors());
    for map in &config.maps {
        let g = map.grid;
        for j in 0..g {
            for i in 0..g {
                let cx = (i as f32 + 0.5) / g as f32;
                let cy = (j as f32 + 0.5) / g as f32;
                for &s in &map.scales {
                    for &r in &map.ratios {
                        let w = s * r.sqrt();
                        let h = s / r.sqrt();
                        boxes.push(BBox::new(cx, cy, w, h).clamped());
                    }
                }
            }
        }
    }
    Ok(AnchorSet { boxes })
}

/// Per-anchor training assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum AnchorAssignment {
    Background,
    Positive {
        /// Index into the annotation list.
        gt: usize,
        /// Detector-space class (foreground label + 1; 0 is background).
        class: usize,
        /// Encoded box regression target.
        target: [f32; 4],
    },
}

impl AnchorAssignment {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorAssignment::Positive { .. })
    }
}

/// Order-free tie-break key so matching is invariant to annotation order.
fn gt_key(a: &Annotation) -> (usize, [u32; 4]) {
    (
        a.label,
        [
            a.bbox.cx.to_bits(),
            a.bbox.cy.to_bits(),
            a.bbox.w.to_bits(),
            a.bbox.h.to_bits(),
        ],
    )
}

/// Matches anchors to ground truth.
///
/// An anchor is positive iff its best IoU reaches `threshold`, and it always
/// carries its best-matching annotation. Additionally each annotation's
/// best-IoU anchor is forced positive so no object goes unassigned. Ties are
/// broken by an order-free annotation key, keeping the result invariant to
/// permutations of the annotation list.
pub fn match_anchors(
    annotations: &[Annotation],
    anchors: &AnchorSet,
    threshold: f32,
) -> Result<Vec<AnchorAssignment>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!(
            "matching threshold must lie in (0,1), got {threshold}"
        )));
    }
    let n = anchors.len();
    if annotations.is_empty() {
        return Ok(vec![AnchorAssignment::Background; n]);
    }

    // Best annotation per anchor.
    let mut best_gt = vec![usize::MAX; n];
    let mut best_iou = vec![0.0f32; n];
    for (ai, anchor) in anchors.boxes.iter().enumerate() {
        for (gi, ann) in annotations.iter().enumerate() {
            let v = bbox::iou(anchor, &ann.bbox);
            let better = v > best_iou[ai]
                || (v == best_iou[ai]
                    && best_gt[ai] != usize::MAX
                    && gt_key(ann) < gt_key(&annotations[best_gt[ai]]));
            if best_gt[ai] == usize::MAX || better {
                best_gt[ai] = gi;
                best_iou[ai] = v;
            }
        }
    }

    // Best anchor per annotation (forced positives).
    let mut forced = vec![false; n];
    for ann in annotations {
        let mut best_anchor = 0usize;
        let mut best = -1.0f32;
        for (ai, anchor) in anchors.boxes.iter().enumerate() {
            let v = bbox::iou(anchor, &ann.bbox);
            if v > best {
                best = v;
                best_anchor = ai;
            }
        }
        forced[best_anchor] = true;
    }

    let mut out = Vec::with_capacity(n);
    for ai in 0..n {
        let positive = best_iou[ai] >= threshold || forced[ai];
        if positive && best_gt[ai] != usize::MAX {
            let ann = &annotations[best_gt[ai]];
            out.push(AnchorAssignment::Positive {
                gt: best_gt[ai],
                class: ann.label + 1,
                target: bbox::encode_box(&ann.bbox, &anchors.boxes[ai])?,
            });
        } else {
            out.push(AnchorAssignment::Background);
        }
    }
    Ok(out)
}
