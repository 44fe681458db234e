//! Oracle-equivalence checks shared by the oracle suite and the acceptance
//! gate: NMS against the literal greedy reference, mAP against the exact
//! rational reference, and the box codec roundtrip.

use robdet_core::bbox::{self, Annotation, BBox};
use robdet_core::detect::{self, DetectConfig, Detection, RawDetections};
use robdet_core::eval;

use super::{map50_oracle, nms_oracle, TestRng};

fn random_box(rng: &mut TestRng) -> BBox {
    let w = rng.uniform(0.05, 0.4);
    let h = rng.uniform(0.05, 0.4);
    BBox {
        cx: rng.uniform(w / 2.0, 1.0 - w / 2.0),
        cy: rng.uniform(h / 2.0, 1.0 - h / 2.0),
        w,
        h,
    }
}

pub fn nms_matches_brute_force_on_500_random_instances() {
    let mut rng = TestRng(0xabcd);
    let classes = 4usize;
    for case in 0..500 {
        let n = 1 + rng.index(8);
        let mut probs = vec![0.0f32; n * classes];
        let mut boxes = Vec::with_capacity(n);
        for a in 0..n {
            let class = 1 + rng.index(classes - 1);
            let score = rng.uniform(0.02, 1.0);
            probs[a * classes + class] = score;
            probs[a * classes] = 1.0 - score;
            boxes.push(random_box(&mut rng));
        }
        let raw = RawDetections {
            classes,
            probs,
            boxes,
        };
        let cfg = DetectConfig {
            iou_threshold: rng.uniform(0.2, 0.7),
            score_threshold: rng.uniform(0.01, 0.3),
            max_keep: 1 + rng.index(10),
        };
        let got = detect::nms(&raw, &cfg);
        let mut all: Vec<Detection> = Vec::new();
        for a in 0..n {
            for c in 1..classes {
                let score = raw.prob(a, c);
                if score > 0.0 {
                    all.push(Detection {
                        class: c,
                        score,
                        bbox: raw.boxes[a],
                        anchor: a,
                    });
                }
            }
        }
        let want = nms_oracle(&all, classes, cfg.iou_threshold, cfg.score_threshold, cfg.max_keep);
        assert_eq!(got, want, "case {case} with cfg {cfg:?}");
        // Output is a subset of candidates, ordered by class then score.
        for w in got.windows(2) {
            assert!(w[0].class < w[1].class || (w[0].class == w[1].class && w[0].score >= w[1].score));
        }
    }
}

pub fn map50_matches_exact_rational_reference_on_100_instances() {
    let mut rng = TestRng(0xfeed);
    let classes = 4usize;
    for case in 0..100 {
        let n_images = 1 + rng.index(5);
        let mut annotations: Vec<Vec<Annotation>> = Vec::new();
        let mut detections: Vec<Vec<Detection>> = Vec::new();
        for _ in 0..n_images {
            let n_gt = rng.index(4);
            let anns: Vec<Annotation> = (0..n_gt)
                .map(|_| Annotation {
                    label: rng.index(classes - 1),
                    bbox: random_box(&mut rng),
                })
                .collect();
            let n_det = rng.index(6);
            let dets: Vec<Detection> = (0..n_det)
                .map(|i| {
                    // Half the detections hug a ground-truth box.
                    let bbox = if !anns.is_empty() && rng.index(2) == 0 {
                        let g = anns[rng.index(anns.len())].bbox;
                        BBox {
                            cx: g.cx + rng.uniform(-0.02, 0.02),
                            cy: g.cy + rng.uniform(-0.02, 0.02),
                            w: (g.w * rng.uniform(0.85, 1.15)).max(0.02),
                            h: (g.h * rng.uniform(0.85, 1.15)).max(0.02),
                        }
                    } else {
                        random_box(&mut rng)
                    };
                    Detection {
                        class: 1 + rng.index(classes - 1),
                        score: rng.uniform(0.05, 1.0),
                        bbox,
                        anchor: i,
                    }
                })
                .collect();
            annotations.push(anns);
            detections.push(dets);
        }
        let per_image: Vec<(Vec<Detection>, &[Annotation])> = detections
            .into_iter()
            .zip(&annotations)
            .map(|(d, a)| (d, a.as_slice()))
            .collect();
        let got = eval::map50_from_detections(&per_image, classes);
        let want = map50_oracle(&per_image, classes);
        assert!(
            (got - want).abs() < 1e-12,
            "case {case}: {got} vs exact {want}"
        );
    }
}

pub fn box_codec_roundtrips_within_tolerance() {
    let mut rng = TestRng(0xc0de);
    for _ in 0..100 {
        let gt = random_box(&mut rng);
        let anchor = random_box(&mut rng);
        let t = bbox::encode_box(&gt, &anchor).unwrap();
        let back = bbox::decode_box(&t, &anchor).unwrap();
        for (a, b) in [
            (back.cx, gt.cx),
            (back.cy, gt.cy),
            (back.w, gt.w),
            (back.h, gt.h),
        ] {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
