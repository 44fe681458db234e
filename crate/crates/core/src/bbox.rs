//! Bounding boxes in normalized center form, IoU, and the offset codec.

use crate::error::{Error, Result};

/// Codec variances for center and size offsets.
pub const VAR_CENTER: f32 = 0.1;
pub const VAR_SIZE: f32 = 0.2;

/// Axis-aligned box in normalized image coordinates, center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox { cx, cy, w, h }
    }

    /// Corner form (x_min, y_min, x_max, y_max).
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - self.w * 0.5,
            self.cy - self.h * 0.5,
            self.cx + self.w * 0.5,
            self.cy + self.h * 0.5,
        )
    }

    pub fn from_corners(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        BBox {
            cx: (x0 + x1) * 0.5,
            cy: (y0 + y1) * 0.5,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// Clamps corners to the unit square, keeping extents positive.
    pub fn clamped(&self) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        let x0 = x0.clamp(0.0, 1.0);
        let y0 = y0.clamp(0.0, 1.0);
        let x1 = x1.clamp(0.0, 1.0).max(x0 + 1e-6);
        let y1 = y1.clamp(0.0, 1.0).max(y0 + 1e-6);
        Self::from_corners(x0, y0, x1, y1)
    }
}

/// Ground-truth object: foreground class index plus its box.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// Foreground class in `[0, n_foreground)`; background is not a label.
    pub label: usize,
    pub bbox: BBox,
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Encodes a ground-truth box relative to an anchor as
/// `[(dcx)/(aw*v1), (dcy)/(ah*v1), ln(gw/aw)/v2, ln(gh/ah)/v2]`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<[f32; 4]> {
    if gt.w <= 0.0 || gt.h <= 0.0 || anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::Invalid(format!(
            "encode_box: non-positive extent (gt {}x{}, anchor {}x{})",
            gt.w, gt.h, anchor.w, anchor.h
        )));
    }
    Ok([
        (gt.cx - anchor.cx) / (anchor.w * VAR_CENTER),
        (gt.cy - anchor.cy) / (anchor.h * VAR_CENTER),
        (gt.w / anchor.w).ln() / VAR_SIZE,
        (gt.h / anchor.h).ln() / VAR_SIZE,
    ])
}

/// Inverse of [`encode_box`], clamped to the unit square.
pub fn decode_box(offsets: &[f32; 4], anchor: &BBox) -> Result<BBox> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::Invalid(format!(
            "decode_box: non-positive anchor extent {}x{}",
            anchor.w, anchor.h
        )));
    }
    let b = BBox {
        cx: anchor.cx + offsets[0] * anchor.w * VAR_CENTER,
        cy: anchor.cy + offsets[1] * anchor.h * VAR_CENTER,
        w: anchor.w * (offsets[2] * VAR_SIZE).exp(),
        h: anchor.h * (offsets[3] * VAR_SIZE).exp(),
    };
    Ok(b.clamped())
}

/// Decode without the unit-square clamp; exact inverse of the encoder.
pub fn decode_box_unclamped(offsets: &[f32; 4], anchor: &BBox) -> BBox {
    BBox {
        cx: anchor.cx + offsets[0] * anchor.w * VAR_CENTER,
        cy: anchor.cy + offsets[1] * anchor.h * VAR_CENTER,
        w: anchor.w * (offsets[2] * VAR_SIZE).exp(),
        h: anchor.h * (offsets[3] * VAR_SIZE).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(0.4, 0.4, 0.2, 0.3);
        assert!((iou(&b, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.2, 0.2, 0.2, 0.2);
        let b = BBox::new(0.8, 0.8, 0.2, 0.2);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_offset_squares_is_one_seventh() {
        // Corner boxes (0,0,2,2) and (1,1,3,3) scaled by 1/4 into the unit
        // square: intersection 1, union 7.
        let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
        let b = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn encode_identical_boxes_is_zero() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(encode_box(&b, &b).unwrap(), [0.0; 4]);
    }

    #[test]
    fn encode_known_center_shift() {
        let anchor = BBox::new(0.5, 0.5, 0.2, 0.2);
        let gt = BBox::new(0.52, 0.5, 0.2, 0.2);
        let t = encode_box(&gt, &anchor).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-4, "t = {t:?}");
        assert!(t[1].abs() < 1e-5 && t[2].abs() < 1e-5 && t[3].abs() < 1e-5);
    }

    #[test]
    fn encode_rejects_nonpositive_extent() {
        let bad = BBox::new(0.5, 0.5, 0.0, 0.2);
        let ok = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert!(encode_box(&bad, &ok).is_err());
        assert!(encode_box(&ok, &bad).is_err());
    }

    #[test]
    fn decode_inverts_encode_inside_unit_square() {
        // 100 deterministic pseudorandom pairs with corners in (0,1).
        let mut state = 0x1234_5678u64;
        let mut next = || {
            state = crate::rng::splitmix64(state);
            (state >> 11) as f32 / (1u64 << 53) as f32
        };
        for _ in 0..100 {
            let gt = BBox::new(
                0.3 + 0.4 * next(),
                0.3 + 0.4 * next(),
                0.05 + 0.3 * next(),
                0.05 + 0.3 * next(),
            );
            let anchor = BBox::new(
                0.3 + 0.4 * next(),
                0.3 + 0.4 * next(),
                0.05 + 0.3 * next(),
                0.05 + 0.3 * next(),
            );
            let t = encode_box(&gt, &anchor).unwrap();
            let back = decode_box(&t, &anchor).unwrap();
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
}
