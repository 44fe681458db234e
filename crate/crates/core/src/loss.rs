//! Multi-box training loss: softmax cross-entropy with hard negative mining
//! for classification, masked smooth-L1 for localization.

use std::sync::Arc;

use crate::anchors::AnchorAssignment;
use crate::error::{Error, Result};
use crate::model::ForwardOut;
use crate::tape::{Tape, ValueId};

/// Negative:positive mining ratio for the classification loss.
pub const NEG_POS_RATIO: usize = 3;

/// The two task losses of one image, plus bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub loss_cls: ValueId,
    pub loss_loc: ValueId,
    pub npos: usize,
    pub nneg: usize,
}

/// Builds both task losses from raw head outputs and anchor assignments.
///
/// Classification: cross-entropy summed over the positive anchors plus the
/// `NEG_POS_RATIO`-times-as-many highest-background-loss negatives (floored
/// at `NEG_POS_RATIO` when there are no positives). Localization: smooth-L1
/// summed over positive offsets; zero when there are no positives. Both are
/// divided by the positive count (floored at 1), the multi-box convention.
pub fn multibox_loss(
    tape: &mut Tape,
    out: &ForwardOut,
    assignments: &[AnchorAssignment],
) -> Result<LossBundle> {
    let [n, c] = tape.shape(out.logits) else {
        return Err(Error::Shape(format!(
            "multibox_loss: logits shape {:?}",
            tape.shape(out.logits)
        )));
    };
    let (n, c) = (*n, *c);
    if assignments.len() != n {
        return Err(Error::Shape(format!(
            "multibox_loss: {n} anchors but {} assignments",
            assignments.len()
        )));
    }

    let npos = assignments.iter().filter(|a| a.is_positive()).count();
    let nneg_want = NEG_POS_RATIO * npos.max(1);

    // Hard negatives: rank background anchors by their background CE.
    // A detached ranking decision, so single-precision exp is fine here.
    let logits = tape.value(out.logits);
    let mut neg_scores: Vec<(f32, usize)> = Vec::with_capacity(n - npos);
    for (i, a) in assignments.iter().enumerate() {
        if a.is_positive() {
            continue;
        }
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().fold(f32::NEG_INFINITY, |x, &y| x.max(y));
        let mut sumexp = 0.0f32;
        for &v in row {
            sumexp += (v - m).exp();
        }
        let nll0 = sumexp.ln() - (row[0] - m);
        neg_scores.push((nll0, i));
    }
    neg_scores.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let nneg = nneg_want.min(neg_scores.len());

    let mut labels = vec![0u32; n];
    let mut weights = vec![0.0f32; n];
    let mut targets = vec![0.0f32; n * 4];
    let mut mask = vec![0.0f32; n * 4];
    for (i, a) in assignments.iter().enumerate() {
        if let AnchorAssignment::Positive { class, target, .. } = a {
            labels[i] = *class as u32;
            weights[i] = 1.0;
            targets[i * 4..i * 4 + 4].copy_from_slice(target);
            mask[i * 4..i * 4 + 4].fill(1.0);
        }
    }
    for &(_, i) in neg_scores.iter().take(nneg) {
        weights[i] = 1.0; // label stays background
    }

    // The CE op yields the weighted mean over selected rows; rescale to the
    // sum-over-selected / positive-count normalization.
    let ce_mean = tape.softmax_cross_entropy(out.logits, Arc::new(labels), Arc::new(weights))?;
    let selected = npos + nneg;
    let loss_cls = tape.scale(ce_mean, selected as f32 / npos.max(1) as f32)?;

    let loss_loc = if npos == 0 {
        tape.constant(Vec::new(), vec![0.0])?
    } else {
        let target_id = tape.constant(vec![n, 4], targets)?;
        let mask_id = tape.constant(vec![n, 4], mask)?;
        let raw = tape.smooth_l1(out.offsets, target_id, mask_id)?;
        // smooth_l1 divides by the 4*npos masked elements; rescale to the
        // per-positive normalization.
        tape.scale(raw, 4.0)?
    };

    Ok(LossBundle {
        loss_cls,
        loss_loc,
        npos,
        nneg,
    })
}
