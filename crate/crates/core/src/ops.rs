//! Raw numeric kernels behind the tape operations.
//!
//! Shapes are passed explicitly and assumed pre-validated by the tape layer.
//! Convolution has a vectorizable stride-1 fast path (the only stride the
//! detector uses) and a plain generic path for other strides. Inner products
//! accumulate in f32; scalar-valued reductions (losses, sums) accumulate in
//! f64 before narrowing back.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
        (extent + 2 * pad - k) / stride + 1
    }
}

/// Copies `[C,H,W]` into a zero-padded `[C,H+2p,W+2p]` buffer. The padded
/// layout removes all boundary handling from the stride-1 kernels: the
/// padding contributes exact zero terms.
fn pad_channels(input: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = crate::tape::pool::zeroed(c * ph * pw);
    for ci in 0..c {
        for y in 0..h {
            let src = ci * h * w + y * w;
            let dst = ci * ph * pw + (y + pad) * pw + pad;
            out[dst..dst + w].copy_from_slice(&input[src..src + w]);
        }
    }
    out
}

pub(crate) fn conv2d_forward(input: &[f32], kernels: &[f32], bias: &[f32], d: ConvDims, out: &mut [f32]) {
    debug_assert_eq!(out.len(), d.cout * d.oh * d.ow);
    if d.stride == 1 {
        conv2d_forward_s1(input, kernels, bias, d, out);
        return;
    }
    for co in 0..d.cout {
        let ob = co * d.oh * d.ow;
        out[ob..ob + d.oh * d.ow].fill(bias[co]);
        for ci in 0..d.cin {
            let ib = ci * d.h * d.w;
            let kb = (co * d.cin + ci) * d.k * d.k;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = 0.0f32;
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += kernels[kb + ky * d.k + kx]
                                * input[ib + iy as usize * d.w + ix as usize];
                        }
                    }
                    out[ob + oy * d.ow + ox] += acc;
                }
            }
        }
    }
}

fn conv2d_forward_s1(input: &[f32], kernels: &[f32], bias: &[f32], d: ConvDims, out: &mut [f32]) {
    let padded = pad_channels(input, d.cin, d.h, d.w, d.pad);
    let pw = d.w + 2 * d.pad;
    for co in 0..d.cout {
        let ob = co * d.oh * d.ow;
        out[ob..ob + d.oh * d.ow].fill(bias[co]);
        for ci in 0..d.cin {
            let ib = ci * (d.h + 2 * d.pad) * pw;
            let kb = (co * d.cin + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = kernels[kb + ky * d.k + kx];
                    for oy in 0..d.oh {
                        let irow = ib + (oy + ky) * pw + kx;
                        let orow = ob + oy * d.ow;
                        let src = &padded[irow..irow + d.ow];
                        let dst = &mut out[orow..orow + d.ow];
                        for i in 0..d.ow {
                            dst[i] += wgt * src[i];
                        }
                    }
                }
            }
        }
    }
    crate::tape::pool::give(padded);
}

pub(crate) struct ConvGrads<'a> {
    pub input: Option<&'a mut [f32]>,
    pub kernels: Option<&'a mut [f32]>,
    pub bias: Option<&'a mut [f32]>,
}

pub(crate) fn conv2d_backward(
    input: &[f32],
    kernels: &[f32],
    d: ConvDims,
    gout: &[f32],
    grads: ConvGrads<'_>,
) {
    let ConvGrads {
        input: mut gin,
        kernels: mut gker,
        bias: gbias,
    } = grads;

    if let Some(gbias) = gbias {
        for co in 0..d.cout {
            let ob = co * d.oh * d.ow;
            let mut acc = 0.0f64;
            for &g in &gout[ob..ob + d.oh * d.ow] {
                acc += g as f64;
            }
            gbias[co] += acc as f32;
        }
    }

    if d.stride == 1 {
        if let Some(gin) = gin {
            conv2d_backward_input_s1(kernels, d, gout, gin);
        }
        if let Some(gker) = gker {
            conv2d_backward_kernels_s1(input, d, gout, gker);
        }
        return;
    }

    // Generic stride: scatter per output element.
    for co in 0..d.cout {
        let ob = co * d.oh * d.ow;
        for ci in 0..d.cin {
            let ib = ci * d.h * d.w;
            let kb = (co * d.cin + ci) * d.k * d.k;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let g = gout[ob + oy * d.ow + ox];
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let ii = ib + iy as usize * d.w + ix as usize;
                            if let Some(gin) = gin.as_deref_mut() {
                                gin[ii] += kernels[kb + ky * d.k + kx] * g;
                            }
                            if let Some(gker) = gker.as_deref_mut() {
                                gker[kb + ky * d.k + kx] += input[ii] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input_s1(kernels: &[f32], d: ConvDims, gout: &[f32], gin: &mut [f32]) {
    // Scatter into a padded buffer, then fold the interior back; the pad
    // region absorbs out-of-image contributions.
    let (ph, pw) = (d.h + 2 * d.pad, d.w + 2 * d.pad);
    let mut gpad = crate::tape::pool::zeroed(d.cin * ph * pw);
    for co in 0..d.cout {
        let ob = co * d.oh * d.ow;
        for ci in 0..d.cin {
            let ib = ci * ph * pw;
            let kb = (co * d.cin + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wgt = kernels[kb + ky * d.k + kx];
                    for oy in 0..d.oh {
                        let irow = ib + (oy + ky) * pw + kx;
                        let orow = ob + oy * d.ow;
                        let src = &gout[orow..orow + d.ow];
                        let dst = &mut gpad[irow..irow + d.ow];
                        for i in 0..d.ow {
                            dst[i] += wgt * src[i];
                        }
                    }
                }
            }
        }
    }
    for ci in 0..d.cin {
        for y in 0..d.h {
            let src = ci * ph * pw + (y + d.pad) * pw + d.pad;
            let dst = ci * d.h * d.w + y * d.w;
            for x in 0..d.w {
                gin[dst + x] += gpad[src + x];
            }
        }
    }
    crate::tape::pool::give(gpad);
}

fn conv2d_backward_kernels_s1(input: &[f32], d: ConvDims, gout: &[f32], gker: &mut [f32]) {
    let padded = pad_channels(input, d.cin, d.h, d.w, d.pad);
    let pw = d.w + 2 * d.pad;
    for co in 0..d.cout {
        let ob = co * d.oh * d.ow;
        for ci in 0..d.cin {
            let ib = ci * (d.h + 2 * d.pad) * pw;
            let kb = (co * d.cin + ci) * d.k * d.k;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    // Four rotating 8-lane accumulators: a fixed, deterministic
                    // summation order that also breaks the add latency chain.
                    let mut acc = [[0.0f32; 8]; 4];
                    for oy in 0..d.oh {
                        let a = &mut acc[oy & 3];
                        let irow = ib + (oy + ky) * pw + kx;
                        let orow = ob + oy * d.ow;
                        let src = &padded[irow..irow + d.ow];
                        let g = &gout[orow..orow + d.ow];
                        let chunks = d.ow / 8;
                        for c in 0..chunks {
                            let s8 = &src[c * 8..c * 8 + 8];
                            let g8 = &g[c * 8..c * 8 + 8];
                            for l in 0..8 {
                                a[l] += s8[l] * g8[l];
                            }
                        }
                        for i in chunks * 8..d.ow {
                            a[i % 8] += src[i] * g[i];
                        }
                    }
                    let mut s = 0.0f32;
                    for a in &acc {
                        s += ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
                    }
                    gker[kb + ky * d.k + kx] += s;
                }
            }
        }
    }
    crate::tape::pool::give(padded);
}

pub(crate) fn relu_forward(input: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(input) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub(crate) fn relu_backward(input: &[f32], gout: &[f32], gin: &mut [f32]) {
    for i in 0..input.len() {
        gin[i] += if input[i] > 0.0 { gout[i] } else { 0.0 };
    }
}

/// 2x2 non-overlapping max pool; records the flat input index of each
/// window's maximum (first index wins ties).
pub(crate) fn maxpool2_forward(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f32],
    argmax: &mut Vec<u32>,
) {
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.resize(c * oh * ow, 0);
    for ch in 0..c {
        let ib = ch * h * w;
        let ob = ch * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ib + (2 * oy) * w + 2 * ox;
                let cells = [base, base + 1, base + w, base + w + 1];
                let mut best = cells[0];
                let mut val = input[cells[0]];
                for &ci in &cells[1..] {
                    if input[ci] > val {
                        val = input[ci];
                        best = ci;
                    }
                }
                let o = ob + oy * ow + ox;
                out[o] = val;
                argmax[o] = best as u32;
            }
        }
    }
}

pub(crate) fn maxpool2_backward(argmax: &[u32], gout: &[f32], gin: &mut [f32]) {
    for (i, &src) in argmax.iter().enumerate() {
        gin[src as usize] += gout[i];
    }
}

/// Softmax cross-entropy over `[n, c]` logits; returns the loss and fills
/// `probs` with row softmaxes for the backward pass.
///
/// Loss is the weighted mean sum(w_i * nll_i) / sum(w_i); an all-zero weight
/// vector yields zero loss.
pub(crate) fn softmax_ce_forward(
    logits: &[f32],
    n: usize,
    c: usize,
    labels: &[u32],
    weights: &[f32],
    probs: &mut Vec<f32>,
) -> (f32, f64) {
    probs.clear();
    probs.resize(n * c, 0.0);
    let mut wsum = 0.0f64;
    let mut acc = 0.0f64;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sumexp = 0.0f64;
        for &v in row {
            sumexp += ((v - m) as f64).exp();
        }
        let lse = sumexp.ln();
        let prow = &mut probs[i * c..(i + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            prow[j] = (((v - m) as f64).exp() / sumexp) as f32;
        }
        let w = weights[i] as f64;
        if w != 0.0 {
            let nll = lse - (row[labels[i] as usize] - m) as f64;
            acc += w * nll;
            wsum += w;
        }
    }
    let loss = if wsum > 0.0 { acc / wsum } else { 0.0 };
    (loss as f32, wsum)
}

pub(crate) fn softmax_ce_backward(
    probs: &[f32],
    n: usize,
    c: usize,
    labels: &[u32],
    weights: &[f32],
    wsum: f64,
    gout: f32,
    glogits: &mut [f32],
) {
    if wsum <= 0.0 {
        return;
    }
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let scale = gout * (w as f64 / wsum) as f32;
        let prow = &probs[i * c..(i + 1) * c];
        let grow = &mut glogits[i * c..(i + 1) * c];
        for j in 0..c {
            grow[j] += scale * prow[j];
        }
        grow[labels[i] as usize] -= scale;
    }
}

/// Masked smooth-L1 (Huber with breakpoint 1.0), normalized by the count of
/// nonzero mask entries (floored at 1).
pub(crate) fn smooth_l1_forward(pred: &[f32], target: &[f32], mask: &[f32]) -> (f32, usize) {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask[i] != 0.0 {
            count += 1;
            let d = (pred[i] - target[i]) as f64;
            acc += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
    }
    ((acc / count.max(1) as f64) as f32, count)
}

pub(crate) fn smooth_l1_backward(
    pred: &[f32],
    target: &[f32],
    mask: &[f32],
    count: usize,
    gout: f32,
    gpred: &mut [f32],
) {
    let scale = gout / count.max(1) as f32;
    for i in 0..pred.len() {
        if mask[i] != 0.0 {
            let d = pred[i] - target[i];
            let dd = if d.abs() < 1.0 {
                d
            } else if d > 0.0 {
                1.0
            } else {
                -1.0
            };
            gpred[i] += scale * dd;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvDims {
        ConvDims {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: ConvDims::out_extent(h, k, stride, pad),
            ow: ConvDims::out_extent(w, k, stride, pad),
        }
    }

    /// Direct-summation reference: literal four-nested-loop convolution.
    fn conv_reference(input: &[f32], kernels: &[f32], bias: &[f32], d: ConvDims) -> Vec<f32> {
        let mut out = vec![0.0; d.cout * d.oh * d.ow];
        for co in 0..d.cout {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias[co] as f64;
                    for ci in 0..d.cin {
                        for ky in 0..d.k {
                            for kx in 0..d.k {
                                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if iy >= 0 && (iy as usize) < d.h && ix >= 0 && (ix as usize) < d.w {
                                    acc += (kernels[((co * d.cin + ci) * d.k + ky) * d.k + kx]
                                        * input[ci * d.h * d.w + iy as usize * d.w + ix as usize])
                                        as f64;
                                }
                            }
                        }
                    }
                    out[co * d.oh * d.ow + oy * d.ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn stride1_matches_reference_with_padding() {
        let d = dims(2, 5, 7, 3, 3, 1, 1);
        let input: Vec<f32> = (0..2 * 5 * 7).map(|i| ((i * 37 % 19) as f32 - 9.0) * 0.1).collect();
        let kernels: Vec<f32> = (0..3 * 2 * 9).map(|i| ((i * 11 % 13) as f32 - 6.0) * 0.05).collect();
        let bias = vec![0.3, -0.2, 0.05];
        let mut out = vec![0.0; 3 * d.oh * d.ow];
        conv2d_forward(&input, &kernels, &bias, d, &mut out);
        let want = conv_reference(&input, &kernels, &bias, d);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn strided_path_matches_reference() {
        let d = dims(1, 6, 6, 2, 3, 2, 1);
        let input: Vec<f32> = (0..36).map(|i| (i as f32).sin()).collect();
        let kernels: Vec<f32> = (0..2 * 9).map(|i| (i as f32 * 0.7).cos() * 0.2).collect();
        let bias = vec![0.0, 1.0];
        let mut out = vec![0.0; 2 * d.oh * d.ow];
        conv2d_forward(&input, &kernels, &bias, d, &mut out);
        let want = conv_reference(&input, &kernels, &bias, d);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn maxpool_first_index_wins_ties() {
        let input = vec![2.0, 2.0, 2.0, 2.0];
        let mut out = vec![0.0; 1];
        let mut argmax = Vec::new();
        maxpool2_forward(&input, 1, 2, 2, &mut out, &mut argmax);
        assert_eq!(out[0], 2.0);
        assert_eq!(argmax, vec![0]);
    }
}
