//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A `Tape` owns every intermediate buffer of one forward computation.
//! Operations are recorded in execution order, which is a valid topological
//! order, so `backward` replays the records once in reverse. A tape feeds
//! exactly one backward pass; further recording or a second backward is
//! rejected.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, ConvDims, ConvGrads};
use crate::tensor::Tensor;

/// Thread-local recycling of large value/gradient buffers. Forward passes
/// allocate dozens of 50-300 KB buffers; without reuse every one goes
/// through mmap and a page-fault storm. Buffers are always fully written
/// before being read, so reuse cannot leak values between computations.
pub(crate) mod pool {
    use std::cell::RefCell;

    const MIN_FLOATS: usize = 8192;
    const MAX_KEEP: usize = 32;

    thread_local! {
        static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
    }

    /// Empty buffer with capacity for at least `n` floats.
    pub fn take(n: usize) -> Vec<f32> {
        if n < MIN_FLOATS {
            return Vec::with_capacity(n);
        }
        POOL.with(|p| {
            let mut p = p.borrow_mut();
            // Best fit: smallest buffer that still holds n floats, so small
            // requests do not burn the large recycled buffers.
            let mut best: Option<(usize, usize)> = None;
            for (i, b) in p.iter().enumerate() {
                let cap = b.capacity();
                if cap >= n && best.map_or(true, |(_, c)| cap < c) {
                    best = Some((i, cap));
                }
            }
            if let Some((i, _)) = best {
                let mut b = p.swap_remove(i);
                b.clear();
                b
            } else {
                Vec::with_capacity(n)
            }
        })
    }

    pub fn zeroed(n: usize) -> Vec<f32> {
        let mut v = take(n);
        v.resize(n, 0.0);
        v
    }

    pub fn copied(src: &[f32]) -> Vec<f32> {
        let mut v = take(src.len());
        v.extend_from_slice(src);
        v
    }

    pub fn give(v: Vec<f32>) {
        if v.capacity() >= MIN_FLOATS {
            POOL.with(|p| {
                let mut p = p.borrow_mut();
                if p.len() < MAX_KEEP {
                    p.push(v);
                }
            });
        }
    }
}

/// Handle to a value held by a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(u32);

struct Slot {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
}

enum OpRecord {
    Conv2d {
        input: u32,
        kernels: u32,
        bias: u32,
        out: u32,
        dims: ConvDims,
    },
    Relu {
        input: u32,
        out: u32,
    },
    MaxPool2 {
        input: u32,
        out: u32,
        argmax: Vec<u32>,
    },
    SoftmaxCe {
        logits: u32,
        out: u32,
        labels: Arc<Vec<u32>>,
        weights: Arc<Vec<f32>>,
        probs: Vec<f32>,
        wsum: f64,
    },
    SmoothL1 {
        pred: u32,
        target: u32,
        mask: u32,
        out: u32,
        count: usize,
    },
    Add {
        a: u32,
        b: u32,
        out: u32,
    },
    Affine {
        input: u32,
        out: u32,
        mul: f32,
    },
    Sum {
        input: u32,
        out: u32,
    },
    Reindex {
        input: u32,
        out: u32,
        index: Arc<Vec<u32>>,
    },
    Concat0 {
        a: u32,
        b: u32,
        out: u32,
    },
}

/// Gradients produced by one backward pass, keyed by tape value id.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&[f32]> {
        self.grads
            .get(id.0 as usize)
            .and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Vec<f32>> {
        self.grads.get_mut(id.0 as usize).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<OpRecord>,
    consumed: bool,
}

impl Drop for Tape {
    fn drop(&mut self) {
        for slot in self.slots.drain(..) {
            pool::give(slot.data);
        }
    }
}

impl Drop for Gradients {
    fn drop(&mut self) {
        for g in self.grads.drain(..).flatten() {
            pool::give(g);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_slot(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.slots.push(Slot {
            data,
            shape,
            needs_grad,
        });
        ValueId(self.slots.len() as u32 - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Registers a tensor as a leaf using its own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<ValueId> {
        self.leaf_req(t, t.requires_grad())
    }

    /// Registers a tensor as a leaf, overriding whether gradients flow to it.
    pub fn leaf_req(&mut self, t: &Tensor, requires_grad: bool) -> Result<ValueId> {
        self.check_live()?;
        Ok(self.push_slot(t.shape().to_vec(), pool::copied(t.values()), requires_grad))
    }

    /// Registers a constant buffer (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<ValueId> {
        self.check_live()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "constant shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(self.push_slot(shape, data, false))
    }

    pub fn value(&self, id: ValueId) -> &[f32] {
        &self.slots[id.0 as usize].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.slots[id.0 as usize].shape
    }

    /// The single value of a scalar result.
    pub fn scalar_value(&self, id: ValueId) -> f32 {
        debug_assert_eq!(self.slots[id.0 as usize].data.len(), 1);
        self.slots[id.0 as usize].data[0]
    }

    pub fn to_tensor(&self, id: ValueId) -> Result<Tensor> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
    }

    fn needs(&self, id: ValueId) -> bool {
        self.slots[id.0 as usize].needs_grad
    }

    fn dims3(&self, id: ValueId, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(id) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::Shape(format!("{what}: expected rank-3 [C,H,W], got {s:?}"))),
        }
    }

    /// 2-D convolution with square kernels. Output extent per axis is
    /// `(extent + 2*pad - k)/stride + 1`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        self.check_live()?;
        let (cin, h, w) = self.dims3(input, "conv2d input")?;
        let (cout, kcin, kh, kw) = match self.shape(kernels) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(Error::Shape(format!(
                    "conv2d kernels: expected rank-4 [Cout,Cin,k,k], got {s:?}"
                )))
            }
        };
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernels must be square, got {kh}x{kw}")));
        }
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: kernels expect Cin={kcin}, input has Cin={cin}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias: expected [{cout}], got {:?}",
                self.shape(bias)
            )));
        }
        if stride < 1 {
            return Err(Error::Invalid("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let dims = ConvDims {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh: ConvDims::out_extent(h, kh, stride, pad),
            ow: ConvDims::out_extent(w, kw, stride, pad),
        };
        let mut out = pool::zeroed(cout * dims.oh * dims.ow);
        ops::conv2d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            dims,
            &mut out,
        );
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        let out_id = self.push_slot(vec![cout, dims.oh, dims.ow], out, needs);
        self.ops.push(OpRecord::Conv2d {
            input: input.0,
            kernels: kernels.0,
            bias: bias.0,
            out: out_id.0,
            dims,
        });
        Ok(out_id)
    }

    /// Elementwise max(0, v); the subgradient at 0 is 0.
    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let mut out = pool::zeroed(self.value(input).len());
        ops::relu_forward(self.value(input), &mut out);
        let needs = self.needs(input);
        let shape = self.shape(input).to_vec();
        let out_id = self.push_slot(shape, out, needs);
        self.ops.push(OpRecord::Relu {
            input: input.0,
            out: out_id.0,
        });
        Ok(out_id)
    }

    /// 2x2 non-overlapping max pooling; gradient routes to the first-index
    /// maximum of each window.
    pub fn maxpool2(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let (c, h, w) = self.dims3(input, "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2 needs even extents, got {h}x{w}")));
        }
        let mut out = pool::zeroed(c * (h / 2) * (w / 2));
        let mut argmax = Vec::new();
        ops::maxpool2_forward(self.value(input), c, h, w, &mut out, &mut argmax);
        let needs = self.needs(input);
        let out_id = self.push_slot(vec![c, h / 2, w / 2], out, needs);
        self.ops.push(OpRecord::MaxPool2 {
            input: input.0,
            out: out_id.0,
            argmax,
        });
        Ok(out_id)
    }

    /// Weighted-mean softmax cross-entropy over `[N, C]` logits, stabilized
    /// by max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: Arc<Vec<u32>>,
        weights: Arc<Vec<f32>>,
    ) -> Result<ValueId> {
        self.check_live()?;
        let (n, c) = match self.shape(logits) {
            [n, c] => (*n, *c),
            s => return Err(Error::Shape(format!("softmax_ce logits: expected [N,C], got {s:?}"))),
        };
        if labels.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "softmax_ce: {n} rows but {} labels / {} weights",
                labels.len(),
                weights.len()
            )));
        }
        for &l in labels.iter() {
            if l as usize >= c {
                return Err(Error::LabelRange {
                    label: l as usize,
                    classes: c,
                });
            }
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Invalid("softmax_ce weights must be non-negative".into()));
        }
        let mut probs = Vec::new();
        let (loss, wsum) =
            ops::softmax_ce_forward(self.value(logits), n, c, &labels, &weights, &mut probs);
        let needs = self.needs(logits);
        let out_id = self.push_slot(Vec::new(), vec![loss], needs);
        self.ops.push(OpRecord::SoftmaxCe {
            logits: logits.0,
            out: out_id.0,
            labels,
            weights,
            probs,
            wsum,
        });
        Ok(out_id)
    }

    /// Masked smooth-L1: sum of huber(pred - target) over nonzero-mask
    /// elements, divided by max(1, count of masked elements).
    pub fn smooth_l1(&mut self, pred: ValueId, target: ValueId, mask: ValueId) -> Result<ValueId> {
        self.check_live()?;
        if self.shape(pred) != self.shape(target) || self.shape(pred) != self.shape(mask) {
            return Err(Error::Shape(format!(
                "smooth_l1: pred {:?}, target {:?}, mask {:?} must match",
                self.shape(pred),
                self.shape(target),
                self.shape(mask)
            )));
        }
        let (loss, count) =
            ops::smooth_l1_forward(self.value(pred), self.value(target), self.value(mask));
        let needs = self.needs(pred) || self.needs(target);
        let out_id = self.push_slot(Vec::new(), vec![loss], needs);
        self.ops.push(OpRecord::SmoothL1 {
            pred: pred.0,
            target: target.0,
            mask: mask.0,
            out: out_id.0,
            count,
        });
        Ok(out_id)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = pool::take(self.value(a).len());
        out.extend(self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y));
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        let out_id = self.push_slot(shape, out, needs);
        self.ops.push(OpRecord::Add {
            a: a.0,
            b: b.0,
            out: out_id.0,
        });
        Ok(out_id)
    }

    /// Elementwise `mul * v + add_const`.
    pub fn affine(&mut self, input: ValueId, mul: f32, add_const: f32) -> Result<ValueId> {
        self.check_live()?;
        let mut out = pool::take(self.value(input).len());
        out.extend(self.value(input).iter().map(|v| mul * v + add_const));
        let needs = self.needs(input);
        let shape = self.shape(input).to_vec();
        let out_id = self.push_slot(shape, out, needs);
        self.ops.push(OpRecord::Affine {
            input: input.0,
            out: out_id.0,
            mul,
        });
        Ok(out_id)
    }

    pub fn scale(&mut self, input: ValueId, factor: f32) -> Result<ValueId> {
        self.affine(input, factor, 0.0)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let mut acc = 0.0f64;
        for &v in self.value(input) {
            acc += v as f64;
        }
        let needs = self.needs(input);
        let out_id = self.push_slot(Vec::new(), vec![acc as f32], needs);
        self.ops.push(OpRecord::Sum {
            input: input.0,
            out: out_id.0,
        });
        Ok(out_id)
    }

    /// Gather: `out[i] = input[index[i]]`, reshaped to `out_shape`.
    pub fn reindex(
        &mut self,
        input: ValueId,
        index: Arc<Vec<u32>>,
        out_shape: Vec<usize>,
    ) -> Result<ValueId> {
        self.check_live()?;
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(Error::Shape(format!(
                "reindex: out shape {out_shape:?} vs {} indices",
                index.len()
            )));
        }
        let src = self.value(input);
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= src.len()) {
            return Err(Error::Shape(format!(
                "reindex: index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let mut out = pool::take(index.len());
        out.extend(index.iter().map(|&i| src[i as usize]));
        let needs = self.needs(input);
        let out_id = self.push_slot(out_shape, out, needs);
        self.ops.push(OpRecord::Reindex {
            input: input.0,
            out: out_id.0,
            index,
        });
        Ok(out_id)
    }

    /// Concatenation along axis 0; trailing dimensions must match.
    pub fn concat0(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!("concat0: {sa:?} vs {sb:?}")));
        }
        let mut out = pool::take(self.value(a).len() + self.value(b).len());
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let needs = self.needs(a) || self.needs(b);
        let out_id = self.push_slot(shape, out, needs);
        self.ops.push(OpRecord::Concat0 {
            a: a.0,
            b: b.0,
            out: out_id.0,
        });
        Ok(out_id)
    }

    /// Runs the backward pass from a scalar loss, consuming the tape.
    ///
    /// Returns the accumulated gradient for every value that required one;
    /// leaves registered without `requires_grad` are skipped.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        self.check_live()?;
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.slots.len()];
        grads[loss.0 as usize] = Some(vec![1.0]);

        macro_rules! grad_buf {
            ($grads:expr, $self:expr, $id:expr) => {{
                let idx = $id as usize;
                if $grads[idx].is_none() {
                    $grads[idx] = Some(pool::zeroed($self.slots[idx].data.len()));
                }
                $grads[idx].as_mut().unwrap()
            }};
        }

        for op in self.ops.iter().rev() {
            match op {
                OpRecord::Conv2d {
                    input,
                    kernels,
                    bias,
                    out,
                    dims,
                } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    let need_in = self.slots[*input as usize].needs_grad;
                    let need_k = self.slots[*kernels as usize].needs_grad;
                    let need_b = self.slots[*bias as usize].needs_grad;
                    if !(need_in || need_k || need_b) {
                        continue;
                    }
                    // Split borrows: take buffers out, then put them back.
                    let mut gin = if need_in {
                        Some(grads[*input as usize].take().unwrap_or_else(|| {
                            pool::zeroed(self.slots[*input as usize].data.len())
                        }))
                    } else {
                        None
                    };
                    let mut gker = if need_k {
                        Some(grads[*kernels as usize].take().unwrap_or_else(|| {
                            pool::zeroed(self.slots[*kernels as usize].data.len())
                        }))
                    } else {
                        None
                    };
                    let mut gbias = if need_b {
                        Some(grads[*bias as usize].take().unwrap_or_else(|| {
                            pool::zeroed(self.slots[*bias as usize].data.len())
                        }))
                    } else {
                        None
                    };
                    ops::conv2d_backward(
                        &self.slots[*input as usize].data,
                        &self.slots[*kernels as usize].data,
                        *dims,
                        &gout,
                        ConvGrads {
                            input: gin.as_deref_mut(),
                            kernels: gker.as_deref_mut(),
                            bias: gbias.as_deref_mut(),
                        },
                    );
                    if let Some(g) = gin {
                        grads[*input as usize] = Some(g);
                    }
                    if let Some(g) = gker {
                        grads[*kernels as usize] = Some(g);
                    }
                    if let Some(g) = gbias {
                        grads[*bias as usize] = Some(g);
                    }
                    pool::give(gout);
                }
                OpRecord::Relu { input, out } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if !self.slots[*input as usize].needs_grad {
                        continue;
                    }
                    let gin = grad_buf!(grads, self, *input);
                    ops::relu_backward(&self.slots[*input as usize].data, &gout, gin);
                    pool::give(gout);
                }
                OpRecord::MaxPool2 { input, out, argmax } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if !self.slots[*input as usize].needs_grad {
                        continue;
                    }
                    let gin = grad_buf!(grads, self, *input);
                    ops::maxpool2_backward(argmax, &gout, gin);
                    pool::give(gout);
                }
                OpRecord::SoftmaxCe {
                    logits,
                    out,
                    labels,
                    weights,
                    probs,
                    wsum,
                } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if !self.slots[*logits as usize].needs_grad {
                        continue;
                    }
                    let [n, c] = self.slots[*logits as usize].shape[..] else { unreachable!() };
                    let gl = grad_buf!(grads, self, *logits);
                    ops::softmax_ce_backward(probs, n, c, labels, weights, *wsum, gout[0], gl);
                }
                OpRecord::SmoothL1 {
                    pred,
                    target,
                    mask,
                    out,
                    count,
                } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if self.slots[*pred as usize].needs_grad {
                        let mut gp = grads[*pred as usize].take().unwrap_or_else(|| {
                            pool::zeroed(self.slots[*pred as usize].data.len())
                        });
                        ops::smooth_l1_backward(
                            &self.slots[*pred as usize].data,
                            &self.slots[*target as usize].data,
                            &self.slots[*mask as usize].data,
                            *count,
                            gout[0],
                            &mut gp,
                        );
                        grads[*pred as usize] = Some(gp);
                    }
                    if self.slots[*target as usize].needs_grad {
                        // d/dtarget = -d/dpred
                        let mut gt = grads[*target as usize].take().unwrap_or_else(|| {
                            pool::zeroed(self.slots[*target as usize].data.len())
                        });
                        ops::smooth_l1_backward(
                            &self.slots[*pred as usize].data,
                            &self.slots[*target as usize].data,
                            &self.slots[*mask as usize].data,
                            *count,
                            -gout[0],
                            &mut gt,
                        );
                        grads[*target as usize] = Some(gt);
                    }
                }
                OpRecord::Add { a, b, out } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    for src in [a, b] {
                        if self.slots[*src as usize].needs_grad {
                            let g = grad_buf!(grads, self, *src);
                            for i in 0..gout.len() {
                                g[i] += gout[i];
                            }
                        }
                    }
                }
                OpRecord::Affine { input, out, mul } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if !self.slots[*input as usize].needs_grad {
                        continue;
                    }
                    let gin = grad_buf!(grads, self, *input);
                    for i in 0..gout.len() {
                        gin[i] += mul * gout[i];
                    }
                    pool::give(gout);
                }
                OpRecord::Sum { input, out } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if !self.slots[*input as usize].needs_grad {
                        continue;
                    }
                    let gin = grad_buf!(grads, self, *input);
                    for g in gin.iter_mut() {
                        *g += gout[0];
                    }
                }
                OpRecord::Reindex { input, out, index } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    if !self.slots[*input as usize].needs_grad {
                        continue;
                    }
                    let gin = grad_buf!(grads, self, *input);
                    for (i, &src) in index.iter().enumerate() {
                        gin[src as usize] += gout[i];
                    }
                    pool::give(gout);
                }
                OpRecord::Concat0 { a, b, out } => {
                    let Some(gout) = grads[*out as usize].take() else { continue };
                    let na = self.slots[*a as usize].data.len();
                    if self.slots[*a as usize].needs_grad {
                        let g = grad_buf!(grads, self, *a);
                        for i in 0..na {
                            g[i] += gout[i];
                        }
                    }
                    if self.slots[*b as usize].needs_grad {
                        let g = grad_buf!(grads, self, *b);
                        for i in 0..g.len() {
                            g[i] += gout[na + i];
                        }
                    }
                    pool::give(gout);
                }
            }
        }

        // Drop intermediates: only gradient-requiring slots keep results.
        for (i, slot) in self.slots.iter().enumerate() {
            if !slot.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}
