//! Wengert-list tape: ops are recorded in forward order and replayed in
//! reverse to accumulate exact gradients.
//!
//! Tensors live in an arena owned by the tape; `TensorId` is the handle ops
//! exchange. Gradients add across fan-out, so registering one parameter and
//! using it from several places (the weight-stitched branches do exactly
//! that) yields the summed gradient on the single shared leaf.

use super::ops;
use super::{dims_product, Tensor};
use crate::error::TensorError;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

struct Slot {
    tensor: Tensor,
    /// True when this slot's gradient must be tracked, either because the
    /// tensor is a trainable leaf or because a tracked value feeds it.
    needs_grad: bool,
}

enum Node {
    Conv2d { input: TensorId, kernel: TensorId, bias: Option<TensorId>, out: TensorId },
    Upsample2x { input: TensorId, kernel: TensorId, out: TensorId },
    MaxPool2d { input: TensorId, out: TensorId, argmax: Vec<u32> },
    ConcatChannels { inputs: Vec<TensorId>, out: TensorId },
    Relu { input: TensorId, out: TensorId },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// True when `mean`/`inv_std` were computed from this batch (so the
        /// backward pass must differentiate through the statistics).
        batch_stats: bool,
    },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { input: TensorId, factor: f64, out: TensorId },
    PixelSoftmax2 { input: TensorId, out: TensorId },
    SumAll { input: TensorId, out: TensorId },
    /// Per-image weighted cross-entropy sums; `pos_w`/`neg_w` hold one
    /// weight per batch element for the foreground and background terms.
    BceSum { pred: TensorId, target: TensorId, pos_w: Vec<f64>, neg_w: Vec<f64>, out: TensorId },
    /// Per-image Euclidean norm of (a - b), one value per batch element.
    DiffNormPerImage { a: TensorId, b: TensorId, out: TensorId },
}

/// Probabilities inside the cross-entropy are clamped to
/// [`BCE_CLAMP`, 1 - `BCE_CLAMP`] before the logarithm.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers an externally built tensor. Its `requires_grad` flag
    /// decides whether `backward` will populate its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, needs_grad)
    }

    /// Registers a non-trainable value (inputs, targets, frozen weights).
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, false)
    }

    fn push(&mut self, tensor: Tensor, needs_grad: bool) -> TensorId {
        let id = TensorId(self.slots.len());
        self.slots.push(Slot { tensor, needs_grad });
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.slots[id.0].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.slots[id.0].tensor.grad()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Index of the first non-finite tensor on the tape along with a short
    /// description of the op that produced it, if any value went non-finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for (i, slot) in self.slots.iter().enumerate() {
            if !slot.tensor.all_finite() {
                let op = self
                    .nodes
                    .iter()
                    .find(|n| n.out().0 == i)
                    .map_or("leaf", |n| n.name());
                return Some((i, op));
            }
        }
        None
    }

    fn out_of(&mut self, dims: &[usize], needs: bool) -> TensorId {
        let t = Tensor::zeros(dims);
        self.push(t, needs)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.slots[id.0].needs_grad
    }

    fn vals(&self, id: TensorId) -> &[f64] {
        self.slots[id.0].tensor.values()
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    /// Stride-1 same-padding convolution over an NCHW batch with an odd
    /// square kernel laid out [out_ch, in_ch, k, k] and optional bias.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let kd = self.value(kernel).dims().to_vec();
        let (co, kci, k) = match kd.as_slice() {
            &[co, kci, kh, kw] if kh == kw => (co, kci, kh),
            _ => {
                return Err(TensorError::shape(
                    "conv2d",
                    "square kernel [out, in, k, k]",
                    format!("{kd:?}"),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(TensorError::unsupported("conv2d", format!("even kernel size {k}")));
        }
        if kci != ci {
            return Err(TensorError::shape(
                "conv2d",
                format!("{ci} kernel input channels"),
                format!("{kci}"),
            ));
        }
        if let Some(b) = bias {
            let bd = self.value(b).dims();
            if bd != [co] {
                return Err(TensorError::shape("conv2d", format!("bias [{co}]"), format!("{bd:?}")));
            }
        }
        let needs =
            self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let out = self.out_of(&[n, co, h, w], needs);
        {
            let (inp, ker, bv, dst) = split3(&mut self.slots, input, kernel, bias, out);
            ops::conv2d_forward(inp, n, ci, h, w, ker, co, k, bv, dst);
        }
        self.nodes.push(Node::Conv2d { input, kernel, bias, out });
        Ok(out)
    }

    /// Learned 2x upsampling: transposed convolution with a 4x4 kernel laid
    /// out [in_ch, out_ch, 4, 4], stride 2, padding 1.
    pub fn upsample2x(&mut self, input: TensorId, kernel: TensorId) -> Result<TensorId, TensorError> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let kd = self.value(kernel).dims().to_vec();
        let (kci, co) = match kd.as_slice() {
            &[kci, co, 4, 4] => (kci, co),
            _ => {
                return Err(TensorError::shape(
                    "upsample2x",
                    "kernel [in, out, 4, 4]",
                    format!("{kd:?}"),
                ))
            }
        };
        if kci != ci {
            return Err(TensorError::shape(
                "upsample2x",
                format!("{ci} kernel input channels"),
                format!("{kci}"),
            ));
        }
        let needs = self.needs(input) || self.needs(kernel);
        let out = self.out_of(&[n, co, 2 * h, 2 * w], needs);
        {
            let (inp, ker, _, dst) = split3(&mut self.slots, input, kernel, None, out);
            ops::upsample2x_forward(inp, n, ci, h, w, ker, co, dst);
        }
        self.nodes.push(Node::Upsample2x { input, kernel, out });
        Ok(out)
    }

    /// 2x2 stride-2 max pooling; H and W must be even.
    pub fn maxpool2d(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::unsupported("maxpool2d", format!("odd extent {h}x{w}")));
        }
        let needs = self.needs(input);
        let out = self.out_of(&[n, c, h / 2, w / 2], needs);
        let mut argmax = vec![0u32; n * c * (h / 2) * (w / 2)];
        {
            let (inp, _, _, dst) = split3(&mut self.slots, input, input, None, out);
            ops::maxpool2d_forward(inp, n, c, h, w, dst, &mut argmax);
        }
        self.nodes.push(Node::MaxPool2d { input, out, argmax });
        Ok(out)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::unsupported("concat_channels", "empty input list"));
        }
        let (n, mut c_total, h, w) = self.value(inputs[0]).dims4()?;
        for &id in &inputs[1..] {
            let (n2, c2, h2, w2) = self.value(id).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("batch {n} at {h}x{w}"),
                    format!("batch {n2} at {h2}x{w2}"),
                ));
            }
            c_total += c2;
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        let out = self.out_of(&[n, c_total, h, w], needs);
        let hw = h * w;
        let mut offset = 0usize;
        for &id in inputs {
            let c = self.value(id).dims()[1];
            for b in 0..n {
                let src_base = b * c * hw;
                let dst_base = (b * c_total + offset) * hw;
                let src = self.slots[id.0].tensor.values()[src_base..src_base + c * hw].to_vec();
                self.slots[out.0].tensor.values_mut()[dst_base..dst_base + c * hw]
                    .copy_from_slice(&src);
            }
            offset += c;
        }
        self.nodes.push(Node::ConcatChannels { inputs: inputs.to_vec(), out });
        Ok(out)
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        let needs = self.needs(input);
        let out = self.out_of(&dims, needs);
        let (inp, _, _, dst) = split3(&mut self.slots, input, input, None, out);
        for (d, s) in dst.iter_mut().zip(inp) {
            *d = s.max(0.0);
        }
        self.nodes.push(Node::Relu { input, out });
        Ok(out)
    }

    /// Channel-wise affine normalization. With `batch_stats` the batch mean
    /// and biased variance are used (and differentiated through); otherwise
    /// the provided frozen statistics are treated as constants.
    pub fn batchnorm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        frozen: Option<(&[f64], &[f64])>,
        epsilon: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>), TensorError> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let d = self.value(id).dims();
            if d != [c] {
                return Err(TensorError::shape("batchnorm", format!("{name} [{c}]"), format!("{d:?}")));
            }
        }
        let hw = h * w;
        let batch_stats = frozen.is_none();
        let (mean, var): (Vec<f64>, Vec<f64>) = match frozen {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => ops::channel_stats(self.vals(input), n, c, hw),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let out = self.out_of(&[n, c, h, w], needs);
        {
            let g = self.slots[gamma.0].tensor.values().to_vec();
            let bta = self.slots[beta.0].tensor.values().to_vec();
            let (inp, _, _, dst) = split3(&mut self.slots, input, input, None, out);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let (mu, istd, ga, be) = (mean[ch], inv_std[ch], g[ch], bta[ch]);
                    for (d, s) in dst[base..base + hw].iter_mut().zip(&inp[base..base + hw]) {
                        *d = ga * (s - mu) * istd + be;
                    }
                }
            }
        }
        self.nodes.push(Node::BatchNorm {
            input,
            gamma,
            beta,
            out,
            mean: mean.clone(),
            inv_std,
            batch_stats,
        });
        Ok((out, mean, var))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op(a, b, "add", |x, y| x + y, |out| Node::Add { a, b, out })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op(a, b, "sub", |x, y| x - y, |out| Node::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_op(a, b, "mul", |x, y| x * y, |out| Node::Mul { a, b, out })
    }

    fn zip_op(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        node: impl FnOnce(TensorId) -> Node,
    ) -> Result<TensorId, TensorError> {
        let da = self.value(a).dims().to_vec();
        let db = self.value(b).dims();
        if da != db {
            return Err(TensorError::shape(name, format!("{da:?}"), format!("{db:?}")));
        }
        let needs = self.needs(a) || self.needs(b);
        let out = self.out_of(&da, needs);
        let bv = self.slots[b.0].tensor.values().to_vec();
        let (av, _, _, dst) = split3(&mut self.slots, a, a, None, out);
        for ((d, x), y) in dst.iter_mut().zip(av).zip(&bv) {
            *d = f(*x, *y);
        }
        self.nodes.push(node(out));
        Ok(out)
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        let needs = self.needs(input);
        let out = self.out_of(&dims, needs);
        let (inp, _, _, dst) = split3(&mut self.slots, input, input, None, out);
        for (d, s) in dst.iter_mut().zip(inp) {
            *d = factor * s;
        }
        self.nodes.push(Node::Scale { input, factor, out });
        Ok(out)
    }

    /// Two-channel pixel softmax: input [N, 2, H, W], output [N, 1, H, W]
    /// holding the probability of channel 1 (the salient class), computed
    /// in shifted form so large scores cannot overflow.
    pub fn pixel_softmax2(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if c != 2 {
            return Err(TensorError::shape("pixel_softmax2", "2 channels", format!("{c}")));
        }
        let needs = self.needs(input);
        let out = self.out_of(&[n, 1, h, w], needs);
        let hw = h * w;
        let (inp, _, _, dst) = split3(&mut self.slots, input, input, None, out);
        for b in 0..n {
            for p in 0..hw {
                let s0 = inp[(b * 2) * hw + p];
                let s1 = inp[(b * 2 + 1) * hw + p];
                let m = s0.max(s1);
                let e0 = (s0 - m).exp();
                let e1 = (s1 - m).exp();
                dst[b * hw + p] = e1 / (e0 + e1);
            }
        }
        self.nodes.push(Node::PixelSoftmax2 { input, out });
        Ok(out)
    }

    /// Sums every element into a scalar.
    pub fn sum_all(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let needs = self.needs(input);
        let out = self.out_of(&[1], needs);
        let (inp, _, _, dst) = split3(&mut self.slots, input, input, None, out);
        dst[0] = inp.iter().sum();
        self.nodes.push(Node::SumAll { input, out });
        Ok(out)
    }

    /// Per-image weighted cross-entropy sums over [N, 1, H, W] tensors.
    /// `target` must be binary; `pos_w[b]` weights the foreground term and
    /// `neg_w[b]` the background term of batch element b. Output is [N].
    pub fn bce_sum_per_image(
        &mut self,
        pred: TensorId,
        target: TensorId,
        pos_w: Vec<f64>,
        neg_w: Vec<f64>,
    ) -> Result<TensorId, TensorError> {
        let (n, c, h, w) = self.value(pred).dims4()?;
        let td = self.value(target).dims();
        if c != 1 || td != [n, 1, h, w] {
            return Err(TensorError::shape(
                "bce",
                format!("pred and target [{n}, 1, {h}, {w}]"),
                format!("{:?} and {td:?}", self.value(pred).dims()),
            ));
        }
        if pos_w.len() != n || neg_w.len() != n {
            return Err(TensorError::shape("bce", format!("{n} weights"), "mismatch"));
        }
        if self.vals(target).iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::unsupported("bce", "target must be binary"));
        }
        let needs = self.needs(pred);
        let out = self.out_of(&[n], needs);
        let hw = h * w;
        let tv = self.slots[target.0].tensor.values().to_vec();
        let (pv, _, _, dst) = split3(&mut self.slots, pred, pred, None, out);
        for b in 0..n {
            let mut acc = 0.0;
            for p in 0..hw {
                let prob = pv[b * hw + p].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                if tv[b * hw + p] == 1.0 {
                    acc -= pos_w[b] * prob.ln();
                } else {
                    acc -= neg_w[b] * (1.0 - prob).ln();
                }
            }
            dst[b] = acc;
        }
        self.nodes.push(Node::BceSum { pred, target, pos_w, neg_w, out });
        Ok(out)
    }

    /// Euclidean norm of (a - b) per batch element; output is [N].
    pub fn diff_norm_per_image(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let da = self.value(a).dims().to_vec();
        let db = self.value(b).dims();
        if da != db {
            return Err(TensorError::shape("diff_norm", format!("{da:?}"), format!("{db:?}")));
        }
        let n = da[0];
        let per = dims_product(&da) / n.max(1);
        let needs = self.needs(a) || self.needs(b);
        let out = self.out_of(&[n], needs);
        let bv = self.slots[b.0].tensor.values().to_vec();
        let (av, _, _, dst) = split3(&mut self.slots, a, a, None, out);
        for i in 0..n {
            let mut acc = 0.0;
            for p in 0..per {
                let d = av[i * per + p] - bv[i * per + p];
                acc += d * d;
            }
            dst[i] = acc.sqrt();
        }
        self.nodes.push(Node::DiffNormPerImage { a, b, out });
        Ok(out)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss, accumulating
    /// gradients; every leaf registered with `requires_grad` ends up with
    /// its gradient populated (readable through [`Tape::grad`]).
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss { dims: self.value(loss).dims().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let out = self.nodes[idx].out();
            let Some(d_out) = grads[out.0].take() else { continue };
            self.node_backward(idx, &d_out, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.slots[i].tensor.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; self.slots[i].tensor.len()]);
                self.slots[i].tensor.set_grad(g);
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut Vec<Option<Vec<f64>>>, id: TensorId, add: impl FnOnce(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let g = grads[id.0].get_or_insert_with(|| vec![0.0; self.slots[id.0].tensor.len()]);
        add(g);
    }

    fn node_backward(&mut self, idx: usize, d_out: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        // Nodes are taken apart by value reads only; slots stay immutable
        // while gradients accumulate in the side table.
        match &self.nodes[idx] {
            &Node::Conv2d { input, kernel, bias, out: _ } => {
                let (n, ci, h, w) = self.value(input).dims4().expect("validated");
                let kd = self.value(kernel).dims();
                let (co, k) = (kd[0], kd[2]);
                if self.needs(input) {
                    let ker = self.vals(kernel).to_vec();
                    self.accum(grads, input, |g| {
                        ops::conv2d_backward_input(d_out, n, ci, h, w, &ker, co, k, g);
                    });
                }
                if self.needs(kernel) || bias.is_some_and(|b| self.needs(b)) {
                    let inp = self.vals(input).to_vec();
                    let mut dk = vec![0.0; self.value(kernel).len()];
                    let mut db = bias.map(|b| vec![0.0; self.value(b).len()]);
                    ops::conv2d_backward_kernel(
                        d_out,
                        &inp,
                        n,
                        ci,
                        h,
                        w,
                        co,
                        k,
                        &mut dk,
                        db.as_deref_mut(),
                    );
                    self.accum(grads, kernel, |g| {
                        for (gv, dv) in g.iter_mut().zip(&dk) {
                            *gv += dv;
                        }
                    });
                    if let (Some(b), Some(db)) = (bias, db) {
                        self.accum(grads, b, |g| {
                            for (gv, dv) in g.iter_mut().zip(&db) {
                                *gv += dv;
                            }
                        });
                    }
                }
            }
            &Node::Upsample2x { input, kernel, out: _ } => {
                let (n, ci, h, w) = self.value(input).dims4().expect("validated");
                let co = self.value(kernel).dims()[1];
                if self.needs(input) {
                    let ker = self.vals(kernel).to_vec();
                    self.accum(grads, input, |g| {
                        ops::upsample2x_backward_input(d_out, n, ci, h, w, &ker, co, g);
                    });
                }
                if self.needs(kernel) {
                    let inp = self.vals(input).to_vec();
                    self.accum(grads, kernel, |g| {
                        ops::upsample2x_backward_kernel(d_out, &inp, n, ci, h, w, co, g);
                    });
                }
            }
            Node::MaxPool2d { input, out: _, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                self.accum(grads, input, |g| {
                    for (i, &src) in argmax.iter().enumerate() {
                        g[src as usize] += d_out[i];
                    }
                });
            }
            Node::ConcatChannels { inputs, out } => {
                let inputs = inputs.clone();
                let (n, c_total, h, w) = self.value(*out).dims4().expect("validated");
                let hw = h * w;
                let mut offset = 0usize;
                for id in inputs {
                    let c = self.value(id).dims()[1];
                    self.accum(grads, id, |g| {
                        for b in 0..n {
                            let src = (b * c_total + offset) * hw;
                            let dst = b * c * hw;
                            for p in 0..c * hw {
                                g[dst + p] += d_out[src + p];
                            }
                        }
                    });
                    offset += c;
                }
            }
            &Node::Relu { input, out: _ } => {
                let inp = self.vals(input).to_vec();
                self.accum(grads, input, |g| {
                    for (i, gv) in g.iter_mut().enumerate() {
                        if inp[i] > 0.0 {
                            *gv += d_out[i];
                        }
                    }
                });
            }
            Node::BatchNorm { input, gamma, beta, out: _, mean, inv_std, batch_stats } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (mean, inv_std, batch_stats) = (mean.clone(), inv_std.clone(), *batch_stats);
                let (n, c, h, w) = self.value(input).dims4().expect("validated");
                let hw = h * w;
                let m = (n * hw) as f64;
                let inp = self.vals(input).to_vec();
                let gam = self.vals(gamma).to_vec();

                // Per-channel reductions shared by all three gradients.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let (mu, istd) = (mean[ch], inv_std[ch]);
                        let mut s = 0.0;
                        let mut sx = 0.0;
                        for p in 0..hw {
                            let dy = d_out[base + p];
                            s += dy;
                            sx += dy * (inp[base + p] - mu) * istd;
                        }
                        sum_dy[ch] += s;
                        sum_dy_xhat[ch] += sx;
                    }
                }
                self.accum(grads, beta, |g| {
                    for ch in 0..c {
                        g[ch] += sum_dy[ch];
                    }
                });
                self.accum(grads, gamma, |g| {
                    for ch in 0..c {
                        g[ch] += sum_dy_xhat[ch];
                    }
                });
                self.accum(grads, input, |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let (mu, istd, ga) = (mean[ch], inv_std[ch], gam[ch]);
                            if batch_stats {
                                let (sd, sdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                                for p in 0..hw {
                                    let xhat = (inp[base + p] - mu) * istd;
                                    g[base + p] += ga * istd * (d_out[base + p] - sd - xhat * sdx);
                                }
                            } else {
                                for p in 0..hw {
                                    g[base + p] += ga * istd * d_out[base + p];
                                }
                            }
                        }
                    }
                });
            }
            &Node::Add { a, b, out: _ } => {
                self.accum(grads, a, |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out) {
                        *gv += dv;
                    }
                });
                self.accum(grads, b, |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out) {
                        *gv += dv;
                    }
                });
            }
            &Node::Sub { a, b, out: _ } => {
                self.accum(grads, a, |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out) {
                        *gv += dv;
                    }
                });
                self.accum(grads, b, |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out) {
                        *gv -= dv;
                    }
                });
            }
            &Node::Mul { a, b, out: _ } => {
                let av = self.vals(a).to_vec();
                let bv = self.vals(b).to_vec();
                self.accum(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += d_out[i] * bv[i];
                    }
                });
                self.accum(grads, b, |g| {
                    for i in 0..g.len() {
                        g[i] += d_out[i] * av[i];
                    }
                });
            }
            &Node::Scale { input, factor, out: _ } => {
                self.accum(grads, input, |g| {
                    for (gv, dv) in g.iter_mut().zip(d_out) {
                        *gv += factor * dv;
                    }
                });
            }
            &Node::PixelSoftmax2 { input, out } => {
                let p = self.vals(out).to_vec();
                let (n, _, h, w) = self.value(input).dims4().expect("validated");
                let hw = h * w;
                self.accum(grads, input, |g| {
                    for b in 0..n {
                        for i in 0..hw {
                            let t = d_out[b * hw + i] * p[b * hw + i] * (1.0 - p[b * hw + i]);
                            g[(b * 2) * hw + i] -= t;
                            g[(b * 2 + 1) * hw + i] += t;
                        }
                    }
                });
            }
            &Node::SumAll { input, out: _ } => {
                let d = d_out[0];
                self.accum(grads, input, |g| {
                    for gv in g.iter_mut() {
                        *gv += d;
                    }
                });
            }
            Node::BceSum { pred, target, pos_w, neg_w, out: _ } => {
                let pred = *pred;
                let (pos_w, neg_w) = (pos_w.clone(), neg_w.clone());
                let tv = self.vals(*target).to_vec();
                let pv = self.vals(pred).to_vec();
                let n = pos_w.len();
                let hw = pv.len() / n.max(1);
                self.accum(grads, pred, |g| {
                    for b in 0..n {
                        for p in 0..hw {
                            let i = b * hw + p;
                            let prob = pv[i];
                            // The clamp is flat outside its interval, so the
                            // gradient there is zero.
                            if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&prob) {
                                continue;
                            }
                            let d = if tv[i] == 1.0 {
                                -pos_w[b] / prob
                            } else {
                                neg_w[b] / (1.0 - prob)
                            };
                            g[i] += d_out[b] * d;
                        }
                    }
                });
            }
            &Node::DiffNormPerImage { a, b, out } => {
                let av = self.vals(a).to_vec();
                let bv = self.vals(b).to_vec();
                let norms = self.vals(out).to_vec();
                let n = norms.len();
                let per = av.len() / n.max(1);
                let scaled = |i: usize, p: usize| {
                    let norm = norms[i];
                    if norm > 0.0 {
                        d_out[i] * (av[i * per + p] - bv[i * per + p]) / norm
                    } else {
                        0.0
                    }
                };
                self.accum(grads, a, |g| {
                    for i in 0..n {
                        for p in 0..per {
                            g[i * per + p] += scaled(i, p);
                        }
                    }
                });
                self.accum(grads, b, |g| {
                    for i in 0..n {
                        for p in 0..per {
                            g[i * per + p] -= scaled(i, p);
                        }
                    }
                });
            }
        }
    }
}

impl Node {
    fn out(&self) -> TensorId {
        match self {
            Node::Conv2d { out, .. }
            | Node::Upsample2x { out, .. }
            | Node::MaxPool2d { out, .. }
            | Node::ConcatChannels { out, .. }
            | Node::Relu { out, .. }
            | Node::BatchNorm { out, .. }
            | Node::Add { out, .. }
            | Node::Sub { out, .. }
            | Node::Mul { out, .. }
            | Node::Scale { out, .. }
            | Node::PixelSoftmax2 { out, .. }
            | Node::SumAll { out, .. }
            | Node::BceSum { out, .. }
            | Node::DiffNormPerImage { out, .. } => *out,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Node::Conv2d { .. } => "conv2d",
            Node::Upsample2x { .. } => "upsample2x",
            Node::MaxPool2d { .. } => "maxpool2d",
            Node::ConcatChannels { .. } => "concat_channels",
            Node::Relu { .. } => "relu",
            Node::BatchNorm { .. } => "batchnorm",
            Node::Add { .. } => "add",
            Node::Sub { .. } => "sub",
            Node::Mul { .. } => "mul",
            Node::Scale { .. } => "scale",
            Node::PixelSoftmax2 { .. } => "pixel_softmax2",
            Node::SumAll { .. } => "sum_all",
            Node::BceSum { .. } => "bce",
            Node::DiffNormPerImage { .. } => "diff_norm",
        }
    }
}

/// Borrows the values of up to three source slots together with the output
/// slot's mutable values. Panics if the output aliases a source; ops always
/// allocate fresh outputs so that cannot happen.
fn split3<'a>(
    slots: &'a mut [Slot],
    a: TensorId,
    b: TensorId,
    c: Option<TensorId>,
    out: TensorId,
) -> (&'a [f64], &'a [f64], Option<&'a [f64]>, &'a mut [f64]) {
    assert!(out.0 != a.0 && out.0 != b.0 && Some(out.0) != c.map(|x| x.0));
    let ptr = slots.as_mut_ptr();
    // Safety: `out` is distinct from every source index, so the mutable
    // borrow does not alias the shared ones; all indices are in bounds.
    unsafe {
        let av = (*ptr.add(a.0)).tensor.values();
        let bv = (*ptr.add(b.0)).tensor.values();
        let cv = c.map(|x| (*ptr.add(x.0)).tensor.values());
        let ov = (*ptr.add(out.0)).tensor.values_mut();
        (av, bv, cv, ov)
    }
}
