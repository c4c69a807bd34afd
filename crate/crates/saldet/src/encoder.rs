//! Two-branch convolutional encoder with stitched weights.
//!
//! Both branches share one set of convolution parameters (register them
//! once, use the same tape handles from both paths), while every
//! normalization layer keeps two disjoint parameter and statistics sets:
//! one adapted to the transmitted domain, one to the reflected domain.
//! Gradients from the two branches meet on the shared conv leaves by plain
//! accumulation, which is all weight stitching is.
//!
//! Each block is a run of conv -> norm -> relu layers at one resolution;
//! blocks are separated by 2x2 max pooling, and the activation after each
//! block's last layer (before pooling) is tapped into the feature pyramid.

use crate::error::TensorError;
use crate::rng::{gaussian_tensor, SeededRng};
use crate::tensor::{Binding, Tape, Tensor, TensorId};

pub const CONV_KERNEL: usize = 3;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    /// Number of conv -> norm -> relu layers in the block.
    pub convs: usize,
    /// Output channels of every layer in the block.
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub blocks: Vec<BlockSpec>,
    /// Expected input resolution (height, width).
    pub input: (usize, usize),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.blocks.is_empty() {
            return Err(TensorError::unsupported("encoder", "no blocks configured"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.convs == 0 || b.channels == 0 {
                return Err(TensorError::unsupported(
                    "encoder",
                    format!("block {i} has zero convs or channels"),
                ));
            }
        }
        let div = 1usize << (self.blocks.len() - 1);
        let (h, w) = self.input;
        if h % div != 0 || w % div != 0 {
            return Err(TensorError::unsupported(
                "encoder",
                format!("input {h}x{w} not divisible by {div} across {} blocks", self.blocks.len()),
            ));
        }
        Ok(())
    }

    /// (in, out) channel pair for every conv layer, flattened across blocks.
    pub fn conv_plan(&self, in_channels: usize) -> Vec<(usize, usize)> {
        conv_plan(&self.blocks, in_channels)
    }

    /// Shape of each pyramid level this encoder emits: one per block.
    pub fn level_shapes(&self) -> Vec<LevelShape> {
        let (mut h, mut w) = self.input;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(LevelShape { block: i, channels: b.channels, height: h, width: w });
            h /= 2;
            w /= 2;
        }
        out
    }
}

pub(crate) fn conv_plan(blocks: &[BlockSpec], in_channels: usize) -> Vec<(usize, usize)> {
    let mut plan = Vec::new();
    let mut prev = in_channels;
    for b in blocks {
        for _ in 0..b.convs {
            plan.push((prev, b.channels));
            prev = b.channels;
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub block: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// Zero-mean Gaussian kernel with variance 2/fan_in, zero bias.
    pub fn init_msra(out_ch: usize, in_ch: usize, k: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        ConvLayer {
            kernel: gaussian_tensor(&[out_ch, in_ch, k, k], std, rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn register(&self, tape: &mut Tape, name: &str, binding: &mut Binding) -> BoundConv {
        let kernel = tape.leaf(self.kernel.clone().with_grad());
        let bias = tape.leaf(self.bias.clone().with_grad());
        binding.push((format!("{name}.kernel"), kernel));
        binding.push((format!("{name}.bias"), bias));
        BoundConv { kernel, bias }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{name}.kernel"), &self.kernel);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{name}.kernel"), &mut self.kernel);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub kernel: TensorId,
    pub bias: TensorId,
}

/// Per-domain normalization layer: trainable affine (gamma, beta) plus
/// running statistics used when the batch is not trusted (inference).
#[derive(Debug, Clone)]
pub struct NormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormState {
    pub fn new(channels: usize) -> Self {
        NormState {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds fresh batch statistics into the running ones.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    pub fn register(&self, tape: &mut Tape, name: &str, binding: &mut Binding) -> BoundNorm {
        let gamma = tape.leaf(self.gamma.clone().with_grad());
        let beta = tape.leaf(self.beta.clone().with_grad());
        binding.push((format!("{name}.gamma"), gamma));
        binding.push((format!("{name}.beta"), beta));
        BoundNorm { gamma, beta }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{name}.gamma"), &self.gamma);
        f(format!("{name}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{name}.gamma"), &mut self.gamma);
        f(format!("{name}.beta"), &mut self.beta);
    }

    pub fn visit_buffers(&self, name: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(format!("{name}.running_mean"), &self.running_mean);
        f(format!("{name}.running_var"), &self.running_var);
    }

    pub fn visit_buffers_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        f(format!("{name}.running_mean"), &mut self.running_mean);
        f(format!("{name}.running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundNorm {
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Shared conv stack plus one normalization set per domain.
#[derive(Debug, Clone)]
pub struct StitchedWeights {
    pub convs: Vec<ConvLayer>,
    pub norm_t: Vec<NormState>,
    pub norm_r: Vec<NormState>,
}

impl StitchedWeights {
    pub fn init(blocks: &[BlockSpec], in_channels: usize, rng: &mut SeededRng) -> Self {
        let plan = conv_plan(blocks, in_channels);
        let convs: Vec<ConvLayer> =
            plan.iter().map(|&(i, o)| ConvLayer::init_msra(o, i, CONV_KERNEL, rng)).collect();
        let norm_t: Vec<NormState> = plan.iter().map(|&(_, o)| NormState::new(o)).collect();
        let norm_r: Vec<NormState> = plan.iter().map(|&(_, o)| NormState::new(o)).collect();
        StitchedWeights { convs, norm_t, norm_r }
    }

    /// Registers every trainable tensor once; the conv handles returned
    /// here are what both branches must use.
    pub fn register(&self, tape: &mut Tape, prefix: &str, binding: &mut Binding) -> BoundStitched {
        let convs = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| c.register(tape, &format!("{prefix}.conv{i}"), binding))
            .collect();
        let norm_t = self
            .norm_t
            .iter()
            .enumerate()
            .map(|(i, nrm)| nrm.register(tape, &format!("{prefix}.norm_t{i}"), binding))
            .collect();
        let norm_r = self
            .norm_r
            .iter()
            .enumerate()
            .map(|(i, nrm)| nrm.register(tape, &format!("{prefix}.norm_r{i}"), binding))
            .collect();
        BoundStitched { convs, norm_t, norm_r }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), f);
        }
        for (i, nrm) in self.norm_t.iter().enumerate() {
            nrm.visit(&format!("{prefix}.norm_t{i}"), f);
        }
        for (i, nrm) in self.norm_r.iter().enumerate() {
            nrm.visit(&format!("{prefix}.norm_r{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv{i}"), f);
        }
        for (i, nrm) in self.norm_t.iter_mut().enumerate() {
            nrm.visit_mut(&format!("{prefix}.norm_t{i}"), f);
        }
        for (i, nrm) in self.norm_r.iter_mut().enumerate() {
            nrm.visit_mut(&format!("{prefix}.norm_r{i}"), f);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, nrm) in self.norm_t.iter().enumerate() {
            nrm.visit_buffers(&format!("{prefix}.norm_t{i}"), f);
        }
        for (i, nrm) in self.norm_r.iter().enumerate() {
            nrm.visit_buffers(&format!("{prefix}.norm_r{i}"), f);
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (i, nrm) in self.norm_t.iter_mut().enumerate() {
            nrm.visit_buffers_mut(&format!("{prefix}.norm_t{i}"), f);
        }
        for (i, nrm) in self.norm_r.iter_mut().enumerate() {
            nrm.visit_buffers_mut(&format!("{prefix}.norm_r{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundStitched {
    pub convs: Vec<BoundConv>,
    pub norm_t: Vec<BoundNorm>,
    pub norm_r: Vec<BoundNorm>,
}

/// Single-domain conv stack (used by the single-stream fusion baselines).
#[derive(Debug, Clone)]
pub struct StreamWeights {
    pub convs: Vec<ConvLayer>,
    pub norms: Vec<NormState>,
}

impl StreamWeights {
    pub fn init(blocks: &[BlockSpec], in_channels: usize, rng: &mut SeededRng) -> Self {
        let plan = conv_plan(blocks, in_channels);
        let convs: Vec<ConvLayer> =
            plan.iter().map(|&(i, o)| ConvLayer::init_msra(o, i, CONV_KERNEL, rng)).collect();
        let norms: Vec<NormState> = plan.iter().map(|&(_, o)| NormState::new(o)).collect();
        StreamWeights { convs, norms }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str, binding: &mut Binding) -> BoundStream {
        BoundStream {
            convs: self
                .convs
                .iter()
                .enumerate()
                .map(|(i, c)| c.register(tape, &format!("{prefix}.conv{i}"), binding))
                .collect(),
            norms: self
                .norms
                .iter()
                .enumerate()
                .map(|(i, nrm)| nrm.register(tape, &format!("{prefix}.norm{i}"), binding))
                .collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), f);
        }
        for (i, nrm) in self.norms.iter().enumerate() {
            nrm.visit(&format!("{prefix}.norm{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv{i}"), f);
        }
        for (i, nrm) in self.norms.iter_mut().enumerate() {
            nrm.visit_mut(&format!("{prefix}.norm{i}"), f);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        for (i, nrm) in self.norms.iter().enumerate() {
            nrm.visit_buffers(&format!("{prefix}.norm{i}"), f);
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (i, nrm) in self.norms.iter_mut().enumerate() {
            nrm.visit_buffers_mut(&format!("{prefix}.norm{i}"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundStream {
    pub convs: Vec<BoundConv>,
    pub norms: Vec<BoundNorm>,
}

// ── Forward ─────────────────────────────────────────────────────────────

/// Feature maps tapped from one branch, finest block first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub block: usize,
    pub features: TensorId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Runs one branch over a contiguous run of blocks. `convs`/`norms` are the
/// flattened layers for exactly those blocks; `states` carries the matching
/// running statistics and is updated in place when `training` is set.
/// Pooling happens between blocks, never after the last one.
#[allow(clippy::too_many_arguments)]
pub fn encode_stream(
    tape: &mut Tape,
    x: TensorId,
    convs: &[BoundConv],
    norms: &[BoundNorm],
    states: &mut [NormState],
    blocks: &[BlockSpec],
    block_offset: usize,
    training: bool,
) -> Result<FeaturePyramid, TensorError> {
    let total: usize = blocks.iter().map(|b| b.convs).sum();
    if convs.len() != total || norms.len() != total || states.len() != total {
        return Err(TensorError::unsupported(
            "encode_stream",
            format!("{} layers configured, {} bound", total, convs.len()),
        ));
    }
    let (_, _, h0, w0) = tape.value(x).dims4()?;
    let div = 1usize << (blocks.len() - 1);
    if h0 % div != 0 || w0 % div != 0 {
        return Err(TensorError::unsupported(
            "encode_stream",
            format!("input {h0}x{w0} not divisible by {div}"),
        ));
    }

    let mut cur = x;
    let mut layer = 0usize;
    let mut levels = Vec::with_capacity(blocks.len());
    for (bi, block) in blocks.iter().enumerate() {
        for _ in 0..block.convs {
            let conv = tape.conv2d(cur, convs[layer].kernel, Some(convs[layer].bias))?;
            let state = &mut states[layer];
            let frozen = if training {
                None
            } else {
                Some((state.running_mean.as_slice(), state.running_var.as_slice()))
            };
            let (normed, mean, var) =
                tape.batchnorm(conv, norms[layer].gamma, norms[layer].beta, frozen, BN_EPSILON)?;
            if training {
                state.update_running(&mean, &var);
            }
            cur = tape.relu(normed)?;
            layer += 1;
        }
        let (_, c, h, w) = tape.value(cur).dims4()?;
        levels.push(PyramidLevel {
            block: block_offset + bi,
            features: cur,
            channels: c,
            height: h,
            width: w,
        });
        if bi + 1 < blocks.len() {
            cur = tape.maxpool2d(cur)?;
        }
    }
    Ok(FeaturePyramid { levels })
}

/// Encodes a transmitted/reflected pair through the stitched weights. The
/// conv handles in `bound` are shared between the two calls, which is what
/// makes the gradients stitch; the norm handles and states are per-domain.
#[allow(clippy::too_many_arguments)]
pub fn encode_pair(
    tape: &mut Tape,
    x_t: TensorId,
    x_r: TensorId,
    bound: &BoundStitched,
    norm_t: &mut [NormState],
    norm_r: &mut [NormState],
    blocks: &[BlockSpec],
    training: bool,
) -> Result<(FeaturePyramid, FeaturePyramid), TensorError> {
    let pyr_t =
        encode_stream(tape, x_t, &bound.convs, &bound.norm_t, norm_t, blocks, 0, training)?;
    let pyr_r =
        encode_stream(tape, x_r, &bound.convs, &bound.norm_r, norm_r, blocks, 0, training)?;
    Ok((pyr_t, pyr_r))
}
