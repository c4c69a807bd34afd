//! Hierarchical fusion of paired feature pyramids.
//!
//! The fusion branch walks the two encoder pyramids coarsest block first.
//! Every tapped level gets one fusion node g: a 3x3 same-padding conv plus
//! relu over the channel concat (transmitted features, carried fusion
//! output, reflected features), in that order. The coarsest level of the
//! whole net has nothing to carry, so its g sees only the feature pair.
//! Crossing a block boundary upsamples the carry 2x with a learned
//! transposed-conv kernel so resolutions line up.
//!
//! Each block's final fusion output then runs through an integration step
//! h (1x1 conv to a common channel count, then repeated 2x upsampling to
//! input resolution); the integrated maps concat into the head, a 3x3 conv
//! to two logits squashed per pixel into a saliency probability.

use serde::{Deserialize, Serialize};

use crate::encoder::{BoundConv, ConvLayer, LevelShape, CONV_KERNEL};
use crate::error::TensorError;
use crate::rng::{gaussian_tensor, SeededRng};
use crate::tensor::{Binding, Tape, Tensor, TensorId};

/// Spatial extent of every learned 2x upsampling kernel (stride-2
/// transposed conv with padding 1 doubles the resolution exactly).
pub const UPSAMPLE_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Concat the pair into one 6-channel image before a single encoder.
    Input,
    /// Fuse once after block 1, single stream afterwards.
    Early,
    /// Two full streams, fused once at the last block.
    Late,
    /// Per-stream dense descriptors, combined only at the head.
    Adhoc,
    /// Fusion node at every tapped level (this module's main path).
    Hyper,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::Input,
        FusionVariant::Early,
        FusionVariant::Late,
        FusionVariant::Adhoc,
        FusionVariant::Hyper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Input => "input",
            FusionVariant::Early => "early",
            FusionVariant::Late => "late",
            FusionVariant::Adhoc => "adhoc",
            FusionVariant::Hyper => "hyper",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, TensorError> {
        FusionVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| TensorError::unsupported("fusion variant", s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    /// Output channels of every g node in a block, one entry per block.
    pub fuse_channels: Vec<usize>,
    /// Inclusive (lowest, highest) tapped-level index per block, finest
    /// block first; contiguous and covering every level.
    pub block_bounds: Vec<(usize, usize)>,
    /// Channel count each integrated map is projected to.
    pub head_channels: usize,
}

impl FusionConfig {
    /// Derives bounds by grouping the levels' block ids; `fuse_channels`
    /// defaults to each block's own channel count.
    pub fn for_levels(
        levels: &[LevelShape],
        variant: FusionVariant,
        fuse_channels: Option<Vec<usize>>,
        head_channels: usize,
    ) -> Result<Self, TensorError> {
        if levels.is_empty() {
            return Err(TensorError::unsupported("fusion config", "no tapped levels"));
        }
        let mut block_bounds: Vec<(usize, usize)> = Vec::new();
        let mut default_fuse = Vec::new();
        for (l, shape) in levels.iter().enumerate() {
            let open_block = block_bounds.len().wrapping_sub(1);
            match block_bounds.last_mut() {
                Some(b) if shape.block == open_block => b.1 = l,
                _ => {
                    if shape.block != block_bounds.len() {
                        return Err(TensorError::unsupported(
                            "fusion config",
                            format!("level {l} has out-of-order block id {}", shape.block),
                        ));
                    }
                    block_bounds.push((l, l));
                    default_fuse.push(shape.channels);
                }
            }
        }
        let cfg = FusionConfig {
            variant,
            fuse_channels: fuse_channels.unwrap_or(default_fuse),
            block_bounds,
            head_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.block_bounds.is_empty() {
            return Err(TensorError::unsupported("fusion config", "no blocks"));
        }
        if self.fuse_channels.len() != self.block_bounds.len() {
            return Err(TensorError::unsupported(
                "fusion config",
                format!(
                    "{} fuse channel entries for {} blocks",
                    self.fuse_channels.len(),
                    self.block_bounds.len()
                ),
            ));
        }
        if self.fuse_channels.iter().any(|&c| c == 0) || self.head_channels == 0 {
            return Err(TensorError::unsupported("fusion config", "zero channel count"));
        }
        let mut next = 0usize;
        for &(lo, hi) in &self.block_bounds {
            if lo != next || hi < lo {
                return Err(TensorError::unsupported(
                    "fusion config",
                    format!("bounds ({lo},{hi}) break coverage at level {next}"),
                ));
            }
            next = hi + 1;
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.block_bounds.len()
    }

    pub fn levels(&self) -> usize {
        self.block_bounds.last().map_or(0, |&(_, hi)| hi + 1)
    }

    /// Block owning tapped level `l`.
    fn block_of(&self, l: usize) -> usize {
        self.block_bounds.iter().position(|&(lo, hi)| lo <= l && l <= hi).expect("covered level")
    }

    /// Input channels of the g node at level `l`, given the per-level
    /// feature channel counts. Two pyramid slots always contribute; the
    /// carry contributes the producing node's output channels except at
    /// the coarsest level of the whole net.
    pub fn g_in_channels(&self, l: usize, feature_channels: usize) -> usize {
        let m = self.block_of(l);
        let (_, hi) = self.block_bounds[m];
        let carry = if l == hi {
            if m + 1 == self.blocks() {
                0
            } else {
                self.fuse_channels[m + 1]
            }
        } else {
            self.fuse_channels[m]
        };
        2 * feature_channels + carry
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Learned 2x upsampling kernel, shaped [in, out, 4, 4] as the tape's
/// transposed conv expects, drawn from the same fan-in rule as the convs.
pub fn init_upsample_kernel(in_ch: usize, out_ch: usize, rng: &mut SeededRng) -> Tensor {
    let std = (2.0 / (in_ch * UPSAMPLE_KERNEL * UPSAMPLE_KERNEL) as f64).sqrt();
    gaussian_tensor(&[in_ch, out_ch, UPSAMPLE_KERNEL, UPSAMPLE_KERNEL], std, rng)
}

fn register_kernel(t: &Tensor, tape: &mut Tape, name: String, binding: &mut Binding) -> TensorId {
    let id = tape.leaf(t.clone().with_grad());
    binding.push((name, id));
    id
}

/// Integration step h: 1x1 projection followed by enough 2x upsamplings
/// to reach input resolution. `steps == 0` leaves just the projection.
#[derive(Debug, Clone)]
pub struct IntegrateParams {
    pub proj: ConvLayer,
    pub ups: Vec<Tensor>,
}

impl IntegrateParams {
    pub fn init(in_ch: usize, head_ch: usize, steps: usize, rng: &mut SeededRng) -> Self {
        IntegrateParams {
            proj: ConvLayer::init_msra(head_ch, in_ch, 1, rng),
            ups: (0..steps).map(|_| init_upsample_kernel(head_ch, head_ch, rng)).collect(),
        }
    }

    pub fn register(&self, tape: &mut Tape, name: &str, binding: &mut Binding) -> BoundIntegrate {
        BoundIntegrate {
            proj: self.proj.register(tape, &format!("{name}.proj"), binding),
            ups: self
                .ups
                .iter()
                .enumerate()
                .map(|(j, k)| register_kernel(k, tape, format!("{name}.up{j}"), binding))
                .collect(),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.proj.visit(&format!("{name}.proj"), f);
        for (j, k) in self.ups.iter().enumerate() {
            f(format!("{name}.up{j}"), k);
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(&format!("{name}.proj"), f);
        for (j, k) in self.ups.iter_mut().enumerate() {
            f(format!("{name}.up{j}"), k);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundIntegrate {
    pub proj: BoundConv,
    pub ups: Vec<TensorId>,
}

impl BoundIntegrate {
    pub fn apply(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
        let mut cur = tape.conv2d(x, self.proj.kernel, Some(self.proj.bias))?;
        for &k in &self.ups {
            cur = tape.upsample2x(cur, k)?;
        }
        Ok(cur)
    }
}

/// All trainable tensors of the hyper fusion branch.
#[derive(Debug, Clone)]
pub struct HyperParams {
    /// One g conv per tapped level, finest level first.
    pub gs: Vec<ConvLayer>,
    /// Carry handoff into block m from block m+1; length blocks-1.
    pub carry_up: Vec<Tensor>,
    /// One integration step per block.
    pub integrate: Vec<IntegrateParams>,
    /// Final 3x3 conv to two logits.
    pub head: ConvLayer,
}

impl HyperParams {
    pub fn init(
        levels: &[LevelShape],
        config: &FusionConfig,
        rng: &mut SeededRng,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        if levels.len() != config.levels() {
            return Err(TensorError::unsupported(
                "fusion init",
                format!("{} levels for bounds covering {}", levels.len(), config.levels()),
            ));
        }
        let blocks = config.blocks();
        let gs = levels
            .iter()
            .enumerate()
            .map(|(l, shape)| {
                let m = config.block_of(l);
                let in_ch = config.g_in_channels(l, shape.channels);
                ConvLayer::init_msra(config.fuse_channels[m], in_ch, CONV_KERNEL, rng)
            })
            .collect();
        let carry_up = (0..blocks - 1)
            .map(|m| {
                let c = config.fuse_channels[m + 1];
                init_upsample_kernel(c, c, rng)
            })
            .collect();
        let (h0, w0) = (levels[0].height, levels[0].width);
        let mut integrate = Vec::with_capacity(blocks);
        for m in 0..blocks {
            let lo = config.block_bounds[m].0;
            let steps = upsample_steps((h0, w0), (levels[lo].height, levels[lo].width))?;
            integrate.push(IntegrateParams::init(
                config.fuse_channels[m],
                config.head_channels,
                steps,
                rng,
            ));
        }
        let head = ConvLayer::init_msra(2, blocks * config.head_channels, CONV_KERNEL, rng);
        Ok(HyperParams { gs, carry_up, integrate, head })
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str, binding: &mut Binding) -> BoundHyper {
        BoundHyper {
            gs: self
                .gs
                .iter()
                .enumerate()
                .map(|(l, g)| g.register(tape, &format!("{prefix}.g{l}"), binding))
                .collect(),
            carry_up: self
                .carry_up
                .iter()
                .enumerate()
                .map(|(m, k)| register_kernel(k, tape, format!("{prefix}.carry_up{m}"), binding))
                .collect(),
            integrate: self
                .integrate
                .iter()
                .enumerate()
                .map(|(m, p)| p.register(tape, &format!("{prefix}.int{m}"), binding))
                .collect(),
            head: self.head.register(tape, &format!("{prefix}.head"), binding),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (l, g) in self.gs.iter().enumerate() {
            g.visit(&format!("{prefix}.g{l}"), f);
        }
        for (m, k) in self.carry_up.iter().enumerate() {
            f(format!("{prefix}.carry_up{m}"), k);
        }
        for (m, p) in self.integrate.iter().enumerate() {
            p.visit(&format!("{prefix}.int{m}"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, g) in self.gs.iter_mut().enumerate() {
            g.visit_mut(&format!("{prefix}.g{l}"), f);
        }
        for (m, k) in self.carry_up.iter_mut().enumerate() {
            f(format!("{prefix}.carry_up{m}"), k);
        }
        for (m, p) in self.integrate.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.int{m}"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BoundHyper {
    pub gs: Vec<BoundConv>,
    pub carry_up: Vec<TensorId>,
    pub integrate: Vec<BoundIntegrate>,
    pub head: BoundConv,
}

/// Number of 2x upsamplings from `from` up to `to`; both axes must scale
/// by the same power of two.
fn upsample_steps(to: (usize, usize), from: (usize, usize)) -> Result<usize, TensorError> {
    let (th, tw) = to;
    let (fh, fw) = from;
    if fh == 0 || fw == 0 || th % fh != 0 || tw % fw != 0 {
        return Err(TensorError::shape("integrate", format!("{th}x{tw}"), format!("{fh}x{fw}")));
    }
    let (rh, rw) = (th / fh, tw / fw);
    if rh != rw || !rh.is_power_of_two() {
        return Err(TensorError::shape("integrate", format!("{th}x{tw}"), format!("{fh}x{fw}")));
    }
    Ok(rh.trailing_zeros() as usize)
}

// ── Forward ─────────────────────────────────────────────────────────────

/// Per-level feature handles of one pyramid, finest level first. Built
/// from an encoder pyramid or assembled by hand in tests.
#[derive(Debug, Clone)]
pub struct PyramidHandles {
    pub features: Vec<TensorId>,
}

impl PyramidHandles {
    pub fn from_pyramid(pyr: &crate::encoder::FeaturePyramid) -> Self {
        PyramidHandles { features: pyr.levels.iter().map(|l| l.features).collect() }
    }
}

/// Fusion outputs: the carried f-hat at each block's lowest level plus,
/// after integration, the per-block input-resolution maps.
#[derive(Debug, Clone)]
pub struct FusedStack {
    /// Lowest-level fusion output per block, finest block first.
    pub per_block: Vec<TensorId>,
    /// Count of g applications, for the graph-size invariant.
    pub fusion_nodes: usize,
    /// Integrated per-block maps at input resolution (after `integrate`).
    pub integrated: Vec<TensorId>,
}

/// Runs the fusion recursion over both pyramids, coarsest block first.
pub fn fuse_hyper(
    tape: &mut Tape,
    pyr_t: &PyramidHandles,
    pyr_r: &PyramidHandles,
    bound: &BoundHyper,
    config: &FusionConfig,
) -> Result<FusedStack, TensorError> {
    config.validate()?;
    let n_levels = config.levels();
    if pyr_t.features.len() != n_levels || pyr_r.features.len() != n_levels {
        return Err(TensorError::unsupported(
            "fuse",
            format!(
                "bounds cover {n_levels} levels, pyramids have {} and {}",
                pyr_t.features.len(),
                pyr_r.features.len()
            ),
        ));
    }
    for l in 0..n_levels {
        let dt = tape.value(pyr_t.features[l]).dims().to_vec();
        let dr = tape.value(pyr_r.features[l]).dims().to_vec();
        if dt != dr {
            return Err(TensorError::shape(
                "fuse",
                format!("{dt:?}"),
                format!("{dr:?} at level {l}"),
            ));
        }
    }
    if bound.gs.len() != n_levels || bound.carry_up.len() + 1 != config.blocks() {
        return Err(TensorError::unsupported("fuse", "bound parameters do not match config"));
    }

    let blocks = config.blocks();
    let mut per_block = vec![TensorId(usize::MAX); blocks];
    let mut fusion_nodes = 0usize;
    for m in (0..blocks).rev() {
        let (lo, hi) = config.block_bounds[m];
        // Entering a finer block upsamples the coarser block's output; the
        // coarsest block starts the recursion with no carry at all.
        let mut carry = if m + 1 < blocks {
            Some(tape.upsample2x(per_block[m + 1], bound.carry_up[m])?)
        } else {
            None
        };
        for l in (lo..=hi).rev() {
            let f_t = pyr_t.features[l];
            let f_r = pyr_r.features[l];
            let cat = match carry {
                Some(c) => tape.concat_channels(&[f_t, c, f_r])?,
                None => tape.concat_channels(&[f_t, f_r])?,
            };
            let conv = tape.conv2d(cat, bound.gs[l].kernel, Some(bound.gs[l].bias))?;
            let fused = tape.relu(conv)?;
            fusion_nodes += 1;
            carry = Some(fused);
        }
        per_block[m] = carry.expect("block spans at least one level");
    }
    Ok(FusedStack { per_block, fusion_nodes, integrated: Vec::new() })
}

/// Integrates every block output to input resolution and concatenates
/// them channel-wise. Fills `stack.integrated`.
pub fn integrate(
    tape: &mut Tape,
    stack: &mut FusedStack,
    bound: &BoundHyper,
    config: &FusionConfig,
) -> Result<TensorId, TensorError> {
    if stack.per_block.len() != config.blocks() || bound.integrate.len() != config.blocks() {
        return Err(TensorError::unsupported("integrate", "stack does not match config"));
    }
    let mut tildes = Vec::with_capacity(config.blocks());
    for (m, &fused) in stack.per_block.iter().enumerate() {
        tildes.push(bound.integrate[m].apply(tape, fused)?);
    }
    let (_, _, h0, w0) = tape.value(tildes[0]).dims4()?;
    for (m, &t) in tildes.iter().enumerate() {
        let (_, _, h, w) = tape.value(t).dims4()?;
        if (h, w) != (h0, w0) {
            return Err(TensorError::shape(
                "integrate",
                format!("{h0}x{w0}"),
                format!("{h}x{w} from block {m}"),
            ));
        }
    }
    stack.integrated = tildes.clone();
    tape.concat_channels(&tildes)
}

/// Head: 3x3 conv to two per-pixel logits, squashed into the foreground
/// probability. Output is [N,1,H,W] strictly inside (0,1).
pub fn predict_saliency(
    tape: &mut Tape,
    integrated: TensorId,
    head: &BoundConv,
) -> Result<TensorId, TensorError> {
    let logits = tape.conv2d(integrated, head.kernel, Some(head.bias))?;
    tape.pixel_softmax2(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng;

    fn level(block: usize, channels: usize, height: usize, width: usize) -> LevelShape {
        LevelShape { block, channels, height, width }
    }

    fn leaf_pyramid(
        tape: &mut Tape,
        levels: &[LevelShape],
        rng: &mut rng::SeededRng,
    ) -> PyramidHandles {
        let features = levels
            .iter()
            .map(|s| {
                let t = gradcheck::random_tensor(&[1, s.channels, s.height, s.width], rng);
                tape.constant(t)
            })
            .collect();
        PyramidHandles { features }
    }

    #[test]
    fn config_groups_levels_into_bounds_and_defaults_channels() {
        let levels =
            [level(0, 8, 16, 16), level(1, 16, 8, 8), level(1, 16, 8, 8), level(2, 32, 4, 4)];
        let cfg =
            FusionConfig::for_levels(&levels, FusionVariant::Hyper, None, 4).unwrap();
        assert_eq!(cfg.block_bounds, vec![(0, 0), (1, 2), (3, 3)]);
        assert_eq!(cfg.fuse_channels, vec![8, 16, 32]);
        assert_eq!(cfg.levels(), 4);
    }

    #[test]
    fn config_rejects_gaps_and_zero_channels() {
        let mut cfg = FusionConfig {
            variant: FusionVariant::Hyper,
            fuse_channels: vec![4, 4],
            block_bounds: vec![(0, 0), (2, 2)],
            head_channels: 2,
        };
        assert!(cfg.validate().is_err());
        cfg.block_bounds = vec![(0, 0), (1, 1)];
        assert!(cfg.validate().is_ok());
        cfg.fuse_channels[1] = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_block_fuses_the_pair_without_carry() {
        let levels = [level(0, 3, 4, 4)];
        let cfg = FusionConfig::for_levels(&levels, FusionVariant::Hyper, Some(vec![5]), 4)
            .unwrap();
        let mut r = rng::seeded(2);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();
        // The only g sees both feature slots and nothing else.
        assert_eq!(params.gs[0].kernel.dims(), &[5, 6, 3, 3]);
        assert!(params.carry_up.is_empty());
        // No pooling ever happened, so h is the bare projection.
        assert!(params.integrate[0].ups.is_empty());

        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let bound = params.register(&mut tape, "fuse", &mut binding);
        let pt = leaf_pyramid(&mut tape, &levels, &mut r);
        let pr = leaf_pyramid(&mut tape, &levels, &mut r);
        let mut stack = fuse_hyper(&mut tape, &pt, &pr, &bound, &cfg).unwrap();
        assert_eq!(stack.per_block.len(), 1);
        assert_eq!(stack.fusion_nodes, 1);
        let integrated = integrate(&mut tape, &mut stack, &bound, &cfg).unwrap();
        assert_eq!(tape.value(integrated).dims(), &[1, 4, 4, 4]);
        let sal = predict_saliency(&mut tape, integrated, &bound.head).unwrap();
        assert_eq!(tape.value(sal).dims(), &[1, 1, 4, 4]);
        assert!(tape.value(sal).values().iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn two_block_channel_arithmetic_matches_the_shape_oracle() {
        // Blocks with 8 and 16 channels, uniform fuse width 8: the coarse
        // g concatenates 16+16, the fine g 8+8+8.
        let levels = [level(0, 8, 8, 8), level(1, 16, 4, 4)];
        let cfg =
            FusionConfig::for_levels(&levels, FusionVariant::Hyper, Some(vec![8, 8]), 4).unwrap();
        assert_eq!(cfg.g_in_channels(1, 16), 32);
        assert_eq!(cfg.g_in_channels(0, 8), 24);
        let mut r = rng::seeded(3);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();
        assert_eq!(params.gs[1].kernel.dims(), &[8, 32, 3, 3]);
        assert_eq!(params.gs[0].kernel.dims(), &[8, 24, 3, 3]);
        assert_eq!(params.carry_up[0].dims(), &[8, 8, 4, 4]);
    }

    #[test]
    fn multi_level_blocks_carry_inside_the_block() {
        // Two levels inside block 1 share a resolution; the inner carry is
        // passed straight through while the cross-block one upsamples.
        let levels = [level(0, 4, 8, 8), level(1, 6, 4, 4), level(1, 6, 4, 4)];
        let cfg = FusionConfig::for_levels(&levels, FusionVariant::Hyper, None, 3).unwrap();
        assert_eq!(cfg.block_bounds, vec![(0, 0), (1, 2)]);
        // Level 2 tops the net: 6+6. Level 1 receives block 1's own fused
        // output: 6+6+6. Level 0 receives the upsampled carry: 4+6+4.
        assert_eq!(cfg.g_in_channels(2, 6), 12);
        assert_eq!(cfg.g_in_channels(1, 6), 18);
        assert_eq!(cfg.g_in_channels(0, 4), 14);
        let mut r = rng::seeded(4);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let bound = params.register(&mut tape, "fuse", &mut binding);
        let pt = leaf_pyramid(&mut tape, &levels, &mut r);
        let pr = leaf_pyramid(&mut tape, &levels, &mut r);
        let before = tape.node_count();
        let stack = fuse_hyper(&mut tape, &pt, &pr, &bound, &cfg).unwrap();
        assert_eq!(stack.fusion_nodes, 3);
        // Each g adds concat+conv+relu; one cross-block handoff upsamples.
        assert_eq!(tape.node_count() - before, 3 * 3 + 1);
    }

    #[test]
    fn zero_pyramids_with_zero_bias_stay_zero_and_predict_half() {
        let levels = [level(0, 3, 8, 8), level(1, 5, 4, 4)];
        let cfg = FusionConfig::for_levels(&levels, FusionVariant::Hyper, None, 4).unwrap();
        let mut r = rng::seeded(5);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let bound = params.register(&mut tape, "fuse", &mut binding);
        let zero = |tape: &mut Tape, s: &LevelShape| {
            tape.constant(Tensor::zeros(&[1, s.channels, s.height, s.width]))
        };
        let pt = PyramidHandles { features: levels.iter().map(|s| zero(&mut tape, s)).collect() };
        let pr = PyramidHandles { features: levels.iter().map(|s| zero(&mut tape, s)).collect() };
        let mut stack = fuse_hyper(&mut tape, &pt, &pr, &bound, &cfg).unwrap();
        for &f in &stack.per_block {
            assert!(tape.value(f).values().iter().all(|v| *v == 0.0));
        }
        let integrated = integrate(&mut tape, &mut stack, &bound, &cfg).unwrap();
        assert!(tape.value(integrated).values().iter().all(|v| *v == 0.0));
        // Zero head bias on zero input gives equal logits, so exactly 1/2.
        let sal = predict_saliency(&mut tape, integrated, &bound.head).unwrap();
        assert!(tape.value(sal).values().iter().all(|p| *p == 0.5));
    }

    #[test]
    fn integrated_maps_sit_at_input_resolution() {
        let levels = [level(0, 4, 16, 16), level(1, 8, 8, 8), level(2, 16, 4, 4)];
        let cfg = FusionConfig::for_levels(&levels, FusionVariant::Hyper, None, 4).unwrap();
        let mut r = rng::seeded(6);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();
        assert_eq!(params.integrate[0].ups.len(), 0);
        assert_eq!(params.integrate[1].ups.len(), 1);
        assert_eq!(params.integrate[2].ups.len(), 2);
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let bound = params.register(&mut tape, "fuse", &mut binding);
        let pt = leaf_pyramid(&mut tape, &levels, &mut r);
        let pr = leaf_pyramid(&mut tape, &levels, &mut r);
        let mut stack = fuse_hyper(&mut tape, &pt, &pr, &bound, &cfg).unwrap();
        let integrated = integrate(&mut tape, &mut stack, &bound, &cfg).unwrap();
        for &t in &stack.integrated {
            let dims = tape.value(t).dims();
            assert_eq!(&dims[2..], &[16, 16]);
            assert_eq!(dims[1], 4);
        }
        assert_eq!(tape.value(integrated).dims(), &[1, 12, 16, 16]);
    }

    #[test]
    fn saliency_matches_a_per_pixel_softmax_oracle() {
        let mut r = rng::seeded(7);
        let integrated = gradcheck::random_tensor(&[2, 6, 4, 4], &mut r);
        let head = ConvLayer::init_msra(2, 6, 3, &mut r);
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let bound = head.register(&mut tape, "head", &mut binding);
        let x = tape.constant(integrated);
        let logits = tape.conv2d(x, bound.kernel, Some(bound.bias)).unwrap();
        let logit_vals = tape.value(logits).values().to_vec();
        let sal = tape.pixel_softmax2(logits).unwrap();
        let got = tape.value(sal).values();
        let hw = 16;
        for b in 0..2 {
            for p in 0..hw {
                let s0 = logit_vals[b * 2 * hw + p];
                let s1 = logit_vals[(b * 2 + 1) * hw + p];
                let m = s0.max(s1);
                let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
                let want = e1 / (e0 + e1);
                let have = got[b * hw + p];
                assert!((have - want).abs() < 1e-12, "pixel {p}: {have} vs {want}");
                assert!((have + e0 / (e0 + e1) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_branches_and_kernel_halves_preserves_the_fusion() {
        // Feeding (R, T) instead of (T, R) while moving each g kernel's
        // trailing input-channel block to the front computes the same
        // function; only summation order can differ.
        let levels = [level(0, 3, 8, 8), level(1, 5, 4, 4)];
        let cfg = FusionConfig::for_levels(&levels, FusionVariant::Hyper, None, 3).unwrap();
        let mut r = rng::seeded(8);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();

        let mut swapped = params.clone();
        for (l, shape) in levels.iter().enumerate() {
            let carry = cfg.g_in_channels(l, shape.channels) - 2 * shape.channels;
            swapped.gs[l].kernel =
                swap_input_blocks(&params.gs[l].kernel, shape.channels, carry);
        }

        let run = |p: &HyperParams, flip: bool| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let mut binding = Binding::new();
            let bound = p.register(&mut tape, "fuse", &mut binding);
            let mut rr = rng::seeded(99);
            let a = leaf_pyramid(&mut tape, &levels, &mut rr);
            let b = leaf_pyramid(&mut tape, &levels, &mut rr);
            let (pt, pr) = if flip { (b, a) } else { (a, b) };
            let stack = fuse_hyper(&mut tape, &pt, &pr, &bound, &cfg).unwrap();
            stack
                .per_block
                .iter()
                .map(|&f| tape.value(f).values().to_vec())
                .collect()
        };
        let base = run(&params, false);
        let flipped = run(&swapped, true);
        for (a, b) in base.iter().zip(&flipped) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    fn swap_input_blocks(kernel: &Tensor, c: usize, carry: usize) -> Tensor {
        let dims = kernel.dims().to_vec();
        let (out_ch, in_ch, k) = (dims[0], dims[1], dims[2]);
        assert_eq!(in_ch, 2 * c + carry);
        let plane = k * k;
        let mut vals = vec![0.0; kernel.len()];
        for o in 0..out_ch {
            for i_new in 0..in_ch {
                let i_old = if i_new < c {
                    c + carry + i_new
                } else if i_new < c + carry {
                    i_new
                } else {
                    i_new - (c + carry)
                };
                let src = (o * in_ch + i_old) * plane;
                let dst = (o * in_ch + i_new) * plane;
                vals[dst..dst + plane].copy_from_slice(&kernel.values()[src..src + plane]);
            }
        }
        Tensor::from_vec(dims, vals).unwrap()
    }

    #[test]
    fn parameter_count_matches_a_hand_walked_total() {
        let levels = [level(0, 8, 8, 8), level(1, 16, 4, 4)];
        let cfg =
            FusionConfig::for_levels(&levels, FusionVariant::Hyper, Some(vec![8, 8]), 4).unwrap();
        let mut r = rng::seeded(9);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        params.register(&mut tape, "fuse", &mut binding);
        let total: usize = binding.iter().map(|(_, id)| tape.value(*id).len()).sum();
        let want = (8 * 24 * 9 + 8)        // fine g
            + (8 * 32 * 9 + 8)             // coarse g
            + 8 * 8 * 16                   // carry handoff
            + (4 * 8 + 4)                  // block-0 projection, no upsampling
            + (4 * 8 + 4) + 4 * 4 * 16     // block-1 projection + one upsampling
            + (2 * 8 * 9 + 2);             // head over 2*4 integrated channels
        assert_eq!(total, want);
        // visit() walks the identical tensor set.
        let mut visited = 0usize;
        params.visit("fuse", &mut |_, t| visited += t.len());
        assert_eq!(visited, want);
    }

    #[test]
    fn full_chain_gradient_check_passes() {
        // Finite differences over every fusion parameter and both
        // pyramids, through fuse + integrate + head into a scalar.
        let levels = [level(0, 3, 4, 4), level(1, 4, 2, 2)];
        let cfg = FusionConfig::for_levels(&levels, FusionVariant::Hyper, None, 2).unwrap();
        let mut r = rng::seeded(10);
        let params = HyperParams::init(&levels, &cfg, &mut r).unwrap();

        let mut leaves: Vec<Tensor> = Vec::new();
        params.visit("p", &mut |_, t| leaves.push(t.clone()));
        let n_params = leaves.len();
        for s in &levels {
            leaves.push(gradcheck::random_tensor(&[1, s.channels, s.height, s.width], &mut r));
            leaves.push(gradcheck::random_tensor(&[1, s.channels, s.height, s.width], &mut r));
        }

        let structure = params.clone();
        let report = gradcheck::check_gradients(
            "fusion chain",
            &leaves,
            gradcheck::DEFAULT_STEP,
            gradcheck::DEFAULT_TOL,
            &mut |tape, ids| {
                // Rebind in the exact order visit() emitted the tensors.
                let mut k = 0usize;
                let mut next = || {
                    let id = ids[k];
                    k += 1;
                    id
                };
                let gs: Vec<BoundConv> = (0..structure.gs.len())
                    .map(|_| BoundConv { kernel: next(), bias: next() })
                    .collect();
                let carry_up: Vec<TensorId> =
                    (0..structure.carry_up.len()).map(|_| next()).collect();
                let integrate_b: Vec<BoundIntegrate> = structure
                    .integrate
                    .iter()
                    .map(|p| BoundIntegrate {
                        proj: BoundConv { kernel: next(), bias: next() },
                        ups: (0..p.ups.len()).map(|_| next()).collect(),
                    })
                    .collect();
                let head = BoundConv { kernel: next(), bias: next() };
                assert_eq!(k, n_params);
                let bound = BoundHyper { gs, carry_up, integrate: integrate_b, head };
                let mut pt = PyramidHandles { features: Vec::new() };
                let mut pr = PyramidHandles { features: Vec::new() };
                for _ in &levels {
                    pt.features.push(ids[k]);
                    pr.features.push(ids[k + 1]);
                    k += 2;
                }
                let mut stack = fuse_hyper(tape, &pt, &pr, &bound, &cfg)?;
                let integrated = integrate(tape, &mut stack, &bound, &cfg)?;
                let sal = predict_saliency(tape, integrated, &head)?;
                let sq = tape.mul(sal, sal)?;
                tape.sum_all(sq)
            },
        )
        .unwrap();
        assert!(report.passed, "{}", report.line());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("hyperdense".parse::<FusionVariant>().is_err());
    }
}
