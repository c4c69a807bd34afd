//! The full saliency model: encoder + fusion + head assembled per
//! fusion variant, with registration, forward dispatch, and parameter
//! visitation in one stable order (the checkpoint and optimizer
//! contract).
//!
//! All variants share the prediction head design and end in the same
//! per-pixel two-way softmax. The two-stream variants stitch their conv
//! weights (one tensor, two branches) and keep per-domain norms.

use crate::config::Config;
use crate::encoder::{
    encode_pair, encode_stream, BoundConv, BoundStitched, BoundStream, ConvLayer, FeaturePyramid,
    StitchedWeights, StreamWeights, CONV_KERNEL,
};
use crate::error::{PipelineError, TensorError};
use crate::fusion::{
    fuse_hyper, integrate, predict_saliency, BoundHyper, BoundIntegrate, FusionConfig,
    FusionVariant, HyperParams, IntegrateParams,
};
use crate::rng;
use crate::tensor::{Binding, Tape, Tensor, TensorId};

/// One parameter set per fusion variant.
#[derive(Debug, Clone)]
pub enum VariantParams {
    /// Image pair concatenated to 6 channels before a single stream.
    Input { encoder: StreamWeights, integ: IntegrateParams, head: ConvLayer },
    /// Two-stream first block, joined once, single stream after.
    Early {
        stem: StitchedWeights,
        join: ConvLayer,
        trunk: StreamWeights,
        integ: IntegrateParams,
        head: ConvLayer,
    },
    /// Two full streams joined once at the coarsest level.
    Late { encoder: StitchedWeights, join: ConvLayer, integ: IntegrateParams, head: ConvLayer },
    /// Dense per-stream concatenation of every level, fused at the end.
    Adhoc {
        encoder: StitchedWeights,
        collect: Vec<IntegrateParams>,
        descriptor: ConvLayer,
        head: ConvLayer,
    },
    /// The hyper-dense scheme.
    Hyper { encoder: StitchedWeights, fusion: HyperParams },
}

/// Tape-registered handles mirroring `VariantParams`.
#[derive(Debug, Clone)]
pub enum BoundVariant {
    Input { encoder: BoundStream, integ: BoundIntegrate, head: BoundConv },
    Early {
        stem: BoundStitched,
        join: BoundConv,
        trunk: BoundStream,
        integ: BoundIntegrate,
        head: BoundConv,
    },
    Late { encoder: BoundStitched, join: BoundConv, integ: BoundIntegrate, head: BoundConv },
    Adhoc {
        encoder: BoundStitched,
        collect: Vec<BoundIntegrate>,
        descriptor: BoundConv,
        head: BoundConv,
    },
    Hyper { encoder: BoundStitched, fusion: BoundHyper },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub fusion_config: FusionConfig,
    pub params: VariantParams,
}

impl Model {
    /// Builds and initializes a model from its config; all draws come
    /// from the config seed's "init" substream.
    pub fn init(config: &Config) -> Result<Model, PipelineError> {
        config.validate()?;
        let enc_cfg = config.encoder_config();
        let levels = enc_cfg.level_shapes();
        let fusion_config = FusionConfig::for_levels(
            &levels,
            config.fusion_variant,
            config.fuse_channels.clone(),
            config.head_channels,
        )?;
        let blocks = &enc_cfg.blocks;
        let m = blocks.len();
        let coarse_steps = m - 1;
        let last_ch = blocks.last().expect("validated nonempty").channels;
        let hc = config.head_channels;
        let mut rng = rng::substream(config.seed, "init");
        let params = match config.fusion_variant {
            FusionVariant::Input => VariantParams::Input {
                encoder: StreamWeights::init(blocks, 6, &mut rng),
                integ: IntegrateParams::init(last_ch, hc, coarse_steps, &mut rng),
                head: ConvLayer::init_msra(2, hc, CONV_KERNEL, &mut rng),
            },
            FusionVariant::Early => {
                let stem_ch = blocks[0].channels;
                let join_out = fusion_config.fuse_channels[0];
                let trunk_blocks = &blocks[1..];
                let trunk_last =
                    trunk_blocks.last().map_or(join_out, |b| b.channels);
                VariantParams::Early {
                    stem: StitchedWeights::init(&blocks[..1], 3, &mut rng),
                    join: ConvLayer::init_msra(join_out, 2 * stem_ch, CONV_KERNEL, &mut rng),
                    trunk: StreamWeights::init(trunk_blocks, join_out, &mut rng),
                    integ: IntegrateParams::init(trunk_last, hc, coarse_steps, &mut rng),
                    head: ConvLayer::init_msra(2, hc, CONV_KERNEL, &mut rng),
                }
            }
            FusionVariant::Late => {
                let join_out = *fusion_config.fuse_channels.last().expect("nonempty");
                VariantParams::Late {
                    encoder: StitchedWeights::init(blocks, 3, &mut rng),
                    join: ConvLayer::init_msra(join_out, 2 * last_ch, CONV_KERNEL, &mut rng),
                    integ: IntegrateParams::init(join_out, hc, coarse_steps, &mut rng),
                    head: ConvLayer::init_msra(2, hc, CONV_KERNEL, &mut rng),
                }
            }
            FusionVariant::Adhoc => {
                let collect = levels
                    .iter()
                    .map(|s| IntegrateParams::init(s.channels, hc, s.block, &mut rng))
                    .collect();
                VariantParams::Adhoc {
                    encoder: StitchedWeights::init(blocks, 3, &mut rng),
                    collect,
                    descriptor: ConvLayer::init_msra(hc, levels.len() * hc, CONV_KERNEL, &mut rng),
                    head: ConvLayer::init_msra(2, 2 * hc, CONV_KERNEL, &mut rng),
                }
            }
            FusionVariant::Hyper => VariantParams::Hyper {
                encoder: StitchedWeights::init(blocks, 3, &mut rng),
                fusion: HyperParams::init(&levels, &fusion_config, &mut rng)?,
            },
        };
        Ok(Model { config: config.clone(), fusion_config, params })
    }

    /// Registers every trainable tensor on the tape, returning handles
    /// plus the name/id binding in visitation order.
    pub fn register(&self, tape: &mut Tape) -> (BoundVariant, Binding) {
        let mut binding = Binding::new();
        let bound = match &self.params {
            VariantParams::Input { encoder, integ, head } => BoundVariant::Input {
                encoder: encoder.register(tape, "enc", &mut binding),
                integ: integ.register(tape, "fuse.int", &mut binding),
                head: head.register(tape, "fuse.head", &mut binding),
            },
            VariantParams::Early { stem, join, trunk, integ, head } => BoundVariant::Early {
                stem: stem.register(tape, "stem", &mut binding),
                join: join.register(tape, "fuse.join", &mut binding),
                trunk: trunk.register(tape, "trunk", &mut binding),
                integ: integ.register(tape, "fuse.int", &mut binding),
                head: head.register(tape, "fuse.head", &mut binding),
            },
            VariantParams::Late { encoder, join, integ, head } => BoundVariant::Late {
                encoder: encoder.register(tape, "enc", &mut binding),
                join: join.register(tape, "fuse.join", &mut binding),
                integ: integ.register(tape, "fuse.int", &mut binding),
                head: head.register(tape, "fuse.head", &mut binding),
            },
            VariantParams::Adhoc { encoder, collect, descriptor, head } => BoundVariant::Adhoc {
                encoder: encoder.register(tape, "enc", &mut binding),
                collect: collect
                    .iter()
                    .enumerate()
                    .map(|(l, c)| c.register(tape, &format!("fuse.col{l}"), &mut binding))
                    .collect(),
                descriptor: descriptor.register(tape, "fuse.desc", &mut binding),
                head: head.register(tape, "fuse.head", &mut binding),
            },
            VariantParams::Hyper { encoder, fusion } => BoundVariant::Hyper {
                encoder: encoder.register(tape, "enc", &mut binding),
                fusion: fusion.register(tape, "fuse", &mut binding),
            },
        };
        (bound, binding)
    }

    /// Forward pass from the two input layers to the saliency map
    /// [N,1,H,W]. Training mode updates the norm running statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &BoundVariant,
        x_t: TensorId,
        x_r: TensorId,
        training: bool,
    ) -> Result<TensorId, TensorError> {
        let blocks = self.config.encoder_config().blocks;
        match (&mut self.params, bound) {
            (VariantParams::Input { encoder, .. }, BoundVariant::Input { encoder: be, integ, head }) => {
                let x = tape.concat_channels(&[x_t, x_r])?;
                let pyr = encode_stream(
                    tape,
                    x,
                    &be.convs,
                    &be.norms,
                    &mut encoder.norms,
                    &blocks,
                    0,
                    training,
                )?;
                let top = pyr.levels.last().expect("nonempty").features;
                let projected = integ.apply(tape, top)?;
                predict_saliency(tape, projected, head)
            }
            (
                VariantParams::Early { stem, trunk, .. },
                BoundVariant::Early { stem: bs, join, trunk: bt, integ, head },
            ) => {
                let (pyr_t, pyr_r) = encode_pair(
                    tape,
                    x_t,
                    x_r,
                    bs,
                    &mut stem.norm_t,
                    &mut stem.norm_r,
                    &blocks[..1],
                    training,
                )?;
                let cat = tape.concat_channels(&[
                    pyr_t.levels[0].features,
                    pyr_r.levels[0].features,
                ])?;
                let joined = tape.conv2d(cat, join.kernel, Some(join.bias))?;
                let mut cur = tape.relu(joined)?;
                if blocks.len() > 1 {
                    cur = tape.maxpool2d(cur)?;
                    let pyr = encode_stream(
                        tape,
                        cur,
                        &bt.convs,
                        &bt.norms,
                        &mut trunk.norms,
                        &blocks[1..],
                        1,
                        training,
                    )?;
                    cur = pyr.levels.last().expect("nonempty").features;
                }
                let projected = integ.apply(tape, cur)?;
                predict_saliency(tape, projected, head)
            }
            (
                VariantParams::Late { encoder, .. },
                BoundVariant::Late { encoder: be, join, integ, head },
            ) => {
                let (pyr_t, pyr_r) = encode_pair(
                    tape,
                    x_t,
                    x_r,
                    be,
                    &mut encoder.norm_t,
                    &mut encoder.norm_r,
                    &blocks,
                    training,
                )?;
                // The single fusion point of this variant.
                let cat = tape.concat_channels(&[
                    pyr_t.levels.last().expect("nonempty").features,
                    pyr_r.levels.last().expect("nonempty").features,
                ])?;
                let joined = tape.conv2d(cat, join.kernel, Some(join.bias))?;
                let fused = tape.relu(joined)?;
                let projected = integ.apply(tape, fused)?;
                predict_saliency(tape, projected, head)
            }
            (
                VariantParams::Adhoc { encoder, .. },
                BoundVariant::Adhoc { encoder: be, collect, descriptor, head },
            ) => {
                let (pyr_t, pyr_r) = encode_pair(
                    tape,
                    x_t,
                    x_r,
                    be,
                    &mut encoder.norm_t,
                    &mut encoder.norm_r,
                    &blocks,
                    training,
                )?;
                let describe = |tape: &mut Tape, pyr: &FeaturePyramid| {
                    let lifted = pyr
                        .levels
                        .iter()
                        .zip(collect)
                        .map(|(level, c)| c.apply(tape, level.features))
                        .collect::<Result<Vec<_>, _>>()?;
                    let dense = tape.concat_channels(&lifted)?;
                    let conv = tape.conv2d(dense, descriptor.kernel, Some(descriptor.bias))?;
                    tape.relu(conv)
                };
                let desc_t = describe(tape, &pyr_t)?;
                let desc_r = describe(tape, &pyr_r)?;
                let cat = tape.concat_channels(&[desc_t, desc_r])?;
                predict_saliency(tape, cat, head)
            }
            (
                VariantParams::Hyper { encoder, .. },
                BoundVariant::Hyper { encoder: be, fusion },
            ) => {
                let (pyr_t, pyr_r) = encode_pair(
                    tape,
                    x_t,
                    x_r,
                    be,
                    &mut encoder.norm_t,
                    &mut encoder.norm_r,
                    &blocks,
                    training,
                )?;
                let handles_t = crate::fusion::PyramidHandles::from_pyramid(&pyr_t);
                let handles_r = crate::fusion::PyramidHandles::from_pyramid(&pyr_r);
                let mut stack = fuse_hyper(tape, &handles_t, &handles_r, fusion, &self.fusion_config)?;
                let integrated = integrate(tape, &mut stack, fusion, &self.fusion_config)?;
                predict_saliency(tape, integrated, &fusion.head)
            }
            _ => Err(TensorError::unsupported("forward", "bound handles from another variant")),
        }
    }

    /// Walks every trainable tensor in registration order.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        match &self.params {
            VariantParams::Input { encoder, integ, head } => {
                encoder.visit("enc", f);
                integ.visit("fuse.int", f);
                head.visit("fuse.head", f);
            }
            VariantParams::Early { stem, join, trunk, integ, head } => {
                stem.visit("stem", f);
                join.visit("fuse.join", f);
                trunk.visit("trunk", f);
                integ.visit("fuse.int", f);
                head.visit("fuse.head", f);
            }
            VariantParams::Late { encoder, join, integ, head } => {
                encoder.visit("enc", f);
                join.visit("fuse.join", f);
                integ.visit("fuse.int", f);
                head.visit("fuse.head", f);
            }
            VariantParams::Adhoc { encoder, collect, descriptor, head } => {
                encoder.visit("enc", f);
                for (l, c) in collect.iter().enumerate() {
                    c.visit(&format!("fuse.col{l}"), f);
                }
                descriptor.visit("fuse.desc", f);
                head.visit("fuse.head", f);
            }
            VariantParams::Hyper { encoder, fusion } => {
                encoder.visit("enc", f);
                fusion.visit("fuse", f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.params {
            VariantParams::Input { encoder, integ, head } => {
                encoder.visit_mut("enc", f);
                integ.visit_mut("fuse.int", f);
                head.visit_mut("fuse.head", f);
            }
            VariantParams::Early { stem, join, trunk, integ, head } => {
                stem.visit_mut("stem", f);
                join.visit_mut("fuse.join", f);
                trunk.visit_mut("trunk", f);
                integ.visit_mut("fuse.int", f);
                head.visit_mut("fuse.head", f);
            }
            VariantParams::Late { encoder, join, integ, head } => {
                encoder.visit_mut("enc", f);
                join.visit_mut("fuse.join", f);
                integ.visit_mut("fuse.int", f);
                head.visit_mut("fuse.head", f);
            }
            VariantParams::Adhoc { encoder, collect, descriptor, head } => {
                encoder.visit_mut("enc", f);
                for (l, c) in collect.iter_mut().enumerate() {
                    c.visit_mut(&format!("fuse.col{l}"), f);
                }
                descriptor.visit_mut("fuse.desc", f);
                head.visit_mut("fuse.head", f);
            }
            VariantParams::Hyper { encoder, fusion } => {
                encoder.visit_mut("enc", f);
                fusion.visit_mut("fuse", f);
            }
        }
    }

    /// Walks the non-trainable norm running statistics.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &[f64])) {
        match &self.params {
            VariantParams::Input { encoder, .. } => encoder.visit_buffers("enc", f),
            VariantParams::Early { stem, trunk, .. } => {
                stem.visit_buffers("stem", f);
                trunk.visit_buffers("trunk", f);
            }
            VariantParams::Late { encoder, .. }
            | VariantParams::Adhoc { encoder, .. }
            | VariantParams::Hyper { encoder, .. } => encoder.visit_buffers("enc", f),
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        match &mut self.params {
            VariantParams::Input { encoder, .. } => encoder.visit_buffers_mut("enc", f),
            VariantParams::Early { stem, trunk, .. } => {
                stem.visit_buffers_mut("stem", f);
                trunk.visit_buffers_mut("trunk", f);
            }
            VariantParams::Late { encoder, .. }
            | VariantParams::Adhoc { encoder, .. }
            | VariantParams::Hyper { encoder, .. } => encoder.visit_buffers_mut("enc", f),
        }
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }
}

/// Stacks per-image [3,H,W] tensors into one [N,3,H,W] batch.
pub fn stack_batch(images: &[Tensor]) -> Result<Tensor, TensorError> {
    if images.is_empty() {
        return Err(TensorError::unsupported("stack_batch", "empty batch"));
    }
    let dims = images[0].dims().to_vec();
    let mut values = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.dims() != dims {
            return Err(TensorError::shape(
                "stack_batch",
                format!("{dims:?}"),
                format!("{:?}", img.dims()),
            ));
        }
        values.extend_from_slice(img.values());
    }
    let mut batch_dims = vec![images.len()];
    batch_dims.extend_from_slice(&dims);
    Tensor::from_vec(batch_dims, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn toy_config(variant: FusionVariant) -> Config {
        Config {
            input_size: 16,
            blocks: vec![(1, 4), (1, 6)],
            head_channels: 4,
            fusion_variant: variant,
            batch_size: 2,
            ..Config::default()
        }
    }

    fn toy_inputs(tape: &mut Tape, seed: u64) -> (TensorId, TensorId) {
        let mut rng = rng::seeded(seed);
        let t = gradcheck::random_tensor(&[2, 3, 16, 16], &mut rng);
        let r = Tensor::from_vec(
            t.dims().to_vec(),
            t.values().iter().map(|v| -v).collect(),
        )
        .unwrap();
        (tape.constant(t), tape.constant(r))
    }

    #[test]
    fn every_variant_builds_runs_forward_and_backward() {
        for variant in FusionVariant::ALL {
            let mut model = Model::init(&toy_config(variant)).unwrap();
            let mut tape = Tape::new();
            let (bound, binding) = model.register(&mut tape);
            let (x_t, x_r) = toy_inputs(&mut tape, 3);
            let sal = model.forward(&mut tape, &bound, x_t, x_r, true).unwrap();
            let out = tape.value(sal);
            assert_eq!(out.dims(), &[2, 1, 16, 16], "{variant:?}");
            assert!(out.values().iter().all(|v| (0.0..1.0).contains(v) && *v > 0.0));
            let loss = tape.sum_all(sal).unwrap();
            tape.backward(loss).unwrap();
            for (name, id) in &binding {
                assert!(
                    tape.grad(*id).is_some(),
                    "{variant:?}: no gradient reached {name}"
                );
            }
        }
    }

    #[test]
    fn input_variant_first_conv_sees_six_channels() {
        let model = Model::init(&toy_config(FusionVariant::Input)).unwrap();
        match &model.params {
            VariantParams::Input { encoder, .. } => {
                assert_eq!(encoder.convs[0].kernel.dims(), &[4, 6, 3, 3]);
            }
            other => panic!("wrong params {other:?}"),
        }
    }

    #[test]
    fn late_variant_has_exactly_one_cross_stream_parameter() {
        let model = Model::init(&toy_config(FusionVariant::Late)).unwrap();
        match &model.params {
            VariantParams::Late { join, .. } => {
                // Twice the final block's channels in, one fusion point.
                assert_eq!(join.kernel.dims(), &[6, 12, 3, 3]);
            }
            other => panic!("wrong params {other:?}"),
        }
        let mut joins = 0;
        model.visit(&mut |name, _| joins += usize::from(name.starts_with("fuse.join")));
        assert_eq!(joins, 2); // kernel + bias
    }

    #[test]
    fn parameter_counts_match_a_shape_walk_oracle() {
        // Scalar counts recomputed from first principles per variant.
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let norms = |chs: &[usize]| 2 * chs.iter().sum::<usize>();
        let integ = |i: usize, hc: usize, steps: usize| conv(hc, i, 1) + steps * i_up(hc);
        let expected: &[(FusionVariant, usize)] = &[
            // input: convs (4<-6, 6<-4), one norm set, integrate, head
            (
                FusionVariant::Input,
                conv(4, 6, 3) + conv(6, 4, 3) + norms(&[4, 6]) + integ(6, 4, 1) + conv(2, 4, 3),
            ),
            // early: stem conv + two norm sets, join 8->4, trunk conv 6<-4
            // + one norm set, integrate, head
            (
                FusionVariant::Early,
                conv(4, 3, 3)
                    + 2 * norms(&[4])
                    + conv(4, 8, 3)
                    + conv(6, 4, 3)
                    + norms(&[6])
                    + integ(6, 4, 1)
                    + conv(2, 4, 3),
            ),
            // late: stitched convs + two norm sets, join 12->6, integrate, head
            (
                FusionVariant::Late,
                conv(4, 3, 3) + conv(6, 4, 3) + 2 * norms(&[4, 6]) + conv(6, 12, 3)
                    + integ(6, 4, 1)
                    + conv(2, 4, 3),
            ),
            // adhoc: stitched encoder, collectors (4->4 no ups; 6->4 one up),
            // descriptor 8->4, head on 2*4 channels
            (
                FusionVariant::Adhoc,
                conv(4, 3, 3) + conv(6, 4, 3) + 2 * norms(&[4, 6]) + integ(4, 4, 0)
                    + integ(6, 4, 1)
                    + conv(4, 8, 3)
                    + conv(2, 8, 3),
            ),
            // hyper: stitched encoder, g nodes, carry handoff, per-block
            // integration, head over 2*4 integrated channels
            (
                FusionVariant::Hyper,
                conv(4, 3, 3) + conv(6, 4, 3) + 2 * norms(&[4, 6])
                    + conv(4, 14, 3)   // g0: 2*4 features + carry 6
                    + conv(6, 12, 3)   // g1: 2*6, coarsest has no carry
                    + 6 * 6 * 16       // carry handoff kernel [6,6,4,4]
                    + integ(4, 4, 0)
                    + integ(6, 4, 1)
                    + conv(2, 8, 3),
            ),
        ];
        fn i_up(hc: usize) -> usize {
            hc * hc * 16
        }
        for (variant, want) in expected {
            let model = Model::init(&toy_config(*variant)).unwrap();
            assert_eq!(model.parameter_count(), *want, "{variant:?}");
            // Registration, visitation, and the optimizer binding agree.
            let mut tape = Tape::new();
            let (_, binding) = model.register(&mut tape);
            let mut visited = Vec::new();
            model.visit(&mut |name, _| visited.push(name));
            assert_eq!(
                binding.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
                visited,
                "{variant:?}"
            );
        }
    }

    #[test]
    fn init_is_deterministic_per_config() {
        let a = Model::init(&toy_config(FusionVariant::Hyper)).unwrap();
        let b = Model::init(&toy_config(FusionVariant::Hyper)).unwrap();
        let mut va = Vec::new();
        a.visit(&mut |name, t| va.push((name, t.values().to_vec())));
        let mut idx = 0;
        b.visit(&mut |name, t| {
            assert_eq!(va[idx].0, name);
            for (x, y) in va[idx].1.iter().zip(t.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            idx += 1;
        });
        assert_eq!(idx, va.len());
    }

    #[test]
    fn eval_mode_leaves_running_statistics_alone() {
        let mut model = Model::init(&toy_config(FusionVariant::Hyper)).unwrap();
        let snapshot = |m: &Model| {
            let mut v = Vec::new();
            m.visit_buffers(&mut |name, buf| v.push((name, buf.to_vec())));
            v
        };
        let before = snapshot(&model);
        let mut tape = Tape::new();
        let (bound, _) = model.register(&mut tape);
        let (x_t, x_r) = toy_inputs(&mut tape, 5);
        model.forward(&mut tape, &bound, x_t, x_r, false).unwrap();
        assert_eq!(before, snapshot(&model));
        // Training mode moves them.
        let mut tape = Tape::new();
        let (bound, _) = model.register(&mut tape);
        let (x_t, x_r) = toy_inputs(&mut tape, 5);
        model.forward(&mut tape, &bound, x_t, x_r, true).unwrap();
        assert_ne!(before, snapshot(&model));
    }

    #[test]
    fn batches_stack_and_mismatches_are_rejected() {
        let a = Tensor::full(&[3, 4, 4], 0.25);
        let b = Tensor::full(&[3, 4, 4], 0.75);
        let batch = stack_batch(&[a.clone(), b]).unwrap();
        assert_eq!(batch.dims(), &[2, 3, 4, 4]);
        assert_eq!(batch.values()[0], 0.25);
        assert_eq!(batch.values()[48], 0.75);
        assert!(stack_batch(&[a, Tensor::full(&[3, 2, 2], 0.0)]).is_err());
        assert!(stack_batch(&[]).is_err());
    }
}
