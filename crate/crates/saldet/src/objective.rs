//! Training losses and the momentum optimizer.
//!
//! Losses are sums over pixels and images, not means: a batch of B images
//! contributes B independent per-image terms. The cross-entropy family
//! weights foreground and background pixels per image; the structural term
//! compares feature activations of prediction and mask under a small fixed
//! conv stack whose weights never train.

use serde::{Deserialize, Serialize};

use crate::encoder::ConvLayer;
use crate::error::TensorError;
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Layer widths of the frozen feature stack used by the structural loss.
pub const SP_CHANNELS: [usize; 4] = [8, 8, 16, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the structural term in the total loss.
    pub mu: f64,
    /// One weight per feature tap of the frozen stack.
    pub lambda: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mu: 0.01, lambda: vec![1.0; SP_CHANNELS.len()] }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.mu < 0.0 || self.lambda.iter().any(|l| *l < 0.0) {
            return Err(TensorError::unsupported("loss config", "negative weight"));
        }
        Ok(())
    }
}

/// Which loss the training step optimizes; the ablation table trains one
/// model per mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Bce,
    Wbce,
    BceSp,
    WbceSp,
}

impl LossMode {
    pub const ALL: [LossMode; 4] =
        [LossMode::Bce, LossMode::Wbce, LossMode::BceSp, LossMode::WbceSp];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Bce => "bce",
            LossMode::Wbce => "wbce",
            LossMode::BceSp => "bce_sp",
            LossMode::WbceSp => "wbce_sp",
        }
    }

    fn balanced(self) -> bool {
        matches!(self, LossMode::Wbce | LossMode::WbceSp)
    }

    fn structural(self) -> bool {
        matches!(self, LossMode::BceSp | LossMode::WbceSp)
    }
}

impl std::str::FromStr for LossMode {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, TensorError> {
        LossMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| TensorError::unsupported("loss mode", s))
    }
}

// ── Cross-entropy family ────────────────────────────────────────────────

/// Per-image (foreground, background) weights. Plain cross-entropy uses
/// (1, 1); the balanced form uses (beta, 1-beta) with beta the background
/// fraction, so the rarer class carries the larger weight.
fn balance_weights(gt: &Tensor) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    let (n, c, h, w) = gt.dims4()?;
    if c != 1 {
        return Err(TensorError::shape("balance_weights", "1 channel", format!("{c} channels")));
    }
    let px = h * w;
    if px == 0 {
        return Err(TensorError::unsupported("balance_weights", "empty image"));
    }
    let mut pos_w = Vec::with_capacity(n);
    let mut neg_w = Vec::with_capacity(n);
    for i in 0..n {
        let img = &gt.values()[i * px..(i + 1) * px];
        let neg = img.iter().filter(|v| **v == 0.0).count();
        let beta = neg as f64 / px as f64;
        pos_w.push(beta);
        neg_w.push(1.0 - beta);
    }
    Ok((pos_w, neg_w))
}

/// Summed cross-entropy with explicit per-image class weights.
pub fn weighted_bce(
    tape: &mut Tape,
    pred: TensorId,
    gt: TensorId,
    pos_w: Vec<f64>,
    neg_w: Vec<f64>,
) -> Result<TensorId, TensorError> {
    let per_image = tape.bce_sum_per_image(pred, gt, pos_w, neg_w)?;
    tape.sum_all(per_image)
}

/// Plain summed cross-entropy: every pixel weighs 1.
pub fn bce_loss(tape: &mut Tape, pred: TensorId, gt: TensorId) -> Result<TensorId, TensorError> {
    let n = tape.value(pred).dims4()?.0;
    weighted_bce(tape, pred, gt, vec![1.0; n], vec![1.0; n])
}

/// Class-balanced cross-entropy; the weights come from each image's own
/// foreground/background ratio.
pub fn wbce_loss(tape: &mut Tape, pred: TensorId, gt: TensorId) -> Result<TensorId, TensorError> {
    let (pos_w, neg_w) = balance_weights(tape.value(gt))?;
    weighted_bce(tape, pred, gt, pos_w, neg_w)
}

// ── Structural term ─────────────────────────────────────────────────────

/// Frozen random conv stack standing in for a pretrained feature
/// extractor: four 3x3 conv+relu layers. Masks are single-channel, so the
/// input is replicated to three channels first. The weights go on the tape
/// as constants and therefore never receive gradients.
#[derive(Debug, Clone)]
pub struct SpExtractor {
    layers: Vec<ConvLayer>,
}

impl SpExtractor {
    pub fn init(seed: u64) -> Self {
        let mut r = rng::substream(seed, "sp-extractor");
        let mut layers = Vec::with_capacity(SP_CHANNELS.len());
        let mut in_ch = 3;
        for &out_ch in &SP_CHANNELS {
            layers.push(ConvLayer::init_msra(out_ch, in_ch, 3, &mut r));
            in_ch = out_ch;
        }
        SpExtractor { layers }
    }

    pub fn taps(&self) -> usize {
        self.layers.len()
    }

    /// Feature maps after every conv+relu, shallowest first.
    pub fn features(&self, tape: &mut Tape, x: TensorId) -> Result<Vec<TensorId>, TensorError> {
        let mut cur = tape.concat_channels(&[x, x, x])?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = tape.constant(layer.kernel.clone());
            let b = tape.constant(layer.bias.clone());
            let conv = tape.conv2d(cur, k, Some(b))?;
            cur = tape.relu(conv)?;
            taps.push(cur);
        }
        Ok(taps)
    }
}

/// Sum over taps of lambda_l times the per-image L2 distance between the
/// mask's and the prediction's feature maps (plain norm, not squared).
pub fn sp_loss(
    tape: &mut Tape,
    pred: TensorId,
    gt: TensorId,
    extractor: &SpExtractor,
    lambda: &[f64],
) -> Result<TensorId, TensorError> {
    if lambda.len() != extractor.taps() {
        return Err(TensorError::unsupported(
            "sp_loss",
            format!("{} weights for {} taps", lambda.len(), extractor.taps()),
        ));
    }
    let f_gt = extractor.features(tape, gt)?;
    let f_pred = extractor.features(tape, pred)?;
    let mut total = None;
    for ((fg, fp), &lam) in f_gt.iter().zip(&f_pred).zip(lambda) {
        let norms = tape.diff_norm_per_image(*fg, *fp)?;
        let summed = tape.sum_all(norms)?;
        let term = tape.scale(summed, lam)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| TensorError::unsupported("sp_loss", "extractor has no layers"))
}

/// Balanced cross-entropy plus mu times the structural term.
pub fn total_loss(
    tape: &mut Tape,
    pred: TensorId,
    gt: TensorId,
    extractor: &SpExtractor,
    cfg: &LossConfig,
) -> Result<TensorId, TensorError> {
    training_loss(tape, pred, gt, extractor, cfg, LossMode::WbceSp)
}

/// The loss a training step drives, selected by mode. Modes without the
/// structural term skip the extractor forward entirely.
pub fn training_loss(
    tape: &mut Tape,
    pred: TensorId,
    gt: TensorId,
    extractor: &SpExtractor,
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<TensorId, TensorError> {
    Ok(training_loss_terms(tape, pred, gt, extractor, cfg, mode)?.total)
}

/// Tape nodes for the objective's individual terms, for step logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// Cross-entropy term (balanced when the mode calls for it).
    pub ce: TensorId,
    /// Structural term before the mu weighting; None when disabled.
    pub sp: Option<TensorId>,
    /// The scalar the step optimizes: ce + mu * sp.
    pub total: TensorId,
}

pub fn training_loss_terms(
    tape: &mut Tape,
    pred: TensorId,
    gt: TensorId,
    extractor: &SpExtractor,
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<LossTerms, TensorError> {
    cfg.validate()?;
    let ce = if mode.balanced() {
        wbce_loss(tape, pred, gt)?
    } else {
        bce_loss(tape, pred, gt)?
    };
    if !mode.structural() || cfg.mu == 0.0 {
        return Ok(LossTerms { ce, sp: None, total: ce });
    }
    let sp = sp_loss(tape, pred, gt, extractor, &cfg.lambda)?;
    let scaled = tape.scale(sp, cfg.mu)?;
    let total = tape.add(ce, scaled)?;
    Ok(LossTerms { ce, sp: Some(sp), total })
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Momentum SGD with coupled weight decay:
/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
/// Velocity buffers mirror the parameter list the first time `step` runs.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Velocity buffers in parameter order; empty before the first step.
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Replaces the velocity buffers (restoring saved training state).
    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// Applies one update. `binding` names the tape leaves whose gradients
    /// drive the step; `visit_params` must walk the host tensors in the
    /// exact order they were registered (the names are cross-checked).
    pub fn step(
        &mut self,
        tape: &Tape,
        binding: &[(String, TensorId)],
        visit_params: &mut dyn FnMut(&mut dyn FnMut(String, &mut Tensor)),
    ) -> Result<(), TensorError> {
        let mut grads: Vec<(&str, &[f64])> = Vec::with_capacity(binding.len());
        for (name, id) in binding {
            let g = tape.grad(*id).ok_or_else(|| {
                TensorError::unsupported("sgd_step", format!("no gradient for {name}"))
            })?;
            grads.push((name.as_str(), g));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
        }
        if self.velocity.len() != grads.len() {
            return Err(TensorError::unsupported(
                "sgd_step",
                format!("{} velocity buffers for {} parameters", self.velocity.len(), grads.len()),
            ));
        }

        let (lr, momentum, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut index = 0usize;
        let mut err: Option<TensorError> = None;
        visit_params(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let Some((gname, g)) = grads.get(index) else {
                err = Some(TensorError::unsupported("sgd_step", "more parameters than bindings"));
                return;
            };
            if name != *gname || t.len() != g.len() || velocity[index].len() != g.len() {
                err = Some(TensorError::unsupported(
                    "sgd_step",
                    format!("parameter {name} does not line up with binding {gname}"),
                ));
                return;
            }
            for ((p, v), gi) in t.values_mut().iter_mut().zip(&mut velocity[index]).zip(*g) {
                *v = momentum * *v + *gi + wd * *p;
                *p -= lr * *v;
            }
            index += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if index != grads.len() {
            return Err(TensorError::unsupported(
                "sgd_step",
                format!("visited {index} parameters for {} bindings", grads.len()),
            ));
        }
        Ok(())
    }
}
