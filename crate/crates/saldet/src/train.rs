//! Training driver: deterministic batching and augmentation, pair
//! separation, forward/backward, momentum SGD, plateau-driven learning
//! rate decay, and checkpoint writes.
//!
//! Everything downstream of (config, examples) is a pure function of the
//! config seed: batch selection and augmentation draw from dedicated
//! substreams, so two runs produce bitwise-identical loss curves.

use std::path::Path;

use rand::Rng;

use crate::checkpoint::{pack, TrainState};
use crate::config::Config;
use crate::data::{prepare, AugmentParams, Example};
use crate::error::PipelineError;
use crate::model::{stack_batch, Model};
use crate::objective::{training_loss_terms, LossMode, LossTerms, Sgd, SpExtractor};
use crate::reflect::{dataset_mean, separate, SepParams};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Steps per moving-average window of the plateau rule.
pub const PLATEAU_WINDOW: usize = 200;
/// Window-over-window improvement below this decays the learning rate.
pub const PLATEAU_DECAY: f64 = 0.01;
/// Improvement below this stops training ("loss has converged").
pub const PLATEAU_STOP: f64 = 0.001;
/// Learning-rate decay factor on a plateau.
pub const LR_DECAY: f64 = 0.1;
/// Checkpoint write interval in steps (one more write happens at the end).
pub const CHECKPOINT_INTERVAL: usize = 500;

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub mode: LossMode,
    /// Feed the separated pair (true) or the raw image twice (false, the
    /// ablation's raw-duplicate input).
    pub reflect: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { mode: LossMode::WbceSp, reflect: true }
    }
}

/// One step's scalars. Loss values are per-pixel means: the summed
/// objective scaled by 1/(batch * height * width), which is also the
/// scaling the optimizer sees. `total` recomposes as wbce + mu * sp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Cross-entropy term (balanced for the wbce modes).
    pub wbce: f64,
    /// Structural term before its mu weighting; 0 when disabled.
    pub sp: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "step {:>5}  wbce {:.6e}  sp {:.6e}  total {:.6e}  lr {:.3e}",
            self.step, self.wbce, self.sp, self.total, self.lr
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    /// True when the plateau rule ended training before max_steps.
    pub converged: bool,
}

/// What the plateau tracker asks the loop to do after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauVerdict {
    Continue,
    DecayLr,
    Stop,
}

/// Tracks the windowed moving average of the loss and compares adjacent
/// windows: improvement below the stop threshold ends training, below the
/// decay threshold shrinks the learning rate.
#[derive(Debug, Clone)]
pub struct Plateau {
    window: usize,
    sum: f64,
    count: usize,
    prev: Option<f64>,
}

impl Plateau {
    pub fn new(window: usize) -> Self {
        Plateau { window: window.max(1), sum: 0.0, count: 0, prev: None }
    }

    pub fn observe(&mut self, loss: f64) -> PlateauVerdict {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return PlateauVerdict::Continue;
        }
        let cur = self.sum / self.window as f64;
        self.sum = 0.0;
        self.count = 0;
        let verdict = match self.prev {
            None => PlateauVerdict::Continue,
            Some(prev) => {
                let improvement = (prev - cur) / prev.abs().max(f64::MIN_POSITIVE);
                if improvement < PLATEAU_STOP {
                    PlateauVerdict::Stop
                } else if improvement < PLATEAU_DECAY {
                    PlateauVerdict::DecayLr
                } else {
                    PlateauVerdict::Continue
                }
            }
        };
        self.prev = Some(cur);
        verdict
    }
}

/// First `batch` indices of a seeded partial shuffle; the whole set, in
/// order, when the batch covers it.
fn batch_indices(count: usize, batch: usize, rng: &mut rng::SeededRng) -> Vec<usize> {
    if batch >= count {
        return (0..count).collect();
    }
    let mut pool: Vec<usize> = (0..count).collect();
    for i in 0..batch {
        let j = i + rng.random_range(0..count - i);
        pool.swap(i, j);
    }
    pool.truncate(batch);
    pool
}

/// First parameter or normalization buffer holding a non-finite value, in
/// visit order.
fn first_non_finite_state(model: &Model) -> Option<String> {
    let mut found = None;
    model.visit(&mut |name, t| {
        if found.is_none() && t.values().iter().any(|v| !v.is_finite()) {
            found = Some(format!("parameter {name}"));
        }
    });
    model.visit_buffers(&mut |name, vals| {
        if found.is_none() && vals.iter().any(|v| !v.is_finite()) {
            found = Some(format!("statistic {name}"));
        }
    });
    found
}

fn non_finite_diagnostic(
    tape: &Tape,
    binding: &[(String, TensorId)],
    sal: TensorId,
    terms: &LossTerms,
    step: usize,
) -> PipelineError {
    let bad = |id: TensorId| tape.value(id).values().iter().any(|v| !v.is_finite());
    let name = binding
        .iter()
        .find(|(_, id)| bad(*id))
        .map(|(n, _)| format!("parameter {n}"))
        .or_else(|| bad(sal).then(|| "the saliency prediction".to_string()))
        .or_else(|| bad(terms.ce).then(|| "the cross-entropy term".to_string()))
        .or_else(|| terms.sp.filter(|id| bad(*id)).map(|_| "the structural term".to_string()))
        .unwrap_or_else(|| "the total loss".to_string());
    PipelineError::invalid(format!(
        "step {step}: loss is non-finite; first non-finite tensor: {name}"
    ))
}

/// Trains a fresh model on the examples. When `out` is given, a checkpoint
/// lands there every CHECKPOINT_INTERVAL steps and at the end. `on_step`
/// sees every step's log entry as it happens.
pub fn train(
    config: &Config,
    examples: &[Example],
    options: TrainOptions,
    out: Option<&Path>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(PipelineError::invalid("no training examples"));
    }
    let mean = dataset_mean(examples.iter().map(|e| &e.image))?;
    let sep = SepParams::new(config.k, mean);
    let mut model = Model::init(config)?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let extractor = SpExtractor::init(config.seed);
    let loss_cfg = config.loss_config();
    let size = config.input_size;

    let mut batch_rng = rng::substream(config.seed, "train-batch");
    let mut aug_rng = rng::substream(config.seed, "train-augment");
    let mut plateau = Plateau::new(PLATEAU_WINDOW);

    let mut log: Vec<StepLog> = Vec::new();
    let mut converged = false;
    let mut step = 0usize;
    while step < config.max_steps {
        let idxs = batch_indices(examples.len(), config.batch_size, &mut batch_rng);
        let mut xs_t = Vec::with_capacity(idxs.len());
        let mut xs_r = Vec::with_capacity(idxs.len());
        let mut gts = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let ex = &examples[i];
            let params = if config.augment {
                AugmentParams::sample(ex.height, ex.width, &mut aug_rng)
            } else {
                AugmentParams::identity(ex.height, ex.width)
            };
            let (img, mask) = prepare(ex, size, params)?;
            if options.reflect {
                let pair = separate(&img, &sep)?;
                xs_t.push(pair.transmitted);
                xs_r.push(pair.reflected);
            } else {
                xs_t.push(img.clone());
                xs_r.push(img);
            }
            gts.push(Tensor::from_vec(vec![1, size, size], mask)?);
        }
        let batch_t = stack_batch(&xs_t)?;
        let batch_r = stack_batch(&xs_r)?;
        let batch_gt = stack_batch(&gts)?;
        let scale = 1.0 / (idxs.len() * size * size) as f64;

        let mut tape = Tape::new();
        let (bound, binding) = model.register(&mut tape);
        let x_t = tape.constant(batch_t);
        let x_r = tape.constant(batch_r);
        let gt = tape.constant(batch_gt);
        let sal = model.forward(&mut tape, &bound, x_t, x_r, true)?;
        let terms = training_loss_terms(&mut tape, sal, gt, &extractor, &loss_cfg, options.mode)?;
        let scaled = tape.scale(terms.total, scale)?;

        let total = tape.value(scaled).values()[0];
        if !total.is_finite() {
            return Err(non_finite_diagnostic(&tape, &binding, sal, &terms, step));
        }
        tape.backward(scaled)?;
        opt.step(&tape, &binding, &mut |f| model.visit_mut(f))?;
        // A non-finite loss is caught above, but a poisoned update can hide
        // behind relu gating in the next forward, so the state is swept too.
        if let Some(name) = first_non_finite_state(&model) {
            return Err(PipelineError::invalid(format!(
                "step {step}: update went non-finite; first non-finite tensor: {name}"
            )));
        }

        let entry = StepLog {
            step,
            wbce: tape.value(terms.ce).values()[0] * scale,
            sp: terms.sp.map_or(0.0, |id| tape.value(id).values()[0] * scale),
            total,
            lr: opt.lr,
        };
        on_step(&entry);
        log.push(entry);
        step += 1;

        match plateau.observe(total) {
            PlateauVerdict::Continue => {}
            PlateauVerdict::DecayLr => opt.lr *= LR_DECAY,
            PlateauVerdict::Stop => converged = true,
        }
        if let Some(path) = out {
            if !converged && step < config.max_steps && step % CHECKPOINT_INTERVAL == 0 {
                pack(&model, &opt, mean, step as u64).save(path)?;
            }
        }
        if converged {
            break;
        }
    }

    let state = TrainState { model, opt, mean, step: step as u64 };
    if let Some(path) = out {
        pack(&state.model, &state.opt, state.mean, state.step).save(path)?;
    }
    Ok(TrainOutcome { state, log, converged })
}
