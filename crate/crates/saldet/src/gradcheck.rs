//! Central finite-difference verification of the tape's gradients.
//!
//! Every differentiable op gets checked by perturbing each leaf component
//! by ±`step`, re-running the forward pass, and comparing the quotient to
//! the analytic gradient. The error is reported relative to
//! `max(1, |analytic|, |numeric|)`, which keeps tiny-gradient components
//! from drowning in floating-point cancellation noise.

use crate::config::Config;
use crate::error::{PipelineError, TensorError};
use crate::fusion::FusionVariant;
use crate::model::Model;
use crate::objective::{training_loss, LossMode, SpExtractor};
use crate::rng::{uniform, SeededRng};
use crate::tensor::{Tape, Tensor, TensorId};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub components: usize,
    pub passed: bool,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<28} max rel err {:>12.3e} over {:>6} components .. {}",
            self.name,
            self.max_rel_err,
            self.components,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// Checks d(loss)/d(leaf) for every supplied leaf against central
/// differences. `build` must construct the graph from scratch on the given
/// tape from the current leaf values and return the scalar loss; it runs
/// once per perturbation, so it must be a pure function of those values.
pub fn check_gradients(
    name: &str,
    leaves: &[Tensor],
    step: f64,
    tol: f64,
    build: &mut dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
) -> Result<CheckReport, TensorError> {
    fn forward(
        vals: &[Tensor],
        build: &mut dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
    ) -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).values()[0])
    }

    // Analytic pass.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> =
            leaves.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        ids.iter().map(|&id| tape.grad(id).expect("leaf gradient").to_vec()).collect()
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut max_rel = 0.0f64;
    let mut components = 0usize;
    for (li, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = work[li].values()[ci];
            work[li].values_mut()[ci] = orig + step;
            let up = forward(&work, build)?;
            work[li].values_mut()[ci] = orig - step;
            let down = forward(&work, build)?;
            work[li].values_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[ci];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
            components += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        components,
        passed: max_rel < tol,
    })
}

/// Random tensor with entries in [-1, 1].
pub fn random_tensor(dims: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = dims.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect();
    Tensor::from_vec(dims.to_vec(), vals).expect("dims match")
}

/// Random tensor bounded away from zero, for ops with a kink at the origin
/// (relu, maxpool ties) where finite differences straddle the corner.
pub fn random_tensor_away_from_zero(dims: &[usize], rng: &mut SeededRng) -> Tensor {
    let n: usize = dims.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let mag = uniform(rng, 0.05, 1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(dims.to_vec(), vals).expect("dims match")
}

use rand::Rng;

/// Runs the per-primitive gradient checks; each op is exercised through a
/// nonlinear scalar head (sum of squares) so every output influences the
/// loss with a distinct weight.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckReport>, TensorError> {
    let mut rng = crate::rng::substream(seed, "gradcheck");
    let mut reports = Vec::new();

    let square_sum = |tape: &mut Tape, x: TensorId| -> Result<TensorId, TensorError> {
        let sq = tape.mul(x, x)?;
        tape.sum_all(sq)
    };

    // conv2d: input, kernel and bias all trainable.
    {
        let leaves = vec![
            random_tensor(&[2, 3, 6, 6], &mut rng),
            random_tensor(&[4, 3, 3, 3], &mut rng),
            random_tensor(&[4], &mut rng),
        ];
        reports.push(check_gradients("conv2d", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]))?;
            square_sum(tape, y)
        })?);
    }

    // upsample2x: input and kernel.
    {
        let leaves =
            vec![random_tensor(&[1, 3, 4, 4], &mut rng), random_tensor(&[3, 2, 4, 4], &mut rng)];
        reports.push(check_gradients("upsample2x", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let y = tape.upsample2x(ids[0], ids[1])?;
            square_sum(tape, y)
        })?);
    }

    // maxpool2d on values bounded away from ties.
    {
        let leaves = vec![random_tensor_away_from_zero(&[1, 2, 6, 6], &mut rng)];
        reports.push(check_gradients("maxpool2d", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let y = tape.maxpool2d(ids[0])?;
            square_sum(tape, y)
        })?);
    }

    // relu away from the kink.
    {
        let leaves = vec![random_tensor_away_from_zero(&[1, 2, 5, 5], &mut rng)];
        reports.push(check_gradients("relu", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let y = tape.relu(ids[0])?;
            square_sum(tape, y)
        })?);
    }

    // batchnorm with batch statistics: differentiates through mean and var.
    {
        let leaves = vec![
            random_tensor(&[2, 3, 4, 4], &mut rng),
            random_tensor(&[3], &mut rng),
            random_tensor(&[3], &mut rng),
        ];
        reports.push(check_gradients(
            "batchnorm(batch stats)",
            &leaves,
            DEFAULT_STEP,
            DEFAULT_TOL,
            &mut |tape, ids| {
                let (y, _, _) = tape.batchnorm(ids[0], ids[1], ids[2], None, 1e-5)?;
                square_sum(tape, y)
            },
        )?);
    }

    // batchnorm with frozen statistics.
    {
        let leaves = vec![
            random_tensor(&[1, 2, 4, 4], &mut rng),
            random_tensor(&[2], &mut rng),
            random_tensor(&[2], &mut rng),
        ];
        let mean = vec![0.1, -0.2];
        let var = vec![0.9, 1.4];
        reports.push(check_gradients(
            "batchnorm(frozen stats)",
            &leaves,
            DEFAULT_STEP,
            DEFAULT_TOL,
            &mut move |tape, ids| {
                let (y, _, _) = tape.batchnorm(ids[0], ids[1], ids[2], Some((&mean, &var)), 1e-5)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
        )?);
    }

    // concat_channels mixes three inputs.
    {
        let leaves = vec![
            random_tensor(&[1, 2, 3, 4], &mut rng),
            random_tensor(&[1, 1, 3, 4], &mut rng),
            random_tensor(&[1, 3, 3, 4], &mut rng),
        ];
        reports.push(check_gradients("concat_channels", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let y = tape.concat_channels(ids)?;
            square_sum(tape, y)
        })?);
    }

    // add / sub / mul / scale composed.
    {
        let leaves =
            vec![random_tensor(&[2, 1, 3, 3], &mut rng), random_tensor(&[2, 1, 3, 3], &mut rng)];
        reports.push(check_gradients("add/sub/mul/scale", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let d = tape.sub(ids[0], ids[1])?;
            let m = tape.mul(s, d)?;
            let sc = tape.scale(m, 0.37)?;
            square_sum(tape, sc)
        })?);
    }

    // pixel_softmax2 through a weighted sum.
    {
        let leaves = vec![random_tensor(&[2, 2, 3, 3], &mut rng)];
        reports.push(check_gradients("pixel_softmax2", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let p = tape.pixel_softmax2(ids[0])?;
            square_sum(tape, p)
        })?);
    }

    // diff_norm_per_image away from the zero-distance kink.
    {
        let base = random_tensor(&[2, 1, 3, 3], &mut rng);
        let mut other = base.clone();
        for v in other.values_mut() {
            *v += 0.5;
        }
        let leaves = vec![base, other];
        reports.push(check_gradients("diff_norm", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let n = tape.diff_norm_per_image(ids[0], ids[1])?;
            tape.sum_all(n)
        })?);
    }

    // Weighted cross-entropy with respect to predictions in (0, 1).
    {
        let n: usize = 9;
        let probs: Vec<f64> = (0..2 * n).map(|_| uniform(&mut rng, 0.1, 0.9)).collect();
        let pred = Tensor::from_vec(vec![2, 1, 3, 3], probs).expect("dims");
        let gt_vals: Vec<f64> = (0..2 * n).map(|_| f64::from(rng.random::<bool>())).collect();
        let gt = Tensor::from_vec(vec![2, 1, 3, 3], gt_vals).expect("dims");
        let leaves = vec![pred];
        reports.push(check_gradients("weighted bce", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut move |tape, ids| {
            let t = tape.constant(gt.clone());
            let per = tape.bce_sum_per_image(ids[0], t, vec![0.7, 0.4], vec![0.3, 0.6])?;
            tape.sum_all(per)
        })?);
    }

    Ok(reports)
}

/// Config the composed end-to-end check runs on: 16x16 input, two
/// single-conv blocks, small widths. Big enough to cross a pooling
/// boundary and every fusion path, small enough to sweep every parameter.
pub fn toy_check_config(variant: FusionVariant) -> Config {
    Config {
        input_size: 16,
        blocks: vec![(1, 4), (1, 8)],
        head_channels: 4,
        fusion_variant: variant,
        seed: 11,
        ..Config::default()
    }
}

/// Checks the whole differentiable path (pair encoder, fusion, prediction
/// head, balanced cross-entropy plus structural term) by sweeping every
/// parameter coordinate and every input pixel against central differences.
///
/// The forward runs in training mode, whose normalization uses batch
/// statistics only; the running-statistic side effects it leaves on the
/// model never feed back into the loss, so each evaluation stays a pure
/// function of (parameters, inputs).
pub fn model_check(config: &Config) -> Result<CheckReport, PipelineError> {
    let mut model = Model::init(config)?;
    let extractor = SpExtractor::init(config.seed);
    let loss_cfg = config.loss_config();
    let size = config.input_size;
    let mut rng = crate::rng::substream(config.seed, "model-check");
    let mut x_t = random_tensor(&[1, 3, size, size], &mut rng);
    let mut x_r = random_tensor(&[1, 3, size, size], &mut rng);
    let gt_vals: Vec<f64> = (0..size * size).map(|_| f64::from(rng.random::<bool>())).collect();
    let gt = Tensor::from_vec(vec![1, 1, size, size], gt_vals)?;

    let eval = |model: &mut Model, x_t: &Tensor, x_r: &Tensor| -> Result<f64, PipelineError> {
        let mut tape = Tape::new();
        let (bound, _) = model.register(&mut tape);
        let t = tape.constant(x_t.clone());
        let r = tape.constant(x_r.clone());
        let g = tape.constant(gt.clone());
        let sal = model.forward(&mut tape, &bound, t, r, true)?;
        let loss = training_loss(&mut tape, sal, g, &extractor, &loss_cfg, LossMode::WbceSp)?;
        Ok(tape.value(loss).values()[0])
    };

    // One analytic pass; binding order equals visit order. The inputs go
    // on as grad-tracked leaves so their gradients are checked too.
    let (param_grads, input_grads) = {
        let mut tape = Tape::new();
        let (bound, binding) = model.register(&mut tape);
        let t = tape.leaf(x_t.clone().with_grad());
        let r = tape.leaf(x_r.clone().with_grad());
        let g = tape.constant(gt.clone());
        let sal = model.forward(&mut tape, &bound, t, r, true)?;
        let loss = training_loss(&mut tape, sal, g, &extractor, &loss_cfg, LossMode::WbceSp)?;
        tape.backward(loss)?;
        let params: Vec<Vec<f64>> = binding
            .iter()
            .map(|(name, id)| {
                tape.grad(*id).map(<[f64]>::to_vec).ok_or_else(|| {
                    PipelineError::invalid(format!("no gradient reached parameter {name}"))
                })
            })
            .collect::<Result<_, _>>()?;
        let inputs: Vec<Vec<f64>> = [t, r]
            .iter()
            .map(|id| {
                tape.grad(*id).map(<[f64]>::to_vec).ok_or_else(|| {
                    PipelineError::invalid("no gradient reached an input branch".to_string())
                })
            })
            .collect::<Result<_, _>>()?;
        (params, inputs)
    };

    let set_param = |model: &mut Model, target: usize, j: usize, v: f64| {
        let mut k = 0usize;
        model.visit_mut(&mut |_, t| {
            if k == target {
                t.values_mut()[j] = v;
            }
            k += 1;
        });
    };
    let mut snapshot: Vec<Vec<f64>> = Vec::new();
    model.visit(&mut |_, t| snapshot.push(t.values().to_vec()));

    let mut max_rel_err = 0.0f64;
    let mut components = 0usize;
    let mut record = |analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs());
        max_rel_err = max_rel_err.max(err);
        components += 1;
    };

    for (pi, (orig, grads)) in snapshot.iter().zip(&param_grads).enumerate() {
        for (j, &v) in orig.iter().enumerate() {
            set_param(&mut model, pi, j, v + DEFAULT_STEP);
            let up = eval(&mut model, &x_t, &x_r)?;
            set_param(&mut model, pi, j, v - DEFAULT_STEP);
            let down = eval(&mut model, &x_t, &x_r)?;
            set_param(&mut model, pi, j, v);
            record(grads[j], (up - down) / (2.0 * DEFAULT_STEP));
        }
    }
    for (gi, grads) in input_grads.iter().enumerate() {
        for j in 0..grads.len() {
            let input = if gi == 0 { &mut x_t } else { &mut x_r };
            let v = input.values()[j];
            input.values_mut()[j] = v + DEFAULT_STEP;
            let up = eval(&mut model, &x_t, &x_r)?;
            let input = if gi == 0 { &mut x_t } else { &mut x_r };
            input.values_mut()[j] = v - DEFAULT_STEP;
            let down = eval(&mut model, &x_t, &x_r)?;
            let input = if gi == 0 { &mut x_t } else { &mut x_r };
            input.values_mut()[j] = v;
            record(grads[j], (up - down) / (2.0 * DEFAULT_STEP));
        }
    }

    Ok(CheckReport {
        name: format!("model-{:?}", config.fusion_variant).to_lowercase(),
        max_rel_err,
        components,
        passed: max_rel_err < DEFAULT_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_finite_differences() {
        for report in primitive_checks(2024).unwrap() {
            assert!(report.passed, "{}", report.line());
        }
    }

    #[test]
    fn composed_toy_network_matches_finite_differences() {
        // Smaller than the toy_check_config sweep so the suite stays quick;
        // the full 16x16 run is exercised by the acceptance tests.
        let config = Config {
            input_size: 8,
            blocks: vec![(1, 3), (1, 4)],
            head_channels: 3,
            fusion_variant: FusionVariant::Hyper,
            seed: 11,
            ..Config::default()
        };
        let report = model_check(&config).unwrap();
        assert!(report.passed, "{}", report.line());
        assert!(report.components > 1000, "sweep covered {}", report.components);
    }

    #[test]
    fn quadratic_has_tiny_fd_error_and_broken_gradient_is_caught() {
        let mut rng = crate::rng::seeded(5);
        let leaves = vec![random_tensor(&[4], &mut rng)];
        let ok = check_gradients("quadratic", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(ok.passed);

        // A deliberately wrong graph-vs-check pairing: the loss the checker
        // differentiates is scaled differently from the analytic one it
        // would see if scale were mis-implemented. Simulate by comparing a
        // doubled loss's analytic gradient against the plain loss.
        let mut flip = false;
        let bad = check_gradients("broken", &leaves, DEFAULT_STEP, DEFAULT_TOL, &mut move |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            let factor = if flip { 1.0 } else { 2.0 };
            flip = true;
            let sc = tape.scale(sq, factor)?;
            tape.sum_all(sc)
        })
        .unwrap();
        assert!(!bad.passed, "checker must flag an inconsistent gradient");
    }
}
