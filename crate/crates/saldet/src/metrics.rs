//! Saliency evaluation: PR curves, F-measure, MAE, and the structural
//! similarity score.
//!
//! Maps hold reals in [0,1]; masks are strictly binary. Thresholded
//! metrics quantize maps to 8 bits and sweep all 256 thresholds with a
//! strict `level > t` prediction rule, so a perfect binary map scores
//! precision = recall = 1 everywhere below the top level. An empty
//! prediction has precision 1 by convention.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::TensorError;

pub const PR_THRESHOLDS: usize = 256;
/// Eta-squared weighting of precision in the F-measure.
pub const DEFAULT_ETA2: f64 = 0.3;
/// Mix between object and region structural scores.
pub const DEFAULT_LAMBDA: f64 = 0.5;

const EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != height * width {
            return Err(TensorError::LengthMismatch { dims: vec![height, width], len: values.len() });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::unsupported("saliency map", "value outside [0,1]"));
        }
        Ok(SaliencyMap { height, width, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != height * width {
            return Err(TensorError::LengthMismatch { dims: vec![height, width], len: values.len() });
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(TensorError::unsupported("ground truth", "non-binary value"));
        }
        Ok(GroundTruthMask { height, width, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|v| **v == 1.0).count()
    }
}

fn check_dims(map: &SaliencyMap, gt: &GroundTruthMask) -> Result<(), TensorError> {
    if map.dims() != gt.dims() {
        return Err(TensorError::shape(
            "metrics",
            format!("{:?}", gt.dims()),
            format!("{:?}", map.dims()),
        ));
    }
    Ok(())
}

/// 8-bit quantization level used by every thresholded metric.
pub fn quantize8(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

// ── Precision/recall sweep ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// One point per threshold t = 0..=255; a pixel is predicted foreground
/// when its quantized level exceeds t.
pub fn pr_curve(map: &SaliencyMap, gt: &GroundTruthMask) -> Result<Vec<PrPoint>, TensorError> {
    check_dims(map, gt)?;
    let pos_total = gt.foreground();
    if pos_total == 0 {
        return Err(TensorError::unsupported("pr_curve", "mask has no foreground"));
    }
    // Histogram per level, then suffix sums: TP(t) counts positives with
    // level > t, FP(t) the same over negatives.
    let mut pos_at = [0u64; PR_THRESHOLDS];
    let mut neg_at = [0u64; PR_THRESHOLDS];
    for (v, g) in map.values.iter().zip(&gt.values) {
        let q = quantize8(*v) as usize;
        if *g == 1.0 {
            pos_at[q] += 1;
        } else {
            neg_at[q] += 1;
        }
    }
    let mut points = Vec::with_capacity(PR_THRESHOLDS);
    let mut tp = 0u64;
    let mut fp = 0u64;
    // Threshold 255 predicts nothing; walk t downward accumulating the
    // levels above it, then reverse into ascending order.
    for t in (0..PR_THRESHOLDS).rev() {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / pos_total as f64;
        points.push(PrPoint { precision, recall });
        tp += pos_at[t];
        fp += neg_at[t];
    }
    points.reverse();
    Ok(points)
}

/// Weighted harmonic mean (1+eta2)PR/(eta2*P + R); 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64, eta2: f64) -> f64 {
    let denom = eta2 * precision + recall;
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + eta2) * precision * recall / denom
}

/// F at the adaptive threshold: twice the map's mean, capped at 1; the
/// prediction is `value >= threshold`.
pub fn adaptive_f(map: &SaliencyMap, gt: &GroundTruthMask, eta2: f64) -> Result<f64, TensorError> {
    check_dims(map, gt)?;
    let tau = (2.0 * map.mean()).min(1.0);
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fng = 0u64;
    for (v, g) in map.values.iter().zip(&gt.values) {
        let predicted = *v >= tau;
        match (predicted, *g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fng += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fng == 0 { 0.0 } else { tp as f64 / (tp + fng) as f64 };
    Ok(f_measure(precision, recall, eta2))
}

/// Best F over a PR sweep.
pub fn max_f(curve: &[PrPoint], eta2: f64) -> f64 {
    curve.iter().map(|p| f_measure(p.precision, p.recall, eta2)).fold(0.0, f64::max)
}

/// Mean absolute error, bounded in [0,1].
pub fn mae(map: &SaliencyMap, gt: &GroundTruthMask) -> Result<f64, TensorError> {
    check_dims(map, gt)?;
    let sum: f64 = map.values.iter().zip(&gt.values).map(|(s, g)| (s - g).abs()).sum();
    Ok(sum / map.values.len() as f64)
}

// ── Structural similarity ───────────────────────────────────────────────

/// lambda*S_object + (1-lambda)*S_region, clamped to [0,1]. Degenerate
/// masks short-circuit: an empty mask scores 1 - mean(map), a full mask
/// scores mean(map).
pub fn s_measure(map: &SaliencyMap, gt: &GroundTruthMask, lambda: f64) -> Result<f64, TensorError> {
    check_dims(map, gt)?;
    let n = gt.values.len() as f64;
    let mu = gt.values.iter().sum::<f64>() / n;
    let q = if mu == 0.0 {
        1.0 - map.mean()
    } else if mu == 1.0 {
        map.mean()
    } else {
        lambda * s_object(map, gt) + (1.0 - lambda) * s_region(map, gt)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Similarity of one object region: 2x / (x^2 + 1 + sigma), with x the
/// region mean and sigma the sample standard deviation of the map there.
fn object_score(pred: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let mut count = 0usize;
    let mut sum = 0.0;
    for (i, v) in pred.iter().enumerate() {
        if keep(i) {
            count += 1;
            sum += v;
        }
    }
    if count == 0 {
        return 0.0;
    }
    let x = sum / count as f64;
    let mut ssd = 0.0;
    for (i, v) in pred.iter().enumerate() {
        if keep(i) {
            ssd += (v - x) * (v - x);
        }
    }
    let sigma = if count > 1 { (ssd / (count - 1) as f64).sqrt() } else { 0.0 };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(map: &SaliencyMap, gt: &GroundTruthMask) -> f64 {
    let g = &gt.values;
    let fg = object_score(&map.values, |i| g[i] == 1.0);
    let inverted: Vec<f64> = map.values.iter().map(|v| 1.0 - v).collect();
    let bg = object_score(&inverted, |i| g[i] == 0.0);
    let mu = g.iter().sum::<f64>() / g.len() as f64;
    mu * fg + (1.0 - mu) * bg
}

/// Split position derived from the foreground centroid: the cut snaps to
/// the pixel boundary nearest the exact centroid, so mirroring the mask
/// mirrors the cut (left + mirrored-left == w away from integer
/// centroids). Returns (columns left of the cut, rows above the cut).
fn centroid_cut(gt: &GroundTruthMask) -> (usize, usize) {
    let (h, w) = gt.dims();
    let mut total = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = gt.values[y * w + x];
            total += v;
            sx += v * (x + 1) as f64;
            sy += v * (y + 1) as f64;
        }
    }
    ((sx / total - 0.5).round() as usize, (sy / total - 0.5).round() as usize)
}

/// The four quadrants about (cx, cy): column counts (cx, w-cx), row
/// counts (cy, h-cy), each possibly zero.
fn quadrants(h: usize, w: usize, cx: usize, cy: usize) -> [(usize, usize, usize, usize); 4] {
    [
        (0, cy, 0, cx),   // top-left: rows 0..cy, cols 0..cx
        (0, cy, cx, w),   // top-right
        (cy, h, 0, cx),   // bottom-left
        (cy, h, cx, w),   // bottom-right
    ]
}

/// SSIM-style similarity of one region: 4*x*y*cov over
/// (x^2+y^2)(var_p+var_g), with the variance convention n-1 and the
/// reference's exact-zero special cases.
fn region_similarity(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let var_p = pred.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / denom;
    let var_g = gt.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / denom;
    let cov = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * cov;
    let beta = (x * x + y * y) * (var_p + var_g);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(map: &SaliencyMap, gt: &GroundTruthMask) -> f64 {
    let (h, w) = gt.dims();
    let (cx, cy) = centroid_cut(gt);
    let total = (h * w) as f64;
    let mut q = 0.0;
    for (y0, y1, x0, x1) in quadrants(h, w, cx, cy) {
        let area = (y1 - y0) * (x1 - x0);
        if area == 0 {
            continue;
        }
        let mut p_vals = Vec::with_capacity(area);
        let mut g_vals = Vec::with_capacity(area);
        for y in y0..y1 {
            for x in x0..x1 {
                p_vals.push(map.values[y * w + x]);
                g_vals.push(gt.values[y * w + x]);
            }
        }
        let weight = area as f64 / total;
        q += weight * region_similarity(&p_vals, &g_vals);
    }
    q
}

// ── Dataset evaluation ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ImageEval {
    pub name: String,
    pub f_eta: f64,
    pub f_max: f64,
    pub mae: f64,
    pub s_lambda: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    /// Column means over every image, named "MEAN" in the CSV.
    pub mean: ImageEval,
    /// Precision and recall averaged across images per threshold.
    pub pr_mean: Vec<PrPoint>,
}

/// Evaluates named (map, mask) pairs and aggregates the dataset means.
pub fn evaluate_dataset(
    pairs: &[(String, SaliencyMap, GroundTruthMask)],
    eta2: f64,
    lambda: f64,
) -> Result<EvalReport, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::unsupported("evaluate_dataset", "no images"));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let mut pr_sum = vec![PrPoint { precision: 0.0, recall: 0.0 }; PR_THRESHOLDS];
    for (name, map, gt) in pairs {
        let curve = pr_curve(map, gt)?;
        for (acc, p) in pr_sum.iter_mut().zip(&curve) {
            acc.precision += p.precision;
            acc.recall += p.recall;
        }
        per_image.push(ImageEval {
            name: name.clone(),
            f_eta: adaptive_f(map, gt, eta2)?,
            f_max: max_f(&curve, eta2),
            mae: mae(map, gt)?,
            s_lambda: s_measure(map, gt, lambda)?,
        });
    }
    let n = pairs.len() as f64;
    let mean = ImageEval {
        name: "MEAN".into(),
        f_eta: per_image.iter().map(|e| e.f_eta).sum::<f64>() / n,
        f_max: per_image.iter().map(|e| e.f_max).sum::<f64>() / n,
        mae: per_image.iter().map(|e| e.mae).sum::<f64>() / n,
        s_lambda: per_image.iter().map(|e| e.s_lambda).sum::<f64>() / n,
    };
    let pr_mean = pr_sum
        .into_iter()
        .map(|p| PrPoint { precision: p.precision / n, recall: p.recall / n })
        .collect();
    Ok(EvalReport { per_image, mean, pr_mean })
}

/// report.csv: one row per image plus a trailing MEAN row. Floats print
/// in round-trip form so downstream comparisons can be exact.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("image,f_eta,f_max,mae,s_lambda\n");
    for row in report.per_image.iter().chain(std::iter::once(&report.mean)) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.name, row.f_eta, row.f_max, row.mae, row.s_lambda
        );
    }
    out
}

/// pr_curve.csv over the dataset-mean sweep.
pub fn pr_csv(report: &EvalReport) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for (t, p) in report.pr_mean.iter().enumerate() {
        let _ = writeln!(out, "{t},{},{}", p.precision, p.recall);
    }
    out
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, report_csv(report))
}

pub fn write_pr_csv(report: &EvalReport, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, pr_csv(report))
}
