//! Reflective image-pair separation.
//!
//! An input image X is split into a transmitted layer X_T = X - E and a
//! reflected layer X_R = -k (X - E), where E is the per-channel mean of the
//! training set. The two layers carry the same content with opposite sign
//! and (for k != 1) different magnitude, which is what lets the two-branch
//! encoder treat them as distinct domains.
//!
//! Exactness matters here: `recombine(separate(x)) == x` must hold bit for
//! bit. Pixels are loaded on a 2^-8 grid (see the image module) and the
//! dataset mean is snapped to a 2^-12 grid, so the subtraction below is
//! exact IEEE arithmetic with no rounding anywhere.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Mean values are snapped to multiples of 1/MEAN_GRID so that x - mean is
/// exact for every representable pixel value.
pub const MEAN_GRID: f64 = 4096.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SepParams {
    /// Reflection gain; the reflected layer is -k times the transmitted one.
    pub k: f64,
    /// Per-channel dataset mean, snapped to the exactness grid.
    pub mean: [f64; 3],
}

impl SepParams {
    pub fn new(k: f64, mean: [f64; 3]) -> Self {
        SepParams { k, mean: [snap(mean[0]), snap(mean[1]), snap(mean[2])] }
    }
}

fn snap(v: f64) -> f64 {
    (v * MEAN_GRID).round() / MEAN_GRID
}

/// The two layers produced by separation. Both share the input's [3, H, W]
/// shape.
#[derive(Debug, Clone)]
pub struct ReflectivePair {
    pub transmitted: Tensor,
    pub reflected: Tensor,
}

/// Splits a [3, H, W] image into its transmitted and reflected layers.
pub fn separate(image: &Tensor, params: &SepParams) -> Result<ReflectivePair, TensorError> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(TensorError::shape("separate", "[3, H, W] image", format!("{dims:?}")));
    }
    let plane = dims[1] * dims[2];
    let mut t = vec![0.0; image.len()];
    let mut r = vec![0.0; image.len()];
    for c in 0..3 {
        let m = params.mean[c];
        for p in 0..plane {
            let idx = c * plane + p;
            let tv = image.values()[idx] - m;
            t[idx] = tv;
            r[idx] = -params.k * tv;
        }
    }
    Ok(ReflectivePair {
        transmitted: Tensor::from_vec(dims.to_vec(), t).expect("dims preserved"),
        reflected: Tensor::from_vec(dims.to_vec(), r).expect("dims preserved"),
    })
}

/// Reconstructs the input image from its transmitted layer.
pub fn recombine(transmitted: &Tensor, params: &SepParams) -> Result<Tensor, TensorError> {
    let dims = transmitted.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(TensorError::shape("recombine", "[3, H, W] layer", format!("{dims:?}")));
    }
    let plane = dims[1] * dims[2];
    let mut out = vec![0.0; transmitted.len()];
    for c in 0..3 {
        let m = params.mean[c];
        for p in 0..plane {
            let idx = c * plane + p;
            out[idx] = transmitted.values()[idx] + m;
        }
    }
    Ok(Tensor::from_vec(dims.to_vec(), out).expect("dims preserved"))
}

/// Per-channel mean over a set of [3, H, W] images, computed in one
/// streaming pass and snapped to the exactness grid.
pub fn dataset_mean<'a>(
    images: impl IntoIterator<Item = &'a Tensor>,
) -> Result<[f64; 3], TensorError> {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for image in images {
        let dims = image.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(TensorError::shape("dataset_mean", "[3, H, W] image", format!("{dims:?}")));
        }
        let plane = dims[1] * dims[2];
        for c in 0..3 {
            let mut acc = 0.0;
            for v in &image.values()[c * plane..(c + 1) * plane] {
                acc += v;
            }
            sums[c] += acc / plane as f64;
        }
        count += 1;
    }
    if count == 0 {
        return Err(TensorError::unsupported("dataset_mean", "empty image set"));
    }
    Ok([
        snap(sums[0] / count as f64),
        snap(sums[1] / count as f64),
        snap(sums[2] / count as f64),
    ])
}
