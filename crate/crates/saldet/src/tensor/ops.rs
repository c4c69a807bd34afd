//! Raw forward/backward kernels over flat `f64` slices.
//!
//! These are the hot loops. They stay free of allocation and walk rows
//! contiguously so the autovectorizer can do its job; the tape layer owns
//! all shape validation before calling in here.

/// Valid output positions `t` in `[0, len)` such that `t + d` also lands in
/// `[0, len)`. Returns an empty range when the shift pushes everything out.
#[inline]
fn shift_range(len: usize, d: isize) -> (usize, usize) {
    if d >= len as isize || -d >= len as isize {
        return (0, 0);
    }
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len - d as usize } else { len };
    (lo, hi)
}

/// Same-padding stride-1 correlation. `inp` is N*Ci*H*W, `ker` is Co*Ci*K*K
/// (K odd), `out` is N*Co*H*W and is overwritten.
pub(crate) fn conv2d_forward(
    inp: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    co: usize,
    k: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for b in 0..n {
        for o in 0..co {
            let ob = (b * co + o) * hw;
            let fill = bias.map_or(0.0, |bv| bv[o]);
            out[ob..ob + hw].fill(fill);
            for i in 0..ci {
                let ib = (b * ci + i) * hw;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shift_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = shift_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wgt = ker[((o * ci + i) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let src = &inp[ib + iy * w + sx..ib + iy * w + sx + (x1 - x0)];
                            let dst = &mut out[ob + y * w + x0..ob + y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(input) for `conv2d_forward`.
pub(crate) fn conv2d_backward_input(
    d_out: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    co: usize,
    k: usize,
    d_inp: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for b in 0..n {
        for o in 0..co {
            let ob = (b * co + o) * hw;
            for i in 0..ci {
                let ib = (b * ci + i) * hw;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shift_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = shift_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let wgt = ker[((o * ci + i) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let src = &d_out[ob + y * w + x0..ob + y * w + x1];
                            let dst = &mut d_inp[ib + iy * w + sx..ib + iy * w + sx + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(kernel) and, when present, d(loss)/d(bias).
pub(crate) fn conv2d_backward_kernel(
    d_out: &[f64],
    inp: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    d_ker: &mut [f64],
    mut d_bias: Option<&mut [f64]>,
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for b in 0..n {
        for o in 0..co {
            let ob = (b * co + o) * hw;
            if let Some(db) = d_bias.as_deref_mut() {
                let mut acc = 0.0;
                for v in &d_out[ob..ob + hw] {
                    acc += v;
                }
                db[o] += acc;
            }
            for i in 0..ci {
                let ib = (b * ci + i) * hw;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shift_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = shift_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let sx = (x0 as isize + dx) as usize;
                            let a = &d_out[ob + y * w + x0..ob + y * w + x1];
                            let s = &inp[ib + iy * w + sx..ib + iy * w + sx + (x1 - x0)];
                            for (da, ds) in a.iter().zip(s) {
                                acc += da * ds;
                            }
                        }
                        d_ker[((o * ci + i) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) const UP_K: usize = 4;

/// Transposed convolution, stride 2, 4x4 kernel, padding 1: exact 2x
/// upsampling. `inp` is N*Ci*h*w, `ker` is Ci*Co*4*4, `out` is N*Co*2h*2w
/// and is overwritten. Index map: out[2y+ky-1, 2x+kx-1] += in[y, x] * k.
pub(crate) fn upsample2x_forward(
    inp: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    co: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let ohw = oh * ow;
    let hw = h * w;
    out[..n * co * ohw].fill(0.0);
    for b in 0..n {
        for a in 0..ci {
            let ib = (b * ci + a) * hw;
            for c in 0..co {
                let ob = (b * co + c) * ohw;
                for ky in 0..UP_K {
                    for kx in 0..UP_K {
                        let wgt = ker[((a * co + c) * UP_K + ky) * UP_K + kx];
                        for y in 0..h {
                            let oy = 2 * y + ky;
                            if oy < 1 || oy > oh {
                                continue;
                            }
                            let orow = ob + (oy - 1) * ow;
                            let irow = ib + y * w;
                            for x in 0..w {
                                let ox = 2 * x + kx;
                                if ox < 1 || ox > ow {
                                    continue;
                                }
                                out[orow + ox - 1] += wgt * inp[irow + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(input) for `upsample2x_forward`; this is the
/// matching stride-2 gather.
pub(crate) fn upsample2x_backward_input(
    d_out: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    ker: &[f64],
    co: usize,
    d_inp: &mut [f64],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let ohw = oh * ow;
    let hw = h * w;
    for b in 0..n {
        for a in 0..ci {
            let ib = (b * ci + a) * hw;
            for c in 0..co {
                let ob = (b * co + c) * ohw;
                for ky in 0..UP_K {
                    for kx in 0..UP_K {
                        let wgt = ker[((a * co + c) * UP_K + ky) * UP_K + kx];
                        for y in 0..h {
                            let oy = 2 * y + ky;
                            if oy < 1 || oy > oh {
                                continue;
                            }
                            let orow = ob + (oy - 1) * ow;
                            let irow = ib + y * w;
                            for x in 0..w {
                                let ox = 2 * x + kx;
                                if ox < 1 || ox > ow {
                                    continue;
                                }
                                d_inp[irow + x] += wgt * d_out[orow + ox - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(kernel) for `upsample2x_forward`.
pub(crate) fn upsample2x_backward_kernel(
    d_out: &[f64],
    inp: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    d_ker: &mut [f64],
) {
    let (oh, ow) = (2 * h, 2 * w);
    let ohw = oh * ow;
    let hw = h * w;
    for b in 0..n {
        for a in 0..ci {
            let ib = (b * ci + a) * hw;
            for c in 0..co {
                let ob = (b * co + c) * ohw;
                for ky in 0..UP_K {
                    for kx in 0..UP_K {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let oy = 2 * y + ky;
                            if oy < 1 || oy > oh {
                                continue;
                            }
                            let orow = ob + (oy - 1) * ow;
                            let irow = ib + y * w;
                            for x in 0..w {
                                let ox = 2 * x + kx;
                                if ox < 1 || ox > ow {
                                    continue;
                                }
                                acc += inp[irow + x] * d_out[orow + ox - 1];
                            }
                        }
                        d_ker[((a * co + c) * UP_K + ky) * UP_K + kx] += acc;
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over even H and W. Ties go to the first
/// occurrence in row-major window order. Fills `out` (N*C*H/2*W/2) and
/// `argmax` with flat input indices per output element.
pub(crate) fn maxpool2d_forward(
    inp: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    let hw = h * w;
    let ohw = oh * ow;
    for b in 0..n {
        for ch in 0..c {
            let ib = (b * c + ch) * hw;
            let ob = (b * c + ch) * ohw;
            for y in 0..oh {
                for x in 0..ow {
                    let i00 = ib + (2 * y) * w + 2 * x;
                    let mut best = i00;
                    let mut val = inp[i00];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = ib + (2 * y + dy) * w + 2 * x + dx;
                        if inp[idx] > val {
                            val = inp[idx];
                            best = idx;
                        }
                    }
                    out[ob + y * ow + x] = val;
                    argmax[ob + y * ow + x] = best as u32;
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over the N and spatial axes.
pub(crate) fn channel_stats(vals: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let mut acc = 0.0;
            for v in &vals[base..base + hw] {
                acc += v;
            }
            mean[ch] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let mu = mean[ch];
            let mut acc = 0.0;
            for v in &vals[base..base + hw] {
                let d = v - mu;
                acc += d * d;
            }
            var[ch] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}
