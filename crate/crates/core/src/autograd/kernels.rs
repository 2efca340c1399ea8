//! Flat-slice numeric kernels shared by forward ops and their adjoints.
//!
//! All kernels accumulate into `out` so the backward pass can reuse them
//! for gradient accumulation. Loop orders are fixed; results are
//! bit-reproducible across runs.

/// out[m x n] += a[m x k] * b[k x n]
pub fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T   (b stored row-major as n x k)
pub fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
pub fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulation chains.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        s[0] += xa[0] * xb[0];
        s[1] += xa[1] * xb[1];
        s[2] += xa[2] * xb[2];
        s[3] += xa[3] * xb[3];
    }
    let mut tail = 0.0;
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += xa * xb;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Row-wise softmax in place over an m x n buffer.
pub fn softmax_rows_inplace(x: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(x.len(), m * n);
    for i in 0..m {
        let row = &mut x[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Per-output-index resampling taps: starting source index plus
/// normalized weights over consecutive source samples.
///
/// Upscaling (or same size) uses classic two-tap bilinear interpolation
/// with half-pixel centers and edge clamping. Downscaling widens the
/// triangle filter to the scale factor (anti-aliased linear resampling),
/// so every source sample in the footprint contributes; a heavily
/// downscaled mask keeps its mass instead of being point-sampled.
pub fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            if dst >= src {
                let clamped = center.max(0.0);
                let i0 = (clamped.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let w1 = (clamped - i0 as f64).clamp(0.0, 1.0);
                if i1 == i0 {
                    (i0, vec![1.0])
                } else {
                    (i0, vec![1.0 - w1, w1])
                }
            } else {
                let radius = scale;
                let lo = ((center - radius).ceil() as isize).max(0) as usize;
                let hi = ((center + radius).floor() as isize).min(src as isize - 1) as usize;
                let mut weights: Vec<f64> = (lo..=hi)
                    .map(|t| (1.0 - (t as f64 - center).abs() / scale).max(0.0))
                    .collect();
                let sum: f64 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= sum;
                }
                (lo, weights)
            }
        })
        .collect()
}

/// Bilinear resize of a single H x W plane into `out` (overwrites).
pub fn bilinear_resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(out.len(), oh * ow);
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    for (oy, (y0, wys)) in ys.iter().enumerate() {
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        for (ox, (x0, wxs)) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for (dy, &wy) in wys.iter().enumerate() {
                let row = &src[(y0 + dy) * w..(y0 + dy + 1) * w];
                for (dx, &wx) in wxs.iter().enumerate() {
                    acc += wy * wx * row[x0 + dx];
                }
            }
            orow[ox] = acc;
        }
    }
}

/// conv2d forward for one zero-padded plane stack:
/// x: ci x h x w, wgt: co x ci x kh x kw, bias: co, out (overwritten): co x oh x ow.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_plane(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(out.len(), co * oh * ow);
    for c_out in 0..co {
        let wbase = c_out * ci * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[c_out];
                for c_in in 0..ci {
                    let xbase = c_in * h * w;
                    let kbase = wbase + c_in * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wgt[krow + kx] * x[xrow + ix as usize];
                        }
                    }
                }
                out[c_out * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
}
