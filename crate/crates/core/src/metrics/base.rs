//! Production implementations of the six base metrics. The brute-force
//! second implementations used to verify these live in the acceptance
//! test suite and follow the same pinned conventions (see the module
//! docs in `metrics`).

use super::{check_pair, MetricError};
use ndarray::Array2;

/// Mean absolute error.
pub fn mae(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(gt.iter()).map(|(&p, &g)| (p - g).abs()).sum::<f64>() / n)
}

/// Jaccard index after binarizing the prediction at 0.5.
pub fn iou(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    iou_at(pred, gt, 0.5)
}

pub fn iou_at(pred: &Array2<f64>, gt: &Array2<f64>, threshold: f64) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let pb = p >= threshold;
        let gb = g == 1.0;
        if pb && gb {
            inter += 1;
        }
        if pb || gb {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// F-measure with adaptive threshold `min(2 * mean(pred), 1)`.
pub fn f_beta(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    f_beta_with(pred, gt, 0.3)
}

pub fn f_beta_with(pred: &Array2<f64>, gt: &Array2<f64>, beta_sq: f64) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let thr = (2.0 * pred.iter().sum::<f64>() / n).min(1.0);
    if thr == 0.0 {
        // all-zero prediction: pinned to score 0 rather than letting a
        // zero threshold binarize everything to positive
        return Ok(0.0);
    }
    let mut tp = 0.0;
    let mut pred_pos = 0.0;
    let mut gt_pos = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let pb = if p >= thr { 1.0 } else { 0.0 };
        tp += pb * g;
        pred_pos += pb;
        gt_pos += g;
    }
    if pred_pos == 0.0 || gt_pos == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / pred_pos;
    let recall = tp / gt_pos;
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        Ok(0.0)
    } else {
        Ok((1.0 + beta_sq) * precision * recall / den)
    }
}

/// Exact nearest-foreground transform. For every background pixel
/// returns the Euclidean distance to the nearest foreground pixel and
/// that pixel's index; ties break toward the smallest (row, col).
/// Expanding-ring search: exact and fast for compact masks.
fn nearest_foreground(gt: &Array2<f64>) -> (Vec<f64>, Vec<(usize, usize)>) {
    let (h, w) = gt.dim();
    let mut dist = vec![0.0f64; h * w];
    let mut idx = vec![(0usize, 0usize); h * w];
    let max_r = h.max(w);
    for y in 0..h {
        for x in 0..w {
            if gt[(y, x)] == 1.0 {
                idx[y * w + x] = (y, x);
                continue;
            }
            let mut best: Option<(i64, usize, usize)> = None;
            let mut r = 1usize;
            loop {
                if let Some((bd2, _, _)) = best {
                    if (r as i64) * (r as i64) > bd2 {
                        break;
                    }
                } else if r > max_r {
                    break;
                }
                // ring at Chebyshev radius r, scanned top row, middle
                // rows (left/right), bottom row — row-major within the ring
                let y0 = y as i64 - r as i64;
                let y1 = y as i64 + r as i64;
                let x0 = x as i64 - r as i64;
                let x1 = x as i64 + r as i64;
                let visit = |py: i64, px: i64, best: &mut Option<(i64, usize, usize)>| {
                    if py < 0 || px < 0 || py >= h as i64 || px >= w as i64 {
                        return;
                    }
                    let (py, px) = (py as usize, px as usize);
                    if gt[(py, px)] != 1.0 {
                        return;
                    }
                    let dy = py as i64 - y as i64;
                    let dx = px as i64 - x as i64;
                    let d2 = dy * dy + dx * dx;
                    let cand = (d2, py, px);
                    if best.map_or(true, |b| cand < b) {
                        *best = Some(cand);
                    }
                };
                for px in x0..=x1 {
                    visit(y0, px, &mut best);
                }
                for py in (y0 + 1)..y1 {
                    visit(py, x0, &mut best);
                    visit(py, x1, &mut best);
                }
                for px in x0..=x1 {
                    visit(y1, px, &mut best);
                }
                r += 1;
                if r > 2 * max_r {
                    break;
                }
            }
            if let Some((d2, by, bx)) = best {
                dist[y * w + x] = (d2 as f64).sqrt();
                idx[y * w + x] = (by, bx);
            }
        }
    }
    (dist, idx)
}

fn gaussian_7x7_sigma5() -> [f64; 49] {
    let sigma = 5.0f64;
    let mut k = [0.0f64; 49];
    let mut sum = 0.0;
    for y in 0..7 {
        for x in 0..7 {
            let dy = y as f64 - 3.0;
            let dx = x as f64 - 3.0;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            k[y * 7 + x] = v;
            sum += v;
        }
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Dependency-weighted F-measure: errors inside the object are diffused
/// by a Gaussian, background errors are attenuated by a distance decay,
/// then precision/recall combine with beta^2 = 1.
pub fn f_beta_weighted(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let gt_sum: f64 = gt.iter().sum();
    if gt_sum == 0.0 {
        // pinned convention: empty gt scores 1 against an empty
        // prediction and 0 otherwise
        return Ok(if pred.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 });
    }

    let (dist, idx) = nearest_foreground(gt);
    let e: Vec<f64> = pred.iter().zip(gt.iter()).map(|(&p, &g)| (p - g).abs()).collect();
    let mut et = e.clone();
    for y in 0..h {
        for x in 0..w {
            if gt[(y, x)] == 0.0 {
                let (ny, nx) = idx[y * w + x];
                et[y * w + x] = e[ny * w + nx];
            }
        }
    }
    // zero-padded Gaussian diffusion
    let kern = gaussian_7x7_sigma5();
    let mut ea = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..7 {
                let py = y as i64 + ky as i64 - 3;
                if py < 0 || py >= h as i64 {
                    continue;
                }
                for kx in 0..7 {
                    let px = x as i64 + kx as i64 - 3;
                    if px < 0 || px >= w as i64 {
                        continue;
                    }
                    acc += kern[ky * 7 + kx] * et[py as usize * w + px as usize];
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let ln_half_over5 = 0.5f64.ln() / 5.0;
    let mut ew_fg_sum = 0.0;
    let mut ew_bg_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gt[(y, x)] == 1.0 {
                let min_e_ea = if ea[i] < e[i] { ea[i] } else { e[i] };
                ew_fg_sum += min_e_ea; // B = 1 on the foreground
            } else {
                let b = 2.0 - (ln_half_over5 * dist[i]).exp();
                ew_bg_sum += e[i] * b;
            }
        }
    }
    let eps = f64::EPSILON;
    let tpw = (gt_sum - ew_fg_sum).max(0.0);
    let fpw = ew_bg_sum;
    let precision = tpw / (eps + tpw + fpw);
    let recall = tpw / (eps + gt_sum);
    Ok(2.0 * precision * recall / (eps + precision + recall))
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + f64::EPSILON)
}

struct Block {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

fn region_score(pred: &Array2<f64>, gt: &Array2<f64>, b: &Block) -> f64 {
    let n = (b.y1 - b.y0) * (b.x1 - b.x0);
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let mut xm = 0.0;
    let mut ym = 0.0;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            xm += pred[(y, x)];
            ym += gt[(y, x)];
        }
    }
    xm /= nf;
    ym /= nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let dx = pred[(y, x)] - xm;
            let dy = gt[(y, x)] - ym;
            sx += dx * dx;
            sy += dy * dy;
            sxy += dx * dy;
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    sx /= denom;
    sy /= denom;
    sxy /= denom;
    let alpha = 4.0 * xm * ym * sxy;
    let beta = (xm * xm + ym * ym) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure: alpha-blend of an object-aware and a region-aware
/// similarity, with mean-based fallbacks for degenerate ground truths.
pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    s_measure_with(pred, gt, 0.5)
}

pub fn s_measure_with(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    alpha: f64,
) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let y_mean = gt.iter().sum::<f64>() / n;
    if y_mean == 0.0 {
        return Ok(1.0 - pred.iter().sum::<f64>() / n);
    }
    if y_mean == 1.0 {
        return Ok(pred.iter().sum::<f64>() / n);
    }

    // object-aware term
    let fg = pred.iter().zip(gt.iter()).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p);
    let bg = pred.iter().zip(gt.iter()).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p);
    let s_o = y_mean * object_score(fg) + (1.0 - y_mean) * object_score(bg);

    // region-aware term around the foreground centroid
    let mass: f64 = gt.iter().sum();
    let mut cy = 0.0;
    let mut cx = 0.0;
    for yy in 0..h {
        for xx in 0..w {
            if gt[(yy, xx)] == 1.0 {
                cy += yy as f64;
                cx += xx as f64;
            }
        }
    }
    let cy = (cy / mass).round() as usize;
    let cx = (cx / mass).round() as usize;
    let split_y = (cy + 1).min(h);
    let split_x = (cx + 1).min(w);
    let blocks = [
        Block { y0: 0, y1: split_y, x0: 0, x1: split_x },
        Block { y0: 0, y1: split_y, x0: split_x, x1: w },
        Block { y0: split_y, y1: h, x0: 0, x1: split_x },
        Block { y0: split_y, y1: h, x0: split_x, x1: w },
    ];
    let mut s_r = 0.0;
    for b in &blocks {
        let weight = ((b.y1 - b.y0) * (b.x1 - b.x0)) as f64 / n;
        s_r += weight * region_score(pred, gt, b);
    }

    Ok((alpha * s_o + (1.0 - alpha) * s_r).clamp(0.0, 1.0))
}

/// Enhanced-alignment measure over the adaptively binarized prediction.
pub fn e_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let thr = (2.0 * pred.iter().sum::<f64>() / n).min(1.0);
    let bin: Vec<f64> = pred.iter().map(|&p| if p >= thr { 1.0 } else { 0.0 }).collect();
    let gt_sum: f64 = gt.iter().sum();
    let enhanced_sum: f64 = if gt_sum == 0.0 {
        bin.iter().map(|&b| 1.0 - b).sum()
    } else if gt_sum == n {
        bin.iter().sum()
    } else {
        let gt_mean = gt_sum / n;
        let bin_mean = bin.iter().sum::<f64>() / n;
        bin.iter()
            .zip(gt.iter())
            .map(|(&b, &g)| {
                let fm_c = b - bin_mean;
                let gt_c = g - gt_mean;
                let align = 2.0 * gt_c * fm_c / (gt_c * gt_c + fm_c * fm_c + f64::EPSILON);
                (align + 1.0) * (align + 1.0) / 4.0
            })
            .sum()
    };
    Ok(enhanced_sum / n)
}
