//! Multi-task training objective: weighted segmentation loss, dice edge
//! loss, and L1 + SSIM depth loss, summed over iterations and the
//! structure-enhancement stages. There is no classification term.

use crate::autograd::{Arr, Tape, Var};
use crate::decoder::{DecodeState, DecodeTrace};
use crate::util::resize_bilinear_2d;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability clipping for the cross-entropy terms.
const BCE_EPS: f64 = 1e-7;
/// Dice smoothing constant.
const DICE_EPS: f64 = 1.0;
/// SSIM stability constants on unit dynamic range.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Boundary-weight pooling window.
const WEIGHT_POOL: usize = 31;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("ground-truth mask must be binary (found {0})")]
    NonBinaryMask(f64),
    #[error("ground-truth depth must lie in [0, 1] (found {0})")]
    DepthOutOfRange(f64),
    #[error("missing {kind} map at stage {stage}, iteration {iteration}")]
    MissingAuxiliary { kind: &'static str, stage: usize, iteration: usize },
    #[error("missing depth ground truth but depth supervision is active")]
    MissingDepthGt,
    #[error("missing edge ground truth but edge supervision is active")]
    MissingEdgeGt,
    #[error("state list is empty")]
    NoStates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    /// Weighted BCE + weighted IoU with the boundary-emphasizing pixel
    /// weight (default).
    WbceWiou,
    /// Plain BCE + IoU.
    BceIou,
}

fn default_seg_kind() -> SegLossKind {
    SegLossKind::WbceWiou
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_seg_kind")]
    pub seg: SegLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { seg: default_seg_kind() }
    }
}

/// Per-term loss values for one optimization step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// One segmentation term per iteration.
    pub seg_terms: Vec<f64>,
    /// Edge terms: outer index iteration, inner per structure stage
    /// (ascending stage order).
    pub edge_terms: Vec<Vec<f64>>,
    /// Depth terms, same layout as edge terms.
    pub depth_terms: Vec<Vec<f64>>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term_count(&self) -> usize {
        self.seg_terms.len()
            + self.edge_terms.iter().map(Vec::len).sum::<usize>()
            + self.depth_terms.iter().map(Vec::len).sum::<usize>()
    }

    pub fn term_sum(&self) -> f64 {
        self.seg_terms.iter().sum::<f64>()
            + self.edge_terms.iter().flatten().sum::<f64>()
            + self.depth_terms.iter().flatten().sum::<f64>()
    }
}

/// Ground truth bundle for one sample at input resolution.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Binary segmentation mask.
    pub mask: Array2<f64>,
    /// Edge map (soft values allowed after resizing).
    pub edge: Option<Array2<f64>>,
    /// Depth in [0, 1].
    pub depth: Option<Array2<f64>>,
}

fn check_binary(gt: &Array2<f64>) -> Result<(), LossError> {
    for &v in gt.iter() {
        if v != 0.0 && v != 1.0 {
            return Err(LossError::NonBinaryMask(v));
        }
    }
    Ok(())
}

fn check_unit_range(gt: &Array2<f64>) -> Result<(), LossError> {
    for &v in gt.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::DepthOutOfRange(v));
        }
    }
    Ok(())
}

/// Boundary-emphasizing pixel weight: 1 + 5 * |meanpool_31(gt) - gt|.
/// The mean pool is zero-padded with a constant window divisor.
pub fn boundary_weight(gt: &Array2<f64>) -> Array2<f64> {
    let (h, w) = gt.dim();
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = gt[(y, x)] + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let r = (WEIGHT_POOL / 2) as isize;
    let area = (WEIGHT_POOL * WEIGHT_POOL) as f64;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = (y as isize - r).clamp(0, h as isize) as usize;
        let y1 = (y as isize + r + 1).clamp(0, h as isize) as usize;
        let x0 = (x as isize - r).clamp(0, w as isize) as usize;
        let x1 = (x as isize + r + 1).clamp(0, w as isize) as usize;
        let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
            + sat[y0 * (w + 1) + x0];
        1.0 + 5.0 * (sum / area - gt[(y, x)]).abs()
    })
}

fn arr2(a: &Array2<f64>) -> Arr {
    let (h, w) = a.dim();
    Arr::from_vec(&[h, w], a.iter().copied().collect())
}

/// Weighted BCE + weighted IoU over probabilities.
pub fn seg_loss_on_tape(
    tape: &Tape,
    pred_prob: Var,
    gt: &Array2<f64>,
    kind: SegLossKind,
) -> Var {
    let weight = match kind {
        SegLossKind::WbceWiou => boundary_weight(gt),
        SegLossKind::BceIou => Array2::from_elem(gt.dim(), 1.0),
    };
    let (h, w) = gt.dim();
    let p = tape.reshape(pred_prob, &[h, w]);
    let g = tape.input(arr2(gt));
    let wv = tape.input(arr2(&weight));

    let p_cl = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
    let one_minus_p = tape.affine(p_cl, -1.0, 1.0);
    let one_minus_g = tape.affine(g, -1.0, 1.0);
    let bce = tape.affine(
        tape.add(tape.mul(g, tape.ln(p_cl)), tape.mul(one_minus_g, tape.ln(one_minus_p))),
        -1.0,
        0.0,
    );
    let wsum = tape.sum_all(wv);
    let wbce = tape.div_by_scalar(tape.sum_all(tape.mul(bce, wv)), wsum);

    let pg = tape.mul(p, g);
    let inter = tape.sum_all(tape.mul(pg, wv));
    let union_map = tape.sub(tape.add(p, g), pg);
    let union = tape.sum_all(tape.mul(union_map, wv));
    let ratio = tape.div(tape.add_scalar(inter, 1.0), tape.add_scalar(union, 1.0));
    let wiou = tape.affine(ratio, -1.0, 1.0);

    tape.add(wbce, wiou)
}

/// Dice loss over logits: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
pub fn edge_loss_on_tape(tape: &Tape, logits: Var, gt: &Array2<f64>) -> Var {
    let (h, w) = gt.dim();
    let p = tape.sigmoid(tape.reshape(logits, &[h, w]));
    let g = tape.input(arr2(gt));
    let num = tape.add_scalar(tape.mul_scalar(tape.sum_all(tape.mul(p, g)), 2.0), DICE_EPS);
    let den = tape.add_scalar(tape.add(tape.sum_all(p), tape.sum_all(g)), DICE_EPS);
    tape.affine(tape.div(num, den), -1.0, 1.0)
}

/// 11x11 Gaussian with sigma 1.5, normalized to unit sum.
pub fn ssim_kernel() -> Arr {
    let sigma = 1.5f64;
    let k = 11usize;
    let c = (k / 2) as f64;
    let mut data = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            data.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = data.iter().sum();
    Arr::from_vec(&[k, k], data.iter().map(|v| v / s).collect())
}

/// L1 + (1 - SSIM) over sigmoided logits against a [0, 1] depth map.
/// The Gaussian window samples with edge replication so the SSIM map is
/// defined at every pixel, including tiny inputs.
pub fn depth_loss_on_tape(tape: &Tape, logits: Var, gt: &Array2<f64>) -> Var {
    let (h, w) = gt.dim();
    let p = tape.sigmoid(tape.reshape(logits, &[h, w]));
    let g = tape.input(arr2(gt));
    let l1 = tape.mean_all(tape.abs(tape.sub(p, g)));

    let kernel = ssim_kernel();
    let mu_x = tape.filter2d_replicate(p, &kernel);
    let mu_y = tape.filter2d_replicate(g, &kernel);
    let xx = tape.filter2d_replicate(tape.mul(p, p), &kernel);
    let yy = tape.filter2d_replicate(tape.mul(g, g), &kernel);
    let xy = tape.filter2d_replicate(tape.mul(p, g), &kernel);
    let var_x = tape.sub(xx, tape.mul(mu_x, mu_x));
    let var_y = tape.sub(yy, tape.mul(mu_y, mu_y));
    let cov = tape.sub(xy, tape.mul(mu_x, mu_y));

    let num = tape.mul(
        tape.add_scalar(tape.mul_scalar(tape.mul(mu_x, mu_y), 2.0), SSIM_C1),
        tape.add_scalar(tape.mul_scalar(cov, 2.0), SSIM_C2),
    );
    let den = tape.mul(
        tape.add_scalar(tape.add(tape.mul(mu_x, mu_x), tape.mul(mu_y, mu_y)), SSIM_C1),
        tape.add_scalar(tape.add(var_x, var_y), SSIM_C2),
    );
    let ssim = tape.mean_all(tape.div(num, den));
    tape.add(l1, tape.affine(ssim, -1.0, 1.0))
}

/// Traced loss terms (tape handles plus stage labels).
pub struct LossTrace {
    pub seg: Vec<Var>,
    pub edge: Vec<Vec<(usize, Var)>>,
    pub depth: Vec<Vec<(usize, Var)>>,
    pub total: Var,
}

impl LossTrace {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            seg_terms: self.seg.iter().map(|&v| tape.value(v).item()).collect(),
            edge_terms: self
                .edge
                .iter()
                .map(|row| row.iter().map(|&(_, v)| tape.value(v).item()).collect())
                .collect(),
            depth_terms: self
                .depth
                .iter()
                .map(|row| row.iter().map(|&(_, v)| tape.value(v).item()).collect())
                .collect(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Assembles the total objective over all iterations of a traced decode.
pub fn total_loss_traced(
    tape: &Tape,
    traces: &[DecodeTrace],
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Result<LossTrace, LossError> {
    if traces.is_empty() {
        return Err(LossError::NoStates);
    }
    check_binary(&gt.mask)?;
    if let Some(d) = &gt.depth {
        check_unit_range(d)?;
    }

    let mut seg = Vec::new();
    let mut edge = Vec::new();
    let mut depth = Vec::new();
    let mut terms: Vec<Var> = Vec::new();

    for tr in traces {
        let pred_shape = tape.shape_of(tr.seg_prob_full);
        let (ph, pw) = (pred_shape[1], pred_shape[2]);
        if (ph, pw) != gt.mask.dim() {
            return Err(LossError::ShapeMismatch { pred: (ph, pw), gt: gt.mask.dim() });
        }
        let s = seg_loss_on_tape(tape, tr.seg_prob_full, &gt.mask, cfg.seg);
        seg.push(s);
        terms.push(s);

        let expect_edge = !tr.edge_stem.is_empty() || !tr.edge_logits.is_empty();
        let expect_depth = !tr.depth_stem.is_empty() || !tr.depth_logits.is_empty();
        let stages: Vec<usize> = tr
            .edge_logits
            .keys()
            .chain(tr.depth_logits.keys())
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut e_row = Vec::new();
        let mut d_row = Vec::new();
        for &stage in &stages {
            let (sh, sw) = tr.stage_dims[stage - 1];
            if expect_edge {
                let logits = tr.edge_logits.get(&stage).copied().ok_or(
                    LossError::MissingAuxiliary {
                        kind: "edge",
                        stage,
                        iteration: tr.iteration_index,
                    },
                )?;
                let ge = gt.edge.as_ref().ok_or(LossError::MissingEdgeGt)?;
                let ge_s = resize_bilinear_2d(ge, sh, sw);
                let l = edge_loss_on_tape(tape, logits, &ge_s);
                e_row.push((stage, l));
                terms.push(l);
            }
            if expect_depth {
                let logits = tr.depth_logits.get(&stage).copied().ok_or(
                    LossError::MissingAuxiliary {
                        kind: "depth",
                        stage,
                        iteration: tr.iteration_index,
                    },
                )?;
                let gd = gt.depth.as_ref().ok_or(LossError::MissingDepthGt)?;
                let gd_s = resize_bilinear_2d(gd, sh, sw);
                let l = depth_loss_on_tape(tape, logits, &gd_s);
                d_row.push((stage, l));
                terms.push(l);
            }
        }
        edge.push(e_row);
        depth.push(d_row);
    }

    let total = tape.add_n(&terms);
    Ok(LossTrace { seg, edge, depth, total })
}

fn scalar_loss(build: impl FnOnce(&Tape) -> Var) -> f64 {
    let tape = Tape::new();
    let v = build(&tape);
    tape.value(v).item()
}

/// Weighted segmentation loss over a probability map.
pub fn seg_loss(pred_prob: &Array2<f64>, gt_mask: &Array2<f64>) -> Result<f64, LossError> {
    seg_loss_with(pred_prob, gt_mask, SegLossKind::WbceWiou)
}

pub fn seg_loss_with(
    pred_prob: &Array2<f64>,
    gt_mask: &Array2<f64>,
    kind: SegLossKind,
) -> Result<f64, LossError> {
    if pred_prob.dim() != gt_mask.dim() {
        return Err(LossError::ShapeMismatch { pred: pred_prob.dim(), gt: gt_mask.dim() });
    }
    check_binary(gt_mask)?;
    Ok(scalar_loss(|tape| {
        let p = tape.input(arr2(pred_prob));
        seg_loss_on_tape(tape, p, gt_mask, kind)
    }))
}

/// Dice edge loss over logits.
pub fn edge_loss(pred_logits: &Array2<f64>, gt_edge: &Array2<f64>) -> Result<f64, LossError> {
    if pred_logits.dim() != gt_edge.dim() {
        return Err(LossError::ShapeMismatch { pred: pred_logits.dim(), gt: gt_edge.dim() });
    }
    Ok(scalar_loss(|tape| {
        let l = tape.input(arr2(pred_logits));
        edge_loss_on_tape(tape, l, gt_edge)
    }))
}

/// L1 + SSIM depth loss over logits.
pub fn depth_loss(pred_logits: &Array2<f64>, gt_depth: &Array2<f64>) -> Result<f64, LossError> {
    if pred_logits.dim() != gt_depth.dim() {
        return Err(LossError::ShapeMismatch { pred: pred_logits.dim(), gt: gt_depth.dim() });
    }
    check_unit_range(gt_depth)?;
    Ok(scalar_loss(|tape| {
        let l = tape.input(arr2(pred_logits));
        depth_loss_on_tape(tape, l, gt_depth)
    }))
}

/// Assembles the breakdown from plain decode states.
pub fn total_loss(
    states: &[DecodeState],
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    if states.is_empty() {
        return Err(LossError::NoStates);
    }
    check_binary(&gt.mask)?;
    if let Some(d) = &gt.depth {
        check_unit_range(d)?;
    }
    let mut seg_terms = Vec::new();
    let mut edge_terms = Vec::new();
    let mut depth_terms = Vec::new();
    for st in states {
        if st.seg_prob.dim() != gt.mask.dim() {
            return Err(LossError::ShapeMismatch { pred: st.seg_prob.dim(), gt: gt.mask.dim() });
        }
        seg_terms.push(scalar_loss(|tape| {
            let p = tape.input(arr2(&st.seg_prob));
            seg_loss_on_tape(tape, p, &gt.mask, cfg.seg)
        }));
        let expect_edge = !st.edge_logits.is_empty() || !st.edge_stem.is_empty();
        let expect_depth = !st.depth_logits.is_empty() || !st.depth_stem.is_empty();
        let stages: Vec<usize> = st
            .edge_stem
            .keys()
            .chain(st.depth_stem.keys())
            .chain(st.edge_logits.keys())
            .chain(st.depth_logits.keys())
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut e_row = Vec::new();
        let mut d_row = Vec::new();
        for &stage in &stages {
            if expect_edge {
                let logits = st.edge_logits.get(&stage).ok_or(LossError::MissingAuxiliary {
                    kind: "edge",
                    stage,
                    iteration: st.iteration_index,
                })?;
                let ge = gt.edge.as_ref().ok_or(LossError::MissingEdgeGt)?;
                let ge_s = resize_bilinear_2d(ge, logits.dim().0, logits.dim().1);
                e_row.push(edge_loss(logits, &ge_s)?);
            }
            if expect_depth {
                let logits = st.depth_logits.get(&stage).ok_or(LossError::MissingAuxiliary {
                    kind: "depth",
                    stage,
                    iteration: st.iteration_index,
                })?;
                let gd = gt.depth.as_ref().ok_or(LossError::MissingDepthGt)?;
                let gd_s = resize_bilinear_2d(gd, logits.dim().0, logits.dim().1);
                d_row.push(depth_loss(logits, &gd_s)?);
            }
        }
        edge_terms.push(e_row);
        depth_terms.push(d_row);
    }
    let total = seg_terms.iter().sum::<f64>()
        + edge_terms.iter().flatten().sum::<f64>()
        + depth_terms.iter().flatten().sum::<f64>();
    Ok(LossBreakdown { seg_terms, edge_terms, depth_terms, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{central_difference, max_rel_err};
    use crate::backbone::{BackboneSpec, ClassEmbeddingSet, FeaturePyramid};
    use crate::decoder::{Decoder, DecoderConfig};
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen_range(lo..hi))
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
    }

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            embed_dim: 8,
            stage_channels: [4, 5, 6, 7],
            stage_strides: [2, 4, 8, 16],
            frozen: true,
        }
    }

    fn tiny_pyramid(rng: &mut ChaCha8Rng) -> FeaturePyramid {
        let ch = tiny_spec().stage_channels;
        FeaturePyramid::new(vec![
            Array3::from_shape_fn((ch[0], 16, 16), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((ch[0], 8, 8), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((ch[1], 4, 4), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((ch[2], 2, 2), |_| rng.gen_range(-1.0..1.0)),
            Array3::from_shape_fn((ch[3], 1, 1), |_| rng.gen_range(-1.0..1.0)),
        ])
        .unwrap()
    }

    fn tiny_embeds(rng: &mut ChaCha8Rng) -> ClassEmbeddingSet {
        let mut emb = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
        for mut r in emb.rows_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.mapv_inplace(|v| v / n);
        }
        ClassEmbeddingSet::new(vec!["a".into(), "b".into()], emb).unwrap()
    }

    #[test]
    fn seg_perfect_prediction_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let gt = rand_mask(&mut rng, 8, 8);
        assert!(gt.iter().any(|&v| v == 1.0) && gt.iter().any(|&v| v == 0.0));
        let loss = seg_loss(&gt, &gt).unwrap();
        assert!(loss < 1e-3, "perfect prediction gives loss {loss}");
    }

    #[test]
    fn seg_uniform_half_matches_hand_oracle() {
        // gt: left column ones on a 2x2 grid; pred: uniform 0.5
        let gt = array![[1.0, 0.0], [1.0, 0.0]];
        let pred = Array2::from_elem((2, 2), 0.5);
        let got = seg_loss(&pred, &gt).unwrap();

        // Independent closed-form evaluation: every 31x31 window clips
        // to the whole 2x2 grid, so the pooled mean is 2/961 everywhere.
        let pool = 2.0 / (31.0f64 * 31.0);
        let mut wbce_num = 0.0;
        let mut wsum = 0.0;
        let mut inter = 0.0;
        let mut union = 0.0;
        for &g in gt.iter() {
            let wgt = 1.0 + 5.0 * (pool - g).abs();
            let bce = -(g * 0.5f64.ln() + (1.0 - g) * 0.5f64.ln());
            wbce_num += wgt * bce;
            wsum += wgt;
            inter += wgt * 0.5 * g;
            union += wgt * (0.5 + g - 0.5 * g);
        }
        let expected = wbce_num / wsum + (1.0 - (inter + 1.0) / (union + 1.0));
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn seg_boundary_error_costs_more_than_interior() {
        // The grid must be larger than the 31x31 pooling window for the
        // boundary weight to vary spatially.
        let mut gt = Array2::zeros((64, 64));
        for y in 22..42 {
            for x in 22..42 {
                gt[(y, x)] = 1.0;
            }
        }
        let mut interior = gt.clone();
        interior[(31, 31)] = 0.0;
        interior[(32, 32)] = 0.0;
        let mut boundary = gt.clone();
        boundary[(22, 22)] = 0.0;
        boundary[(22, 23)] = 0.0;
        let li = seg_loss(&interior, &gt).unwrap();
        let lb = seg_loss(&boundary, &gt).unwrap();
        assert!(lb > li, "boundary miss {lb} must exceed interior miss {li}");
    }

    #[test]
    fn seg_rejects_soft_gt() {
        let gt = array![[0.5, 1.0], [0.0, 1.0]];
        let pred = Array2::from_elem((2, 2), 0.5);
        assert!(matches!(seg_loss(&pred, &gt), Err(LossError::NonBinaryMask(_))));
    }

    #[test]
    fn dice_exact_zero_on_saturated_match() {
        let gt = array![[1.0, 0.0], [0.0, 1.0]];
        let logits = gt.mapv(|v| if v == 1.0 { 800.0 } else { -800.0 });
        assert_eq!(edge_loss(&logits, &gt).unwrap(), 0.0);
    }

    #[test]
    fn dice_disjoint_supports() {
        // Prediction saturates the top half, gt occupies the bottom half.
        let mut gt = Array2::zeros((4, 4));
        let mut logits = Array2::from_elem((4, 4), -800.0);
        for x in 0..4 {
            gt[(3, x)] = 1.0;
            gt[(2, x)] = 1.0;
            logits[(0, x)] = 800.0;
            logits[(1, x)] = 800.0;
        }
        let got = edge_loss(&logits, &gt).unwrap();
        let expected = 1.0 - DICE_EPS / (16.0 + DICE_EPS);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn dice_empty_case_is_zero() {
        let gt = Array2::zeros((4, 4));
        let logits = Array2::from_elem((4, 4), -800.0);
        assert_eq!(edge_loss(&logits, &gt).unwrap(), 0.0);
    }

    #[test]
    fn depth_perfect_and_constant_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits = rand2(&mut rng, 8, 8, -2.0, 2.0);
        let gt = logits.mapv(crate::autograd::sigmoid_scalar);
        assert!(depth_loss(&logits, &gt).unwrap() < 1e-6);

        let logits0 = Array2::zeros((8, 8));
        let gt05 = Array2::from_elem((8, 8), 0.5);
        assert!(depth_loss(&logits0, &gt05).unwrap().abs() < 1e-12);
    }

    #[test]
    fn depth_rejects_out_of_range_gt() {
        let logits = Array2::zeros((4, 4));
        let gt = Array2::from_elem((4, 4), 1.2);
        assert!(matches!(depth_loss(&logits, &gt), Err(LossError::DepthOutOfRange(_))));
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let logits = rand2(&mut rng, 16, 16, -3.0, 3.0);
        let gt = rand2(&mut rng, 16, 16, 0.0, 1.0);
        let got = depth_loss(&logits, &gt).unwrap();

        // Brute-force windowed reference with explicit replicate padding.
        let p = logits.mapv(crate::autograd::sigmoid_scalar);
        let (h, w) = p.dim();
        let kern = ssim_kernel();
        let kd = kern.data();
        let k = 11usize;
        let c = k / 2;
        let sample = |m: &Array2<f64>, y: isize, x: isize| -> f64 {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            m[(yy, xx)]
        };
        let mut ssim_sum = 0.0;
        let mut l1_sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                l1_sum += (p[(y, x)] - gt[(y, x)]).abs();
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = kd[ky * k + kx];
                        let sy = y as isize + ky as isize - c as isize;
                        let sx = x as isize + kx as isize - c as isize;
                        let pv = sample(&p, sy, sx);
                        let gv = sample(&gt, sy, sx);
                        mx += wgt * pv;
                        my += wgt * gv;
                        mxx += wgt * pv * pv;
                        myy += wgt * gv * gv;
                        mxy += wgt * pv * gv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                ssim_sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
        let n = (h * w) as f64;
        let expected = l1_sum / n + (1.0 - ssim_sum / n);
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let gt_mask = rand_mask(&mut rng, 4, 4);
        let gt_soft = rand2(&mut rng, 4, 4, 0.0, 1.0);

        let p0: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
        let tape = Tape::new();
        let p = tape.param(Arr::from_vec(&[4, 4], p0.clone()));
        let loss = seg_loss_on_tape(&tape, p, &gt_mask, SegLossKind::WbceWiou);
        let grads = tape.backward(loss);
        let analytic = grads.get(p).unwrap().to_vec();
        let mut f = |x: &[f64]| {
            let t = Tape::new();
            let pv = t.param(Arr::from_vec(&[4, 4], x.to_vec()));
            t.value(seg_loss_on_tape(&t, pv, &gt_mask, SegLossKind::WbceWiou)).item()
        };
        let numeric = central_difference(&mut f, &p0, 1e-6);
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);

        for which in ["edge", "depth"] {
            let x0: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let build = |t: &Tape, l: Var| {
                if which == "edge" {
                    edge_loss_on_tape(t, l, &gt_mask)
                } else {
                    depth_loss_on_tape(t, l, &gt_soft)
                }
            };
            let tape = Tape::new();
            let l = tape.param(Arr::from_vec(&[4, 4], x0.clone()));
            let v = build(&tape, l);
            let grads = tape.backward(v);
            let analytic = grads.get(l).unwrap().to_vec();
            let mut f = |x: &[f64]| {
                let t = Tape::new();
                let lv = t.param(Arr::from_vec(&[4, 4], x.to_vec()));
                t.value(build(&t, lv)).item()
            };
            let numeric = central_difference(&mut f, &x0, 1e-6);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "{which} loss grad err {err}");
        }
    }

    #[test]
    fn breakdown_counts_and_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let spec = tiny_spec();
        let embeds = tiny_embeds(&mut rng);
        let proj = Array2::from_shape_fn((8, 7), |_| rng.gen_range(-0.3..0.3));
        for (iters, want) in [(1usize, 7usize), (2, 14)] {
            let cfg =
                DecoderConfig { width: 8, heads: 2, iterations: iters, ..DecoderConfig::default() };
            let dec = Decoder::new(cfg, &spec, 5).unwrap();
            let pyr = tiny_pyramid(&mut rng);
            let states = dec.decode(&pyr, &embeds, &proj).unwrap();
            let gt = GroundTruth {
                mask: rand_mask(&mut rng, 16, 16),
                edge: Some(rand_mask(&mut rng, 16, 16)),
                depth: Some(rand2(&mut rng, 16, 16, 0.0, 1.0)),
            };
            let bd = total_loss(&states, &gt, &LossConfig::default()).unwrap();
            assert_eq!(bd.term_count(), want, "T={iters}");
            assert!((bd.total - bd.term_sum()).abs() < 1e-6);
            assert!(bd
                .seg_terms
                .iter()
                .chain(bd.edge_terms.iter().flatten())
                .chain(bd.depth_terms.iter().flatten())
                .all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn perfect_predictions_give_tiny_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let spec = tiny_spec();
        let embeds = tiny_embeds(&mut rng);
        let proj = Array2::from_shape_fn((8, 7), |_| rng.gen_range(-0.3..0.3));
        let cfg = DecoderConfig { width: 8, heads: 2, iterations: 2, ..DecoderConfig::default() };
        let dec = Decoder::new(cfg, &spec, 5).unwrap();
        let pyr = tiny_pyramid(&mut rng);
        let mut states = dec.decode(&pyr, &embeds, &proj).unwrap();
        // Resize-stable ground truths: all-zero edges and constant depth
        // survive bilinear downsampling exactly, so saturated matches
        // drive every term to (near) zero.
        let gt = GroundTruth {
            mask: rand_mask(&mut rng, 16, 16),
            edge: Some(Array2::zeros((16, 16))),
            depth: Some(Array2::from_elem((16, 16), 0.5)),
        };
        for st in states.iter_mut() {
            st.seg_prob = gt.mask.clone();
            for (_, m) in st.edge_logits.iter_mut() {
                m.fill(-800.0);
            }
            for (_, m) in st.depth_logits.iter_mut() {
                m.fill(0.0); // sigmoid(0) = 0.5
            }
        }
        let bd = total_loss(&states, &gt, &LossConfig::default()).unwrap();
        assert!(bd.total < 1e-2, "perfect predictions give total {}", bd.total);
    }

    #[test]
    fn missing_auxiliary_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let spec = tiny_spec();
        let cfg = DecoderConfig { width: 8, heads: 2, iterations: 1, ..DecoderConfig::default() };
        let dec = Decoder::new(cfg, &spec, 5).unwrap();
        let pyr = tiny_pyramid(&mut rng);
        let embeds = tiny_embeds(&mut rng);
        let proj = Array2::from_shape_fn((8, 7), |_| rng.gen_range(-0.3..0.3));
        let mut states = dec.decode(&pyr, &embeds, &proj).unwrap();
        states[0].edge_logits.remove(&2);
        let gt = GroundTruth {
            mask: rand_mask(&mut rng, 16, 16),
            edge: Some(rand_mask(&mut rng, 16, 16)),
            depth: Some(rand2(&mut rng, 16, 16, 0.0, 1.0)),
        };
        match total_loss(&states, &gt, &LossConfig::default()) {
            Err(LossError::MissingAuxiliary { kind: "edge", stage: 2, iteration: 1 }) => {}
            other => panic!("expected MissingAuxiliary, got {other:?}"),
        }
    }
}
