//! Parameter construction, on-tape decoder blocks, and the decode loop.

use super::params::{BoundParams, ParamStore};
use super::{
    AggMode, DecodeError, DecodeState, Decoder, DecoderConfig, GuidanceTensors, SeFusion,
    StructureOutputs, TopdownGuidance, ITER_ENTRY_STAGE, NUM_STAGES,
};
use crate::autograd::{Arr, Tape, Var};
use crate::backbone::{BackboneSpec, ClassEmbeddingSet, FeaturePyramid};
use crate::util::derived_rng;
use ndarray::{Array2, Array3};
use rand::Rng;
use std::collections::BTreeMap;

/// Softmax temperature applied to the correlation before mixing class
/// prototypes into the top-down cue.
pub const CUE_TEMPERATURE: f64 = 0.01;
const NORM_EPS: f64 = 1e-5;
const POOL_EPS: f64 = 1e-6;
/// Below this mask mass the pooled representation falls back to global
/// average pooling and the state is flagged degenerate.
const DEGENERATE_MASS: f64 = 1e-9;

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

fn linear(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
    let mut rng = derived_rng(seed, name);
    store.insert(format!("{name}.w"), &[fan_in, fan_out], xavier(&mut rng, fan_in, fan_out, fan_in * fan_out));
    if bias {
        store.insert(format!("{name}.b"), &[fan_out], vec![0.0; fan_out]);
    }
}

fn conv3(store: &mut ParamStore, seed: u64, name: &str, c: usize) {
    let mut rng = derived_rng(seed, name);
    let fan = 9 * c;
    store.insert(format!("{name}.w"), &[c, c, 3, 3], xavier(&mut rng, fan, fan, c * c * 9));
    store.insert(format!("{name}.b"), &[c], vec![0.0; c]);
}

fn norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), &[c], vec![1.0; c]);
    store.insert(format!("{name}.beta"), &[c], vec![0.0; c]);
}

/// Builds the full trainable parameter layout for a configuration. Only
/// parameters the configured forward actually touches are created, so a
/// gradient audit can demand signal on every one of them.
pub(super) fn init_params(cfg: &DecoderConfig, spec: &BackboneSpec, seed: u64) -> ParamStore {
    let c = cfg.width;
    let d = spec.embed_dim;
    let c5 = spec.top_channels();
    let level_ch = [spec.stage_channels[0], spec.stage_channels[0], spec.stage_channels[1], spec.stage_channels[2], spec.stage_channels[3]];
    let mut store = ParamStore::new();
    for stage in 1..=NUM_STAGES {
        let cin = level_ch[stage - 1];
        linear(&mut store, seed, &format!("stage{stage}.proj"), cin, c, true);
        norm(&mut store, &format!("stage{stage}.sga.norm"), c);
        linear(&mut store, seed, &format!("stage{stage}.sga.q"), c, c, true);
        // K and the class-guidance projection carry no bias: attention
        // scores are invariant to a shared key offset, so such biases
        // would never receive gradient.
        linear(&mut store, seed, &format!("stage{stage}.sga.k"), c, c, false);
        linear(&mut store, seed, &format!("stage{stage}.sga.v"), c, c, true);
        linear(&mut store, seed, &format!("stage{stage}.sga.o"), c, c, true);
        if cfg.semantic_guidance {
            linear(&mut store, seed, &format!("stage{stage}.sga.guide"), d, c, false);
        }
        if cfg.se_stages.contains(&stage) {
            if cfg.edge_branch {
                conv3(&mut store, seed, &format!("stage{stage}.edge.stem1"), c);
                conv3(&mut store, seed, &format!("stage{stage}.edge.stem2"), c);
                linear(&mut store, seed, &format!("stage{stage}.edge.head"), c, 1, true);
            }
            if cfg.depth_branch {
                conv3(&mut store, seed, &format!("stage{stage}.depth.stem1"), c);
                conv3(&mut store, seed, &format!("stage{stage}.depth.stem2"), c);
                linear(&mut store, seed, &format!("stage{stage}.depth.head"), c, 1, true);
            }
            if cfg.edge_branch || cfg.depth_branch {
                match cfg.se_fusion {
                    SeFusion::Sea => {
                        norm(&mut store, &format!("stage{stage}.sea.norm"), c);
                        linear(&mut store, seed, &format!("stage{stage}.sea.q"), c, c, true);
                        linear(&mut store, seed, &format!("stage{stage}.sea.k"), c, c, false);
                        linear(&mut store, seed, &format!("stage{stage}.sea.v"), c, c, true);
                        linear(&mut store, seed, &format!("stage{stage}.sea.out"), c, c, true);
                        if cfg.edge_branch && cfg.depth_branch {
                            store.insert(format!("stage{stage}.sea.alpha"), &[cfg.heads], vec![0.0; cfg.heads]);
                        }
                    }
                    SeFusion::Addition => {
                        if cfg.edge_branch {
                            linear(&mut store, seed, &format!("stage{stage}.fuse.edge"), c, c, true);
                        }
                        if cfg.depth_branch {
                            linear(&mut store, seed, &format!("stage{stage}.fuse.depth"), c, c, true);
                        }
                    }
                }
            }
        }
    }
    linear(&mut store, seed, "seg.head", c, 1, true);
    if cfg.iterations >= 2 && (cfg.use_object_repr || cfg.use_correlation) {
        if cfg.use_object_repr {
            linear(&mut store, seed, "guide.obj", c5, c, true);
        }
        if cfg.use_correlation {
            linear(&mut store, seed, "guide.txt", d, c, true);
        }
    }
    store
}

/// Traced per-iteration outputs (tape handles).
pub struct DecodeTrace {
    pub iteration_index: usize,
    /// Stage outputs as (width, h, w) maps; index 0 = stage 1.
    pub stage_chw: Vec<Var>,
    /// Stage outputs as token matrices (h*w, width).
    pub stage_tokens: Vec<Var>,
    pub stage_dims: Vec<(usize, usize)>,
    /// Segmentation logits at stage-1 resolution (1, h1, w1).
    pub seg_logits_l1: Var,
    /// Segmentation logits bilinearly resized to input resolution.
    pub seg_logits_full: Var,
    /// Sigmoid of the resized logits.
    pub seg_prob_full: Var,
    pub edge_logits: BTreeMap<usize, Var>,
    pub depth_logits: BTreeMap<usize, Var>,
    pub edge_stem: BTreeMap<usize, Var>,
    pub depth_stem: BTreeMap<usize, Var>,
    pub correlation: Option<Var>,
    pub object_repr: Option<Var>,
    pub remod: BTreeMap<usize, Var>,
    pub degenerate_pool: bool,
}

struct Ctx<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    bound: &'a BoundParams,
    cfg: &'a DecoderConfig,
}

impl<'a> Ctx<'a> {
    fn p(&self, name: &str) -> Var {
        self.bound.var(self.store, name)
    }

    fn lin(&self, name: &str, x: Var) -> Var {
        let y = self.tape.matmul(x, self.p(&format!("{name}.w")));
        if self.store.contains(&format!("{name}.b")) {
            self.tape.add_bias_row(y, self.p(&format!("{name}.b")))
        } else {
            y
        }
    }

    fn norm(&self, name: &str, x: Var) -> Var {
        self.tape.colnorm_affine(
            x,
            self.p(&format!("{name}.gamma")),
            self.p(&format!("{name}.beta")),
            NORM_EPS,
        )
    }
}

/// Above this token count K/V sources are spatially pooled before their
/// projections (linear-attention budget at high-resolution stages; the
/// reported full-scale FLOP budget rules out global quadratic attention
/// there). Queries always stay at full resolution, and any feature map
/// at or below the cap goes through exact dense attention.
pub const KV_TOKEN_CAP: usize = 256;

fn kv_dims(h: usize, w: usize) -> (usize, usize) {
    let (mut rh, mut rw) = (h, w);
    while rh * rw > KV_TOKEN_CAP {
        rh = rh.div_ceil(2);
        rw = rw.div_ceil(2);
    }
    (rh, rw)
}

/// Pools a token matrix to the K/V budget; identity below the cap.
fn reduce_tokens(tape: &Tape, tok: Var, h: usize, w: usize) -> (Var, usize, usize) {
    let (rh, rw) = kv_dims(h, w);
    if rh == h && rw == w {
        return (tok, h, w);
    }
    let chw = tape.to_chw(tok, h, w);
    let red = tape.bilinear_resize(chw, rh, rw);
    (tape.to_tokens(red), rh, rw)
}

/// Pools a per-pixel gate vector onto the reduced K/V grid.
fn reduce_gate(tape: &Tape, gate: Var, h: usize, w: usize, rh: usize, rw: usize) -> Var {
    if rh == h && rw == w {
        return gate;
    }
    let col = tape.reshape(gate, &[h * w, 1]);
    let chw = tape.to_chw(col, h, w);
    let red = tape.bilinear_resize(chw, rh, rw);
    // single-column row-mean: an exact (rh*rw,) reshape
    tape.rowmean(tape.to_tokens(red))
}

/// Multi-head attention core: per-head scaled softmax over q/k and the
/// weighted sum of v; heads are concatenated, no output projection.
fn mha(tape: &Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let c = tape.shape_of(q)[1];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let ph = tape.scaled_softmax_nt(qh, kh, scale);
        outs.push(tape.matmul(ph, vh));
    }
    tape.concat_cols(&outs)
}

/// Per-head attention outputs without concatenation (SEA blends heads).
fn mha_heads(tape: &Tape, q: Var, k: Var, v: Var, heads: usize) -> Vec<Var> {
    let c = tape.shape_of(q)[1];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let ph = tape.scaled_softmax_nt(qh, kh, scale);
            tape.matmul(ph, vh)
        })
        .collect()
}

/// Semantic guidance attention over one stage's token matrix.
/// Returns the output tokens and, when guidance is active, the base
/// weight node.
#[allow(clippy::too_many_arguments)]
fn sga(
    ctx: &Ctx,
    stage: usize,
    x_tok: Var,
    dims: (usize, usize),
    ft: Var,
    remod: Option<Var>,
    iteration: usize,
) -> Result<(Var, Option<Var>), DecodeError> {
    let tape = ctx.tape;
    let (h, w) = dims;
    let pre = format!("stage{stage}.sga");
    let xn = ctx.norm(&format!("{pre}.norm"), x_tok);
    let q = ctx.lin(&format!("{pre}.q"), xn);
    let (kv_src, rh, rw) = reduce_tokens(tape, xn, h, w);
    let k = ctx.lin(&format!("{pre}.k"), kv_src);
    let v = ctx.lin(&format!("{pre}.v"), kv_src);

    let (vmod, wb) = if ctx.cfg.semantic_guidance {
        let gt = ctx.lin(&format!("{pre}.guide"), ft);
        let c = ctx.cfg.width as f64;
        let sims = tape.mul_scalar(tape.matmul_nt(q, gt), 1.0 / c.sqrt());
        if !tape.value(sims).all_finite() {
            return Err(DecodeError::NumericalFault { stage, iteration });
        }
        let probs = tape.softmax_rows(sims);
        let mut wb = match ctx.cfg.agg {
            AggMode::Max => tape.rowmax(probs),
            AggMode::Mean => tape.rowmean(probs),
        };
        if let Some(r) = remod {
            wb = tape.mul(wb, r);
        }
        let gate = tape.add_scalar(wb, 1.0);
        let gate_kv = reduce_gate(tape, gate, h, w, rh, rw);
        (tape.mul_bcast_col(v, gate_kv), Some(wb))
    } else {
        (v, None)
    };

    let attn = mha(tape, q, k, vmod, ctx.cfg.heads);
    let out = ctx.lin(&format!("{pre}.o"), attn);
    Ok((tape.add(x_tok, out), wb))
}

/// Structure enhancement attention: the normalized stage feature
/// queries into the edge and depth stem features through one shared
/// attention block; per-head outputs are blended by a learnable alpha.
fn sea(
    ctx: &Ctx,
    stage: usize,
    x_tok: Var,
    dims: (usize, usize),
    fe_tok: Option<Var>,
    fd_tok: Option<Var>,
) -> Var {
    let tape = ctx.tape;
    let (h, w) = dims;
    let pre = format!("stage{stage}.sea");
    let xn = ctx.norm(&format!("{pre}.norm"), x_tok);
    let q = ctx.lin(&format!("{pre}.q"), xn);
    let branch = |src: Var| {
        let (src, _, _) = reduce_tokens(tape, src, h, w);
        let k = ctx.lin(&format!("{pre}.k"), src);
        let v = ctx.lin(&format!("{pre}.v"), src);
        mha_heads(tape, q, k, v, ctx.cfg.heads)
    };
    let merged = match (fe_tok, fd_tok) {
        (Some(fe), Some(fd)) => {
            let eh = branch(fe);
            let dh = branch(fd);
            let alpha = tape.sigmoid(ctx.p(&format!("{pre}.alpha")));
            let blended: Vec<Var> = (0..ctx.cfg.heads)
                .map(|h| {
                    let a = tape.get(alpha, h);
                    let one_minus = tape.affine(a, -1.0, 1.0);
                    tape.add(tape.scale_by(eh[h], a), tape.scale_by(dh[h], one_minus))
                })
                .collect();
            tape.concat_cols(&blended)
        }
        (Some(fe), None) => tape.concat_cols(&branch(fe)),
        (None, Some(fd)) => tape.concat_cols(&branch(fd)),
        (None, None) => unreachable!("sea called without stem features"),
    };
    let out = ctx.lin(&format!("{pre}.out"), merged);
    tape.add(x_tok, out)
}

/// Additive structure fusion (ablation alternative to SEA).
fn addition_fusion(ctx: &Ctx, stage: usize, x_tok: Var, fe_tok: Option<Var>, fd_tok: Option<Var>) -> Var {
    let tape = ctx.tape;
    let mut out = x_tok;
    if let Some(fe) = fe_tok {
        out = tape.add(out, ctx.lin(&format!("stage{stage}.fuse.edge"), fe));
    }
    if let Some(fd) = fd_tok {
        out = tape.add(out, ctx.lin(&format!("stage{stage}.fuse.depth"), fd));
    }
    out
}

struct BranchOut {
    stem_chw: Var,
    stem_tok: Var,
    logits: Var,
}

/// One convolutional stem (two 3x3 convs with ReLU) plus a 1x1 head.
fn structure_stem(ctx: &Ctx, name: &str, x_chw: Var, h: usize, w: usize) -> BranchOut {
    let tape = ctx.tape;
    let c1 = tape.conv2d(x_chw, ctx.p(&format!("{name}.stem1.w")), ctx.p(&format!("{name}.stem1.b")), 1, 1);
    let a1 = tape.relu(c1);
    let c2 = tape.conv2d(a1, ctx.p(&format!("{name}.stem2.w")), ctx.p(&format!("{name}.stem2.b")), 1, 1);
    let stem_chw = tape.relu(c2);
    let stem_tok = tape.to_tokens(stem_chw);
    let logit_tok = ctx.lin(&format!("{name}.head"), stem_tok);
    let logits = tape.to_chw(logit_tok, h, w);
    BranchOut { stem_chw, stem_tok, logits }
}

struct StageStructure {
    edge: Option<BranchOut>,
    depth: Option<BranchOut>,
}

fn run_structure(ctx: &Ctx, stage: usize, x_tok: Var, h: usize, w: usize) -> StageStructure {
    let x_chw = ctx.tape.to_chw(x_tok, h, w);
    let edge = ctx
        .cfg
        .edge_branch
        .then(|| structure_stem(ctx, &format!("stage{stage}.edge"), x_chw, h, w));
    let depth = ctx
        .cfg
        .depth_branch
        .then(|| structure_stem(ctx, &format!("stage{stage}.depth"), x_chw, h, w));
    StageStructure { edge, depth }
}

struct GuidanceVars {
    correlation: Var,
    object_repr: Var,
    remod: BTreeMap<usize, Var>,
    degenerate: bool,
}

/// Builds the top-down cues from a completed iteration: pooled object
/// representation, its correlation against the class embeddings, and
/// per-stage re-modulation maps.
fn topdown(
    ctx: &Ctx,
    prev: &DecodeTrace,
    f5_tok: Var,
    ft: Var,
    tv: Var,
    l5_dims: (usize, usize),
) -> GuidanceVars {
    let tape = ctx.tape;
    let (h5, w5) = l5_dims;
    let ps_l1 = tape.sigmoid(prev.seg_logits_l1);
    let ps5 = tape.bilinear_resize(ps_l1, h5, w5);
    let weights_mat = tape.to_tokens(ps5); // (n5, 1)
    let n5 = h5 * w5;
    // Row-mean of a single-column matrix: an exact (n5,) reshape.
    let weights_flat = tape.rowmean(weights_mat);
    let mass = tape.value(tape.sum_all(weights_flat)).item();
    let degenerate = mass <= DEGENERATE_MASS;
    let pool_w = if degenerate {
        tape.input(Arr::full(&[n5], 1.0))
    } else {
        weights_flat
    };
    let num = tape.vecmat(pool_w, f5_tok);
    let den = tape.clamp(tape.sum_all(pool_w), POOL_EPS, f64::INFINITY);
    let f_obj = tape.div_by_scalar(num, den);
    let f_v = tape.normalize_vec(tape.matvec(tv, f_obj));
    let correlation = tape.matvec(ft, f_v);

    let mut cue_parts: Vec<Var> = Vec::new();
    if ctx.cfg.use_object_repr {
        let w = ctx.p("guide.obj.w");
        let b = ctx.p("guide.obj.b");
        cue_parts.push(tape.add(tape.vecmat(f_obj, w), b));
    }
    if ctx.cfg.use_correlation {
        let scaled = tape.mul_scalar(correlation, 1.0 / CUE_TEMPERATURE);
        let probs = tape.softmax_vec(scaled);
        let proto = tape.vecmat(probs, ft);
        let w = ctx.p("guide.txt.w");
        let b = ctx.p("guide.txt.b");
        cue_parts.push(tape.add(tape.vecmat(proto, w), b));
    }
    let cue = match cue_parts.len() {
        1 => cue_parts[0],
        2 => tape.mul_scalar(tape.add(cue_parts[0], cue_parts[1]), 0.5),
        _ => unreachable!("topdown called with no cue sources"),
    };

    let c = ctx.cfg.width as f64;
    let mut remod = BTreeMap::new();
    for stage in 1..=ITER_ENTRY_STAGE {
        let prev_tok = prev.stage_tokens[stage - 1];
        let raw = tape.mul_scalar(tape.matvec(prev_tok, cue), 1.0 / c.sqrt());
        remod.insert(stage, tape.sigmoid(raw));
    }
    GuidanceVars { correlation, object_repr: f_obj, remod, degenerate }
}

impl Decoder {
    fn check_inputs(
        &self,
        pyramid: &FeaturePyramid,
        embeds: &ClassEmbeddingSet,
    ) -> Result<(), DecodeError> {
        if embeds.num_classes() == 0 {
            return Err(DecodeError::NoClasses);
        }
        if embeds.dim() != self.spec().embed_dim {
            return Err(DecodeError::EmbedDimMismatch {
                expected: self.spec().embed_dim,
                got: embeds.dim(),
            });
        }
        let expect = self.level_channels();
        for lvl in 1..=NUM_STAGES {
            let got = pyramid.level(lvl).dim().0;
            if got != expect[lvl - 1] {
                return Err(DecodeError::ChannelMismatch { level: lvl, expected: expect[lvl - 1], got });
            }
        }
        Ok(())
    }

    /// Full decode on a caller-provided tape; the training path.
    pub fn decode_traced(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        pyramid: &FeaturePyramid,
        embeds: &ClassEmbeddingSet,
        projection: &Array2<f64>,
    ) -> Result<Vec<DecodeTrace>, DecodeError> {
        self.check_inputs(pyramid, embeds)?;
        let cfg = self.config();
        let ctx = Ctx { tape, store: self.params(), bound, cfg };
        let ft = tape.input(Arr::from_array2(embeds.embeddings()));
        let tv = tape.input(Arr::from_array2(projection));

        let mut dims = Vec::with_capacity(NUM_STAGES);
        let mut lvl_tok = Vec::with_capacity(NUM_STAGES);
        for lvl in 1..=NUM_STAGES {
            let arr = pyramid.level(lvl);
            let (_, h, w) = arr.dim();
            dims.push((h, w));
            let v = tape.input(Arr::from_array3(arr));
            lvl_tok.push(tape.to_tokens(v));
        }
        let proj_tok: Vec<Var> = (1..=NUM_STAGES)
            .map(|stage| ctx.lin(&format!("stage{stage}.proj"), lvl_tok[stage - 1]))
            .collect();

        let (h1, w1) = dims[0];
        let input_h = h1 * self.level1_stride();
        let input_w = w1 * self.level1_stride();
        let (h5, w5) = dims[4];

        let mut traces: Vec<DecodeTrace> = Vec::with_capacity(cfg.iterations);
        let mut fused3_cache: Option<Var> = None;

        for t in 1..=cfg.iterations {
            let mut guidance: Option<GuidanceVars> = None;
            if t >= 2 && (cfg.use_correlation || cfg.use_object_repr) {
                guidance = Some(topdown(&ctx, traces.last().expect("previous trace"), lvl_tok[4], ft, tv, (h5, w5)));
            }
            let remod_for = |stage: usize| -> Option<Var> {
                guidance.as_ref().and_then(|g| g.remod.get(&stage).copied())
            };

            let start_stage = if t == 1 { NUM_STAGES } else { ITER_ENTRY_STAGE };
            let mut out_tok: Vec<Option<Var>> = vec![None; NUM_STAGES];
            let mut out_chw: Vec<Option<Var>> = vec![None; NUM_STAGES];
            if t >= 2 {
                let prev = traces.last().expect("previous trace");
                for s in (ITER_ENTRY_STAGE + 1)..=NUM_STAGES {
                    out_tok[s - 1] = Some(prev.stage_tokens[s - 1]);
                    out_chw[s - 1] = Some(prev.stage_chw[s - 1]);
                }
            }

            let mut edge_logits = BTreeMap::new();
            let mut depth_logits = BTreeMap::new();
            let mut edge_stem = BTreeMap::new();
            let mut depth_stem = BTreeMap::new();

            for stage in (1..=start_stage).rev() {
                let (h, w) = dims[stage - 1];
                let fused = if stage == NUM_STAGES {
                    proj_tok[stage - 1]
                } else if t >= 2 && stage == ITER_ENTRY_STAGE {
                    *fused3_cache.as_ref().expect("stage-3 fused input cached in iteration 1")
                } else {
                    let deeper = out_chw[stage].expect("deeper stage computed");
                    let up = tape.bilinear_resize(deeper, h, w);
                    tape.add(proj_tok[stage - 1], tape.to_tokens(up))
                };
                if t == 1 && stage == ITER_ENTRY_STAGE {
                    fused3_cache = Some(fused);
                }

                let (mut y, _wb) = sga(&ctx, stage, fused, (h, w), ft, remod_for(stage), t)?;

                if cfg.se_stages.contains(&stage) && cfg.structure_active() {
                    let st = run_structure(&ctx, stage, y, h, w);
                    if let Some(e) = &st.edge {
                        edge_logits.insert(stage, e.logits);
                        edge_stem.insert(stage, e.stem_chw);
                    }
                    if let Some(d) = &st.depth {
                        depth_logits.insert(stage, d.logits);
                        depth_stem.insert(stage, d.stem_chw);
                    }
                    let fe = st.edge.as_ref().map(|b| b.stem_tok);
                    let fd = st.depth.as_ref().map(|b| b.stem_tok);
                    y = match cfg.se_fusion {
                        SeFusion::Sea => sea(&ctx, stage, y, (h, w), fe, fd),
                        SeFusion::Addition => addition_fusion(&ctx, stage, y, fe, fd),
                    };
                }

                out_tok[stage - 1] = Some(y);
                out_chw[stage - 1] = Some(tape.to_chw(y, h, w));
            }

            let seg_tok = ctx.lin("seg.head", out_tok[0].expect("stage 1 output"));
            let seg_logits_l1 = tape.to_chw(seg_tok, h1, w1);
            let seg_logits_full = tape.bilinear_resize(seg_logits_l1, input_h, input_w);
            let seg_prob_full = tape.sigmoid(seg_logits_full);

            traces.push(DecodeTrace {
                iteration_index: t,
                stage_chw: out_chw.into_iter().map(|v| v.expect("stage output")).collect(),
                stage_tokens: out_tok.into_iter().map(|v| v.expect("stage output")).collect(),
                stage_dims: dims.clone(),
                seg_logits_l1,
                seg_logits_full,
                seg_prob_full,
                edge_logits,
                depth_logits,
                edge_stem,
                depth_stem,
                correlation: guidance.as_ref().map(|g| g.correlation),
                object_repr: guidance.as_ref().map(|g| g.object_repr),
                remod: guidance.as_ref().map(|g| g.remod.clone()).unwrap_or_default(),
                degenerate_pool: guidance.as_ref().map(|g| g.degenerate).unwrap_or(false),
            });
        }
        Ok(traces)
    }

    /// Extracts plain-array states from traced outputs.
    pub fn extract_states(&self, tape: &Tape, traces: &[DecodeTrace]) -> Vec<DecodeState> {
        traces
            .iter()
            .map(|tr| {
                let to2 = |v: Var| -> Array2<f64> {
                    let a = tape.value(v);
                    let (_, h, w) = a.dims3();
                    Array2::from_shape_vec((h, w), a.into_data()).expect("shape")
                };
                DecodeState {
                    iteration_index: tr.iteration_index,
                    stage_features: tr.stage_chw.iter().map(|&v| tape.value(v).to_array3()).collect(),
                    seg_logits: tape.value(tr.seg_logits_l1).to_array3(),
                    seg_prob: to2(tr.seg_prob_full),
                    edge_logits: tr.edge_logits.iter().map(|(&s, &v)| (s, to2(v))).collect(),
                    depth_logits: tr.depth_logits.iter().map(|(&s, &v)| (s, to2(v))).collect(),
                    edge_stem: tr.edge_stem.iter().map(|(&s, &v)| (s, tape.value(v).to_array3())).collect(),
                    depth_stem: tr.depth_stem.iter().map(|(&s, &v)| (s, tape.value(v).to_array3())).collect(),
                    correlation: tr.correlation.map(|v| tape.value(v).to_array1()),
                    object_repr: tr.object_repr.map(|v| tape.value(v).to_array1()),
                    degenerate_pool: tr.degenerate_pool,
                }
            })
            .collect()
    }

    /// Runs all T iterations and returns plain-array states.
    pub fn decode(
        &self,
        pyramid: &FeaturePyramid,
        embeds: &ClassEmbeddingSet,
        projection: &Array2<f64>,
    ) -> Result<Vec<DecodeState>, DecodeError> {
        let tape = Tape::new();
        let bound = BoundParams::bind(self.params(), &tape, false);
        let traces = self.decode_traced(&tape, &bound, pyramid, embeds, projection)?;
        Ok(self.extract_states(&tape, &traces))
    }

    /// Standalone SGA application to one stage feature already at
    /// decoder width.
    pub fn sga_forward(
        &self,
        stage: usize,
        feature: &Array3<f64>,
        embeds: &ClassEmbeddingSet,
        remod: Option<&Array2<f64>>,
    ) -> Result<Array3<f64>, DecodeError> {
        let (out, _) = self.sga_apply(stage, feature, embeds, remod)?;
        Ok(out)
    }

    /// SGA application that also reports the guidance tensors.
    pub fn sga_guidance(
        &self,
        stage: usize,
        feature: &Array3<f64>,
        embeds: &ClassEmbeddingSet,
        remod: Option<&Array2<f64>>,
    ) -> Result<GuidanceTensors, DecodeError> {
        let (_, g) = self.sga_apply(stage, feature, embeds, remod)?;
        g.ok_or_else(|| DecodeError::InvalidConfig("semantic guidance is disabled".into()))
    }

    fn sga_apply(
        &self,
        stage: usize,
        feature: &Array3<f64>,
        embeds: &ClassEmbeddingSet,
        remod: Option<&Array2<f64>>,
    ) -> Result<(Array3<f64>, Option<GuidanceTensors>), DecodeError> {
        if embeds.num_classes() == 0 {
            return Err(DecodeError::NoClasses);
        }
        if embeds.dim() != self.spec().embed_dim {
            return Err(DecodeError::EmbedDimMismatch { expected: self.spec().embed_dim, got: embeds.dim() });
        }
        let (c, h, w) = feature.dim();
        if c != self.config().width {
            return Err(DecodeError::SpatialMismatch(format!(
                "stage feature must be at decoder width {}, got {c}",
                self.config().width
            )));
        }
        if let Some(r) = remod {
            if r.dim() != (h, w) {
                return Err(DecodeError::SpatialMismatch(format!(
                    "remod map {:?} does not match stage resolution ({h}, {w})",
                    r.dim()
                )));
            }
        }
        let tape = Tape::new();
        let bound = BoundParams::bind(self.params(), &tape, false);
        let ctx = Ctx { tape: &tape, store: self.params(), bound: &bound, cfg: self.config() };
        let x_tok = tape.to_tokens(tape.input(Arr::from_array3(feature)));
        let ft = tape.input(Arr::from_array2(embeds.embeddings()));
        let remod_var = remod.map(|r| {
            let flat: Vec<f64> = r.iter().copied().collect();
            tape.input(Arr::from_vec(&[h * w], flat))
        });
        let (y, wb) = sga(&ctx, stage, x_tok, (h, w), ft, remod_var, 1)?;
        let out = tape.value(tape.to_chw(y, h, w)).to_array3();
        let guidance = wb.map(|wbv| {
            let base = tape.value(wbv);
            let gt = {
                let g = ctx.lin(&format!("stage{stage}.sga.guide"), ft);
                tape.value(g).to_array2()
            };
            GuidanceTensors {
                base_weight: Array2::from_shape_vec((h, w), base.into_data()).expect("shape"),
                remod_weight: remod.cloned(),
                class_guidance: gt,
            }
        });
        Ok((out, guidance))
    }

    /// Standalone SEA application.
    pub fn sea_forward(
        &self,
        stage: usize,
        feature: &Array3<f64>,
        edge_feat: &Array3<f64>,
        depth_feat: &Array3<f64>,
    ) -> Result<Array3<f64>, DecodeError> {
        let (c, h, w) = feature.dim();
        if edge_feat.dim() != (c, h, w) || depth_feat.dim() != (c, h, w) {
            return Err(DecodeError::SpatialMismatch(
                "edge/depth stem features must match the stage feature shape".into(),
            ));
        }
        if !self.config().se_stages.contains(&stage) {
            return Err(DecodeError::StageNotInSe { stage });
        }
        let tape = Tape::new();
        let bound = BoundParams::bind(self.params(), &tape, false);
        let ctx = Ctx { tape: &tape, store: self.params(), bound: &bound, cfg: self.config() };
        let x = tape.to_tokens(tape.input(Arr::from_array3(feature)));
        let fe = tape.to_tokens(tape.input(Arr::from_array3(edge_feat)));
        let fd = tape.to_tokens(tape.input(Arr::from_array3(depth_feat)));
        let y = sea(&ctx, stage, x, (h, w), Some(fe), Some(fd));
        Ok(tape.value(tape.to_chw(y, h, w)).to_array3())
    }

    /// Standalone structure branch application.
    pub fn structure_branch(
        &self,
        stage: usize,
        feature: &Array3<f64>,
    ) -> Result<StructureOutputs, DecodeError> {
        if !self.config().se_stages.contains(&stage) {
            return Err(DecodeError::StageNotInSe { stage });
        }
        let (c, h, w) = feature.dim();
        if c != self.config().width {
            return Err(DecodeError::SpatialMismatch(format!(
                "stage feature must be at decoder width {}, got {c}",
                self.config().width
            )));
        }
        let tape = Tape::new();
        let bound = BoundParams::bind(self.params(), &tape, false);
        let ctx = Ctx { tape: &tape, store: self.params(), bound: &bound, cfg: self.config() };
        let x_tok = tape.to_tokens(tape.input(Arr::from_array3(feature)));
        let st = run_structure(&ctx, stage, x_tok, h, w);
        let to2 = |v: Var| {
            let a = tape.value(v);
            let (_, hh, ww) = a.dims3();
            Array2::from_shape_vec((hh, ww), a.into_data()).expect("shape")
        };
        Ok(StructureOutputs {
            edge_stem: st.edge.as_ref().map(|b| tape.value(b.stem_chw).to_array3()),
            depth_stem: st.depth.as_ref().map(|b| tape.value(b.stem_chw).to_array3()),
            edge_logits: st.edge.as_ref().map(|b| to2(b.logits)),
            depth_logits: st.depth.as_ref().map(|b| to2(b.logits)),
        })
    }

    /// Standalone top-down guidance from a completed state.
    pub fn build_topdown_guidance(
        &self,
        prev: &DecodeState,
        pyramid: &FeaturePyramid,
        embeds: &ClassEmbeddingSet,
        projection: &Array2<f64>,
    ) -> Result<TopdownGuidance, DecodeError> {
        self.check_inputs(pyramid, embeds)?;
        if !self.config().use_correlation && !self.config().use_object_repr {
            return Err(DecodeError::InvalidConfig(
                "both correlation and object-repr cues are disabled".into(),
            ));
        }
        if prev.stage_features.len() != NUM_STAGES {
            return Err(DecodeError::BadPrevState("missing stage features".into()));
        }
        let tape = Tape::new();
        let bound = BoundParams::bind(self.params(), &tape, false);
        let ctx = Ctx { tape: &tape, store: self.params(), bound: &bound, cfg: self.config() };
        let ft = tape.input(Arr::from_array2(embeds.embeddings()));
        let tv = tape.input(Arr::from_array2(projection));
        let l5 = pyramid.level(5);
        let (_, h5, w5) = l5.dim();
        let f5_tok = tape.to_tokens(tape.input(Arr::from_array3(l5)));

        // Rebuild a minimal trace view from the plain state.
        let mut stage_tokens = Vec::with_capacity(NUM_STAGES);
        let mut stage_chw = Vec::with_capacity(NUM_STAGES);
        let mut stage_dims = Vec::with_capacity(NUM_STAGES);
        for f in &prev.stage_features {
            let (_, h, w) = f.dim();
            let v = tape.input(Arr::from_array3(f));
            stage_chw.push(v);
            stage_tokens.push(tape.to_tokens(v));
            stage_dims.push((h, w));
        }
        let seg_logits_l1 = tape.input(Arr::from_array3(&prev.seg_logits));
        let trace = DecodeTrace {
            iteration_index: prev.iteration_index,
            stage_chw,
            stage_tokens,
            stage_dims,
            seg_logits_l1,
            seg_logits_full: seg_logits_l1,
            seg_prob_full: seg_logits_l1,
            edge_logits: BTreeMap::new(),
            depth_logits: BTreeMap::new(),
            edge_stem: BTreeMap::new(),
            depth_stem: BTreeMap::new(),
            correlation: None,
            object_repr: None,
            remod: BTreeMap::new(),
            degenerate_pool: false,
        };
        let g = topdown(&ctx, &trace, f5_tok, ft, tv, (h5, w5));
        let remod = g
            .remod
            .iter()
            .map(|(&stage, &v)| {
                let (h, w) = trace.stage_dims[stage - 1];
                let a = tape.value(v);
                (stage, Array2::from_shape_vec((h, w), a.into_data()).expect("shape"))
            })
            .collect();
        Ok(TopdownGuidance {
            correlation: tape.value(g.correlation).to_array1(),
            object_repr: tape.value(g.object_repr).to_array1(),
            remod,
            degenerate: g.degenerate,
        })
    }

    /// Count of trainable scalars (the decoder owns all of them).
    pub fn trainable_scalar_count(&self) -> usize {
        self.params().scalar_count()
    }
}

/// Trainable scalar count for a hypothetical configuration without
/// keeping the buffers around (budget arithmetic at full scale).
pub fn trainable_count_for(cfg: &DecoderConfig, spec: &BackboneSpec) -> usize {
    init_params(cfg, spec, 0).scalar_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::CLIP_CONVNEXT_L_FROZEN_PARAMS;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            embed_dim: 8,
            stage_channels: [4, 5, 6, 7],
            stage_strides: [2, 4, 8, 16],
            frozen: true,
        }
    }

    fn tiny_config() -> DecoderConfig {
        DecoderConfig { width: 8, heads: 2, ..DecoderConfig::default() }
    }

    fn tiny_decoder() -> Decoder {
        Decoder::new(tiny_config(), &tiny_spec(), 42).unwrap()
    }

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_pyramid(spec: &BackboneSpec, h5: usize, w5: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        let ch = spec.stage_channels;
        let levels = vec![
            rand3(rng, ch[0], 16 * h5, 16 * w5),
            rand3(rng, ch[0], 8 * h5, 8 * w5),
            rand3(rng, ch[1], 4 * h5, 4 * w5),
            rand3(rng, ch[2], 2 * h5, 2 * w5),
            rand3(rng, ch[3], h5, w5),
        ];
        FeaturePyramid::new(levels).unwrap()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((k, d), |_| rng.gen_range(-1.0..1.0));
        for mut r in m.rows_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.mapv_inplace(|v| v / n);
        }
        m
    }

    fn embeds(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ClassEmbeddingSet {
        let names = (0..k).map(|i| format!("class{i}")).collect();
        ClassEmbeddingSet::new(names, unit_rows(rng, k, d)).unwrap()
    }

    fn rand_proj(rng: &mut ChaCha8Rng, d: usize, c5: usize) -> Array2<f64> {
        Array2::from_shape_fn((d, c5), |_| rng.gen_range(-0.3..0.3))
    }

    #[test]
    fn single_class_base_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = tiny_decoder();
        let x = rand3(&mut rng, 8, 3, 4);
        let e = embeds(&mut rng, 1, 8);
        let g = dec.sga_guidance(2, &x, &e, None).unwrap();
        assert!(g.base_weight.iter().all(|&v| v == 1.0), "softmax over one class is 1");
    }

    #[test]
    fn remod_of_ones_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = tiny_decoder();
        let x = rand3(&mut rng, 8, 4, 4);
        let e = embeds(&mut rng, 3, 8);
        let plain = dec.sga_forward(1, &x, &e, None).unwrap();
        let ones = Array2::from_elem((4, 4), 1.0);
        let remod = dec.sga_forward(1, &x, &e, Some(&ones)).unwrap();
        assert_eq!(plain, remod);
    }

    #[test]
    fn base_weight_matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = tiny_decoder();
        let (c, h, w) = (8usize, 2usize, 2usize);
        let x = rand3(&mut rng, c, h, w);
        let e = embeds(&mut rng, 2, 8);
        let got = dec.sga_guidance(3, &x, &e, None).unwrap();

        // Hand-rolled per-pixel softmax oracle over explicit loops.
        let p = dec.params();
        let get = |name: &str| p.entry(p.idx(name)).data.clone();
        let gamma = get("stage3.sga.norm.gamma");
        let beta = get("stage3.sga.norm.beta");
        let qw = get("stage3.sga.q.w");
        let qb = get("stage3.sga.q.b");
        let gw = get("stage3.sga.guide.w");
        let n = h * w;
        // tokens (n x c)
        let mut tok = vec![0.0; n * c];
        for ch in 0..c {
            for (pix, t) in tok.chunks_mut(c).enumerate() {
                t[ch] = x[(ch, pix / w, pix % w)];
            }
        }
        // per-channel standardization over tokens
        let mut xn = vec![0.0; n * c];
        for ch in 0..c {
            let mean: f64 = (0..n).map(|i| tok[i * c + ch]).sum::<f64>() / n as f64;
            let var: f64 =
                (0..n).map(|i| (tok[i * c + ch] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for i in 0..n {
                xn[i * c + ch] = gamma[ch] * ((tok[i * c + ch] - mean) * inv) + beta[ch];
            }
        }
        // q = xn * qw + qb ; guidance = ft * gw
        let d = 8;
        let ft = e.embeddings();
        let mut expected = vec![0.0; n];
        for i in 0..n {
            let mut scores = [0.0f64; 2];
            for (k, score) in scores.iter_mut().enumerate() {
                let mut s = 0.0;
                for cc in 0..c {
                    let mut qv = qb[cc];
                    for a in 0..c {
                        qv += xn[i * c + a] * qw[a * c + cc];
                    }
                    let mut gv = 0.0;
                    for a in 0..d {
                        gv += ft[(k, a)] * gw[a * c + cc];
                    }
                    s += qv * gv;
                }
                *score = s / (c as f64).sqrt();
            }
            let m = scores[0].max(scores[1]);
            let e0 = (scores[0] - m).exp();
            let e1 = (scores[1] - m).exp();
            expected[i] = e0.max(e1) / (e0 + e1);
        }
        for i in 0..n {
            let gotv = got.base_weight[(i / w, i % w)];
            assert!((gotv - expected[i]).abs() < 1e-9, "pixel {i}: {gotv} vs {}", expected[i]);
        }
    }

    #[test]
    fn sea_alpha_endpoint_ignores_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dec = tiny_decoder();
        let idx = dec.params().idx("stage2.sea.alpha");
        for v in dec.params_mut().entry_mut(idx).data.iter_mut() {
            *v = 40.0; // alpha -> 1
        }
        let x = rand3(&mut rng, 8, 3, 3);
        let fe = rand3(&mut rng, 8, 3, 3);
        let fd1 = rand3(&mut rng, 8, 3, 3);
        let fd2 = rand3(&mut rng, 8, 3, 3);
        let o1 = dec.sea_forward(2, &x, &fe, &fd1).unwrap();
        let o2 = dec.sea_forward(2, &x, &fe, &fd2).unwrap();
        let diff = o1.iter().zip(o2.iter()).map(|(&a, &b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "depth branch must be inert at alpha=1, diff {diff}");
    }

    #[test]
    fn sea_equal_inputs_alpha_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dec = tiny_decoder();
        let x = rand3(&mut rng, 8, 3, 3);
        let f = rand3(&mut rng, 8, 3, 3);
        let idx = dec.params().idx("stage1.sea.alpha");
        dec.params_mut().entry_mut(idx).data.fill(-2.0);
        let o1 = dec.sea_forward(1, &x, &f, &f).unwrap();
        dec.params_mut().entry_mut(idx).data.fill(1.3);
        let o2 = dec.sea_forward(1, &x, &f, &f).unwrap();
        let diff = o1.iter().zip(o2.iter()).map(|(&a, &b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "identical branches must make alpha inert, diff {diff}");
    }

    #[test]
    fn sea_matches_dense_attention_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dec = tiny_decoder();
        let (c, h, w) = (8usize, 2usize, 2usize);
        let x = rand3(&mut rng, c, h, w);
        let fe = rand3(&mut rng, c, h, w);
        let fd = rand3(&mut rng, c, h, w);
        let got = dec.sea_forward(3, &x, &fe, &fd).unwrap();

        // Explicit two-branch attention reference.
        let p = dec.params();
        let get = |name: &str| p.entry(p.idx(name)).data.clone();
        let to_tok = |a: &Array3<f64>| {
            let mut t = vec![0.0; h * w * c];
            for ch in 0..c {
                for pix in 0..h * w {
                    t[pix * c + ch] = a[(ch, pix / w, pix % w)];
                }
            }
            t
        };
        let n = h * w;
        let tok = to_tok(&x);
        let gamma = get("stage3.sea.norm.gamma");
        let beta = get("stage3.sea.norm.beta");
        let mut xn = vec![0.0; n * c];
        for ch in 0..c {
            let mean: f64 = (0..n).map(|i| tok[i * c + ch]).sum::<f64>() / n as f64;
            let var: f64 =
                (0..n).map(|i| (tok[i * c + ch] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for i in 0..n {
                xn[i * c + ch] = gamma[ch] * ((tok[i * c + ch] - mean) * inv) + beta[ch];
            }
        }
        let matmul_bias = |src: &[f64], wname: &str, bname: Option<&str>| -> Vec<f64> {
            let wv = get(wname);
            let bv = bname.map(get);
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                for cc in 0..c {
                    let mut acc = bv.as_ref().map(|b| b[cc]).unwrap_or(0.0);
                    for a in 0..c {
                        acc += src[i * c + a] * wv[a * c + cc];
                    }
                    out[i * c + cc] = acc;
                }
            }
            out
        };
        let q = matmul_bias(&xn, "stage3.sea.q.w", Some("stage3.sea.q.b"));
        let branch = |srcmap: &Array3<f64>| -> Vec<Vec<f64>> {
            let src = to_tok(srcmap);
            let k = matmul_bias(&src, "stage3.sea.k.w", None);
            let v = matmul_bias(&src, "stage3.sea.v.w", Some("stage3.sea.v.b"));
            let heads = 2;
            let dh = c / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            (0..heads)
                .map(|hh| {
                    let off = hh * dh;
                    let mut out = vec![0.0; n * dh];
                    for i in 0..n {
                        let mut scores = vec![0.0; n];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for a in 0..dh {
                                acc += q[i * c + off + a] * k[j * c + off + a];
                            }
                            *s = acc * scale;
                        }
                        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut den = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - m).exp();
                            den += *s;
                        }
                        for a in 0..dh {
                            let mut acc = 0.0;
                            for (j, s) in scores.iter().enumerate() {
                                acc += s / den * v[j * c + off + a];
                            }
                            out[i * dh + a] = acc;
                        }
                    }
                    out
                })
                .collect()
        };
        let eh = branch(&fe);
        let dhh = branch(&fd);
        let alpha_raw = get("stage3.sea.alpha");
        let heads = 2;
        let dh = c / heads;
        let mut merged = vec![0.0; n * c];
        for hh in 0..heads {
            let a = 1.0 / (1.0 + (-alpha_raw[hh]).exp());
            for i in 0..n {
                for cc in 0..dh {
                    merged[i * c + hh * dh + cc] =
                        a * eh[hh][i * dh + cc] + (1.0 - a) * dhh[hh][i * dh + cc];
                }
            }
        }
        let out = matmul_bias(&merged, "stage3.sea.out.w", Some("stage3.sea.out.b"));
        for i in 0..n {
            for cc in 0..c {
                let expected = tok[i * c + cc] + out[i * c + cc];
                let gotv = got[(cc, i / w, i % w)];
                assert!(
                    (gotv - expected).abs() < 1e-9,
                    "mismatch at token {i} channel {cc}: {gotv} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn sea_rejects_spatial_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = tiny_decoder();
        let x = rand3(&mut rng, 8, 3, 3);
        let bad = rand3(&mut rng, 8, 2, 3);
        assert!(matches!(
            dec.sea_forward(1, &x, &bad, &x),
            Err(DecodeError::SpatialMismatch(_))
        ));
    }

    #[test]
    fn structure_branch_zero_input_gives_head_bias() {
        let mut dec = tiny_decoder();
        let idx = dec.params().idx("stage2.edge.head.b");
        dec.params_mut().entry_mut(idx).data[0] = 0.37;
        let x = Array3::zeros((8, 6, 6));
        let out = dec.structure_branch(2, &x).unwrap();
        let e = out.edge_logits.unwrap();
        assert_eq!(e.dim(), (6, 6));
        assert!(e.iter().all(|&v| v == 0.37));
        assert!(out.depth_logits.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structure_branch_requires_se_stage() {
        let dec = tiny_decoder();
        let x = Array3::zeros((8, 4, 4));
        assert!(matches!(
            dec.structure_branch(5, &x),
            Err(DecodeError::StageNotInSe { stage: 5 })
        ));
    }

    #[test]
    fn decode_t1_has_single_state_without_guidance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = tiny_spec();
        let cfg = DecoderConfig { iterations: 1, ..tiny_config() };
        let dec = Decoder::new(cfg, &spec, 1).unwrap();
        let pyr = rand_pyramid(&spec, 1, 1, &mut rng);
        let e = embeds(&mut rng, 2, 8);
        let proj = rand_proj(&mut rng, 8, 7);
        let states = dec.decode(&pyr, &e, &proj).unwrap();
        assert_eq!(states.len(), 1);
        assert!(states[0].correlation.is_none());
        assert!(states[0].object_repr.is_none());
    }

    #[test]
    fn decode_t2_reuses_deep_stages_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = tiny_spec();
        let dec = Decoder::new(tiny_config(), &spec, 1).unwrap();
        let pyr = rand_pyramid(&spec, 1, 1, &mut rng);
        let e = embeds(&mut rng, 3, 8);
        let proj = rand_proj(&mut rng, 8, 7);
        let states = dec.decode(&pyr, &e, &proj).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(states[0].stage_features[3], states[1].stage_features[3]);
        assert_eq!(states[0].stage_features[4], states[1].stage_features[4]);
        assert!(states[1].correlation.is_some());
        assert!(states[1].object_repr.is_some());
        // stages inside the iteration entry do change
        assert_ne!(states[0].stage_features[0], states[1].stage_features[0]);
    }

    #[test]
    fn decode_desk_scale_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = BackboneSpec::desk_stub();
        let cfg = DecoderConfig { width: 32, heads: 4, ..DecoderConfig::default() };
        let dec = Decoder::new(cfg, &spec, 3).unwrap();
        let pyr = rand_pyramid(&spec, 2, 2, &mut rng);
        let e = embeds(&mut rng, 4, 64);
        let proj = rand_proj(&mut rng, 64, 192);
        let states = dec.decode(&pyr, &e, &proj).unwrap();
        for s in &states {
            assert!(s.seg_prob.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
            assert!(s.seg_logits.iter().all(|v| v.is_finite()));
            for m in s.edge_logits.values().chain(s.depth_logits.values()) {
                assert!(m.iter().all(|v| v.is_finite()));
            }
        }
        // 64x64 input expected from the level-1 stride
        assert_eq!(states[0].seg_prob.dim(), (64, 64));
    }

    #[test]
    fn guidance_uniform_mask_is_global_average_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = tiny_spec();
        let dec = Decoder::new(tiny_config(), &spec, 2).unwrap();
        let pyr = rand_pyramid(&spec, 2, 2, &mut rng);
        let e = embeds(&mut rng, 3, 8);
        let proj = rand_proj(&mut rng, 8, 7);
        let states = dec.decode(&pyr, &e, &proj).unwrap();
        let mut prev = states[0].clone();
        // saturate the logits so sigmoid is exactly 1 everywhere
        prev.seg_logits.fill(800.0);
        let g = dec.build_topdown_guidance(&prev, &pyr, &e, &proj).unwrap();
        let l5 = pyr.level(5);
        let n = (l5.dim().1 * l5.dim().2) as f64;
        for (ch, &got) in g.object_repr.iter().enumerate() {
            let mean: f64 = l5.index_axis(ndarray::Axis(0), ch).iter().sum::<f64>() / n;
            assert!((got - mean).abs() < 1e-12, "channel {ch}: {got} vs {mean}");
        }
        assert!(!g.degenerate);
        assert_eq!(g.remod.len(), ITER_ENTRY_STAGE);

        // all-zero mask falls back to global average pooling, flagged
        prev.seg_logits.fill(-800.0);
        let g0 = dec.build_topdown_guidance(&prev, &pyr, &e, &proj).unwrap();
        assert!(g0.degenerate);
        for (ch, &got) in g0.object_repr.iter().enumerate() {
            let mean: f64 = l5.index_axis(ndarray::Axis(0), ch).iter().sum::<f64>() / n;
            assert!((got - mean).abs() < 1e-12, "degenerate channel {ch}");
        }
    }

    #[test]
    fn remod_maps_lie_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = tiny_spec();
        let dec = Decoder::new(tiny_config(), &spec, 2).unwrap();
        let pyr = rand_pyramid(&spec, 1, 1, &mut rng);
        let e = embeds(&mut rng, 3, 8);
        let proj = rand_proj(&mut rng, 8, 7);
        let states = dec.decode(&pyr, &e, &proj).unwrap();
        let g = dec.build_topdown_guidance(&states[0], &pyr, &e, &proj).unwrap();
        for (stage, m) in &g.remod {
            assert!((1..=ITER_ENTRY_STAGE).contains(stage));
            assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn config_validation() {
        let spec = tiny_spec();
        let bad = DecoderConfig { iterations: 0, ..tiny_config() };
        assert!(Decoder::new(bad, &spec, 0).is_err());
        let bad = DecoderConfig { width: 9, heads: 2, ..tiny_config() };
        assert!(Decoder::new(bad, &spec, 0).is_err());
        let mut bad = tiny_config();
        bad.se_stages = [0].into_iter().collect();
        assert!(Decoder::new(bad, &spec, 0).is_err());
    }

    #[test]
    fn nan_feature_raises_numerical_fault() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dec = tiny_decoder();
        let mut x = rand3(&mut rng, 8, 2, 2);
        x[(0, 0, 0)] = f64::NAN;
        let e = embeds(&mut rng, 2, 8);
        match dec.sga_forward(4, &x, &e, None) {
            Err(DecodeError::NumericalFault { stage: 4, iteration: 1 }) => {}
            other => panic!("expected NumericalFault, got {other:?}"),
        }
    }

    #[test]
    fn full_scale_trainable_budget_below_two_percent() {
        let cfg = DecoderConfig::default();
        let spec = BackboneSpec::clip_convnext_large();
        let trainable = trainable_count_for(&cfg, &spec) as f64;
        let total = trainable + CLIP_CONVNEXT_L_FROZEN_PARAMS as f64;
        let ratio = trainable / total;
        assert!(ratio < 0.02, "trainable ratio {ratio:.4} must stay below 2%");
        assert!(trainable < 8_000_000.0, "decoder should stay within the 7M budget, got {trainable}");
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let spec = tiny_spec();
        let mut dec = Decoder::new(tiny_config(), &spec, 1).unwrap();
        let other = Decoder::new(tiny_config(), &spec, 9).unwrap();
        // same layout loads fine
        dec.load_params(ParamStore::from_entries(other.params().entries().to_vec())).unwrap();
        // different layout is rejected
        let bigger = Decoder::new(DecoderConfig { width: 16, heads: 2, ..tiny_config() }, &spec, 1)
            .unwrap();
        assert!(dec
            .load_params(ParamStore::from_entries(bigger.params().entries().to_vec()))
            .is_err());
    }
}
