//! Deterministic stub backbone.
//!
//! Text embeddings are a seeded random projection of a hashed token bag;
//! the visual encoder is a four-stage strided (patchify) convolution
//! pyramid with fixed seeded weights. Optionally a planted class signal
//! couples image color statistics to the bare class-name text
//! embeddings, so classification oracles have ground truth to find.

use super::{Backbone, BackboneError, BackboneSpec, FeaturePyramid, TextEncoding, TextWarning};
use crate::autograd::kernels;
use crate::util::{derived_rng, fnv1a64, hash_named_buffers, upsample2x_chw};
use ndarray::{Array2, Array3};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

const TOKEN_DIM: usize = 256;
const TOKEN_LIMIT: usize = 77;

/// Canonical tint directions for a planted class set. Directions are
/// zero-sum across channels (orthogonal to gray, so luminance texture
/// cannot activate them) and evenly spaced around the hue plane by
/// sorted class rank with a small name-derived jitter, so any class set
/// gets well-separated signatures. The synthetic toy set uses the same
/// palette to tint object pixels, which is what makes the signal
/// recoverable. Returned in input order.
pub fn planted_palette(class_names: &[String]) -> Vec<[f64; 3]> {
    // orthonormal basis of the zero-sum plane
    const B1: [f64; 3] = [
        std::f64::consts::FRAC_1_SQRT_2,
        -std::f64::consts::FRAC_1_SQRT_2,
        0.0,
    ];
    let b2 = [1.0 / 6.0f64.sqrt(), 1.0 / 6.0f64.sqrt(), -2.0 / 6.0f64.sqrt()];
    let mut sorted: Vec<&String> = class_names.iter().collect();
    sorted.sort();
    sorted.dedup();
    let k = sorted.len().max(1) as f64;
    let theta_of = |name: &str| -> f64 {
        let rank = sorted.iter().position(|n| n.as_str() == name).expect("member") as f64;
        let mut rng = derived_rng(fnv1a64(name.as_bytes()), "planted-hue");
        let jitter: f64 = rng.gen_range(-0.2..0.2) * std::f64::consts::TAU / k;
        std::f64::consts::TAU * rank / k + jitter
    };
    class_names
        .iter()
        .map(|name| {
            let theta = theta_of(name);
            let (s, c) = theta.sin_cos();
            [c * B1[0] + s * b2[0], c * B1[1] + s * b2[1], c * B1[2] + s * b2[2]]
        })
        .collect()
}

struct ConvStage {
    weight: Vec<f64>, // co * ci * k * k
    bias: Vec<f64>,
    ci: usize,
    co: usize,
    k: usize,
}

struct PlantedClass {
    color_dir: [f64; 3],
    feat_dir: Vec<f64>, // unit vector in stage-5 channel space
}

pub struct StubBackbone {
    spec: BackboneSpec,
    seed: u64,
    text_proj: Array2<f64>, // (TOKEN_DIM, embed_dim)
    stages: Vec<ConvStage>,
    tv: Array2<f64>, // (embed_dim, c5)
    planted: Vec<PlantedClass>,
    planted_gain: f64,
    text_calls: AtomicU64,
}

impl StubBackbone {
    /// Desk-scale stub: D = 64, channels (24, 48, 96, 192), strides
    /// (4, 8, 16, 32), seed default 1337.
    pub fn desk(seed: u64) -> Self {
        Self::with_spec(BackboneSpec::desk_stub(), seed)
    }

    pub fn with_spec(spec: BackboneSpec, seed: u64) -> Self {
        spec.validate().expect("stub backbone spec");
        let mut rng = derived_rng(seed, "stub-text-proj");
        let d = spec.embed_dim;
        let scale = 1.0 / (TOKEN_DIM as f64).sqrt();
        let text_proj = Array2::from_shape_fn((TOKEN_DIM, d), |_| rng.gen_range(-1.0..1.0) * scale);

        let mut stages = Vec::new();
        let mut ci = 3usize;
        let mut prev_stride = 1usize;
        for (i, (&co, &stride)) in spec.stage_channels.iter().zip(&spec.stage_strides).enumerate() {
            let k = stride / prev_stride;
            assert!(k >= 1 && stride % prev_stride == 0, "strides must nest");
            let mut srng = derived_rng(seed, &format!("stub-stage-{i}"));
            let fan_in = (ci * k * k) as f64;
            let wscale = 1.6 / fan_in.sqrt();
            let weight: Vec<f64> =
                (0..co * ci * k * k).map(|_| srng.gen_range(-1.0..1.0) * wscale).collect();
            let bias: Vec<f64> = (0..co).map(|_| srng.gen_range(-0.1..0.1)).collect();
            stages.push(ConvStage { weight, bias, ci, co, k });
            ci = co;
            prev_stride = stride;
        }

        let c5 = spec.top_channels();
        let mut trng = derived_rng(seed, "stub-tv");
        let tv_scale = 0.12 / (c5 as f64).sqrt();
        let tv = Array2::from_shape_fn((d, c5), |_| trng.gen_range(-1.0..1.0) * tv_scale);

        Self {
            spec,
            seed,
            text_proj,
            stages,
            tv,
            planted: Vec::new(),
            planted_gain: 16.0,
            text_calls: AtomicU64::new(0),
        }
    }

    /// Installs a planted class signal: images carrying a class tint
    /// produce stage-5 features whose projection correlates with that
    /// class's bare-name text embedding. The class signatures live in a
    /// reserved block of stage-5 channels that the convolution content
    /// is cleared from, so the readout sees only the planted
    /// activations.
    pub fn with_planted_classes(mut self, class_names: &[String], gain: f64) -> Self {
        let c5 = self.spec.top_channels();
        let reserved = Self::reserved_channels(c5);
        let start = c5 - reserved;
        let mut planted = Vec::new();
        let mut tv = self.tv.clone();
        let palette = planted_palette(class_names);
        for (name, &color_dir) in class_names.iter().zip(&palette) {
            let mut hrng = derived_rng(fnv1a64(name.as_bytes()), "planted-feat");
            let mut feat_dir = vec![0.0f64; c5];
            for v in feat_dir[start..].iter_mut() {
                *v = hrng.gen_range(-1.0..1.0);
            }
            let n = kernels::dot(&feat_dir, &feat_dir).sqrt();
            for v in feat_dir.iter_mut() {
                *v /= n;
            }
            let anchor = self.embed_prompt(name);
            for (r, &a) in anchor.iter().enumerate() {
                for (c, &h) in feat_dir.iter().enumerate() {
                    tv[(r, c)] += a * h;
                }
            }
            planted.push(PlantedClass { color_dir, feat_dir });
        }
        self.tv = tv;
        self.planted = planted;
        self.planted_gain = gain;
        self
    }

    fn reserved_channels(c5: usize) -> usize {
        (c5 / 4).clamp(1, 32)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn tokenize(prompt: &str) -> Vec<String> {
        prompt
            .split_whitespace()
            .map(|t| {
                t.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_ascii_lowercase()
            })
            .filter(|t| !t.is_empty())
            .collect()
    }

    /// Raw single-prompt embedding (used internally; no call counting).
    fn embed_prompt(&self, prompt: &str) -> Vec<f64> {
        let tokens = Self::tokenize(prompt);
        let mut bag = vec![0.0f64; TOKEN_DIM];
        for tok in tokens.iter().take(TOKEN_LIMIT) {
            let h = fnv1a64(tok.as_bytes());
            let idx = (h % TOKEN_DIM as u64) as usize;
            let sign = if (h >> 17) & 1 == 1 { 1.0 } else { -1.0 };
            bag[idx] += sign;
        }
        let d = self.spec.embed_dim;
        let mut out = vec![0.0f64; d];
        for (i, &b) in bag.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.text_proj.row(i)) {
                *o += b * p;
            }
        }
        let norm = kernels::dot(&out, &out).sqrt();
        if norm > 1e-12 {
            for v in out.iter_mut() {
                *v /= norm;
            }
        } else {
            // Hash-bag collisions cancelling to zero: fall back to a
            // deterministic unit vector so rows stay unit-norm.
            out[0] = 1.0;
        }
        out
    }
}

impl Backbone for StubBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_text(&self, prompts: &[String]) -> Result<TextEncoding, BackboneError> {
        self.text_calls.fetch_add(1, Ordering::Relaxed);
        if prompts.is_empty() {
            return Err(BackboneError::EmptyPrompts);
        }
        let d = self.spec.embed_dim;
        let mut warnings = Vec::new();
        let mut rows = Vec::with_capacity(prompts.len() * d);
        for (i, p) in prompts.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(BackboneError::EmptyPrompt { index: i });
            }
            if Self::tokenize(p).len() > TOKEN_LIMIT {
                warnings.push(TextWarning {
                    prompt_index: i,
                    message: format!("prompt truncated to {TOKEN_LIMIT} tokens"),
                });
            }
            rows.extend_from_slice(&self.embed_prompt(p));
        }
        let embeddings = Array2::from_shape_vec((prompts.len(), d), rows).expect("shape");
        Ok(TextEncoding { embeddings, warnings })
    }

    fn encode_image(&self, image: &Array3<f64>) -> Result<FeaturePyramid, BackboneError> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(BackboneError::DimMismatch { what: "image channels", expected: 3, got: c });
        }
        let multiple = self.spec.stage_strides[3];
        if h % multiple != 0 || w % multiple != 0 {
            return Err(BackboneError::IndivisibleImage { h, w, multiple });
        }

        let mut cur: Vec<f64> = image.as_standard_layout().iter().copied().collect();
        let (mut ch, mut cw) = (h, w);
        let mut levels: Vec<Array3<f64>> = Vec::new();
        for stage in &self.stages {
            let oh = ch / stage.k;
            let ow = cw / stage.k;
            let mut out = vec![0.0; stage.co * oh * ow];
            kernels::conv2d_plane(
                &cur, stage.ci, ch, cw, &stage.weight, &stage.bias, stage.co, stage.k, stage.k,
                stage.k, 0, &mut out,
            );
            for v in out.iter_mut() {
                *v = v.tanh();
            }
            cur = out;
            ch = oh;
            cw = ow;
            levels.push(
                Array3::from_shape_vec((stage.co, ch, cw), cur.clone()).expect("stage shape"),
            );
        }

        if !self.planted.is_empty() {
            let patch = multiple;
            let c5 = self.spec.top_channels();
            let l5 = levels.last_mut().expect("stage 5");
            let (h5, w5) = (h / patch, w / patch);
            // clear the reserved signature block
            let start = c5 - Self::reserved_channels(c5);
            for chn in start..c5 {
                for py in 0..h5 {
                    for px in 0..w5 {
                        l5[(chn, py, px)] = 0.0;
                    }
                }
            }
            // The planted signal responds to local color deviation from
            // the whole-image mean, measured on fine sub-patches and
            // thresholded, so only genuinely tinted regions activate a
            // class signature (the faint opposite deviation that the
            // object induces on the background stays below threshold).
            let mut img_mean = [0.0f64; 3];
            for chn in 0..3 {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += image[(chn, y, x)];
                    }
                }
                img_mean[chn] = acc / (h * w) as f64;
            }
            let sub = (patch / 4).max(1);
            let per_cell = patch / sub;
            let threshold = 0.06;
            for py in 0..h5 {
                for px in 0..w5 {
                    let mut acts = vec![0.0f64; self.planted.len()];
                    for sy in 0..per_cell {
                        for sx in 0..per_cell {
                            let mut rgb = [0.0f64; 3];
                            for chn in 0..3 {
                                let mut acc = 0.0;
                                for y in 0..sub {
                                    for x in 0..sub {
                                        acc += image[(
                                            chn,
                                            py * patch + sy * sub + y,
                                            px * patch + sx * sub + x,
                                        )];
                                    }
                                }
                                rgb[chn] = acc / (sub * sub) as f64;
                            }
                            for (a, class) in acts.iter_mut().zip(&self.planted) {
                                let dot = (rgb[0] - img_mean[0]) * class.color_dir[0]
                                    + (rgb[1] - img_mean[1]) * class.color_dir[1]
                                    + (rgb[2] - img_mean[2]) * class.color_dir[2];
                                *a += (dot - threshold).max(0.0);
                            }
                        }
                    }
                    let norm = (per_cell * per_cell) as f64;
                    for (a, class) in acts.iter().zip(&self.planted) {
                        let amp = a / norm * self.planted_gain;
                        if amp == 0.0 {
                            continue;
                        }
                        for chn in 0..c5 {
                            l5[(chn, py, px)] += amp * class.feat_dir[chn];
                        }
                    }
                }
            }
        }

        let level1 = upsample2x_chw(&levels[0]);
        let mut all = vec![level1];
        all.extend(levels);
        FeaturePyramid::new(all)
    }

    fn projection_matrix(&self) -> &Array2<f64> {
        &self.tv
    }

    fn param_fingerprint(&self) -> String {
        let text = self.text_proj.as_standard_layout().to_owned();
        let tv = self.tv.as_standard_layout().to_owned();
        let mut items: Vec<(String, Vec<f64>)> = vec![
            ("text_proj".into(), text.iter().copied().collect()),
            ("tv".into(), tv.iter().copied().collect()),
        ];
        for (i, s) in self.stages.iter().enumerate() {
            items.push((format!("stage{i}.weight"), s.weight.clone()));
            items.push((format!("stage{i}.bias"), s.bias.clone()));
        }
        hash_named_buffers(items.iter().map(|(n, d)| (n.as_str(), d.as_slice())))
    }

    fn text_encode_count(&self) -> u64 {
        self.text_calls.load(Ordering::Relaxed)
    }
}
