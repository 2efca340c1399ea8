//! Class assignment from the final decode state: the stage-5 feature is
//! masked-average-pooled by the predicted segmentation, projected into
//! the joint space, and matched against the class embeddings by cosine
//! correlation; softmax and argmax give the label.

use crate::backbone::{Backbone, BackboneError, ClassEmbeddingSet, FeaturePyramid};
use crate::decoder::DecodeState;
use crate::util::resize_bilinear_2d;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Softmax temperature for the reported class scores. Classification is
/// not trained, so this only shapes score sharpness; the argmax is
/// invariant to it.
pub const CLASS_TEMPERATURE: f64 = 0.01;
const POOL_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RecognizeError {
    #[error("mask values must lie in [0, 1] (found {0})")]
    MaskOutOfRange(f64),
    #[error("backbone error: {0}")]
    Backbone(#[from] BackboneError),
    #[error("class embedding set is empty")]
    NoClasses,
}

/// Final per-sample prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePrediction {
    /// Segmentation probability at input resolution.
    #[serde(skip)]
    pub seg_prob: Array2<f64>,
    /// Index into the class set (lowest-index tie-break).
    pub class_index: usize,
    /// Softmax over the correlation; sums to 1.
    pub class_scores: Vec<f64>,
    /// Raw cosine correlation against each class embedding.
    pub correlation: Vec<f64>,
    /// Set when the pooled/projected embedding degenerated to zero.
    pub degenerate: bool,
}

/// Mask-weighted spatial mean of a feature map. The mask is bilinearly
/// resized to the feature resolution; an all-zero mask is handled by the
/// epsilon guard and yields the zero vector.
pub fn masked_average_pool(
    feature: &Array3<f64>,
    mask: &Array2<f64>,
) -> Result<Array1<f64>, RecognizeError> {
    for &v in mask.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(RecognizeError::MaskOutOfRange(v));
        }
    }
    let (c, h, w) = feature.dim();
    let m = if mask.dim() == (h, w) { mask.clone() } else { resize_bilinear_2d(mask, h, w) };
    let mass: f64 = m.iter().sum();
    let denom = mass.max(POOL_EPS);
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += feature[(ch, y, x)] * m[(y, x)];
            }
        }
        out[ch] = acc / denom;
    }
    Ok(out)
}

/// Classification core: projects the pooled vector, correlates against
/// the class embeddings, and applies softmax + argmax.
pub fn classify(
    backbone: &dyn Backbone,
    pooled: &Array1<f64>,
    embeds: &ClassEmbeddingSet,
) -> Result<SamplePrediction, RecognizeError> {
    if embeds.num_classes() == 0 {
        return Err(RecognizeError::NoClasses);
    }
    let projected = backbone.project_visual(pooled)?;
    let correlation: Vec<f64> = embeds
        .embeddings()
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(projected.vector.iter()).map(|(&a, &b)| a * b).sum())
        .collect();
    let scaled: Vec<f64> = correlation.iter().map(|v| v / CLASS_TEMPERATURE).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let class_scores: Vec<f64> = exps.iter().map(|v| v / sum).collect();
    let class_index = if projected.degenerate {
        0
    } else {
        argmax_first(&class_scores)
    };
    Ok(SamplePrediction {
        seg_prob: Array2::zeros((0, 0)),
        class_index,
        class_scores,
        correlation,
        degenerate: projected.degenerate,
    })
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Full recognition step from the final decode state.
pub fn predict(
    backbone: &dyn Backbone,
    state: &DecodeState,
    pyramid: &FeaturePyramid,
    embeds: &ClassEmbeddingSet,
) -> Result<SamplePrediction, RecognizeError> {
    let pooled = masked_average_pool(pyramid.level(5), &state.seg_prob)?;
    let mut pred = classify(backbone, &pooled, embeds)?;
    pred.seg_prob = state.seg_prob.clone();
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, StubBackbone};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_embeds(rows: Vec<Vec<f64>>, names: Vec<&str>) -> ClassEmbeddingSet {
        let d = rows[0].len();
        let k = rows.len();
        let mut flat = Vec::new();
        for r in &rows {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            flat.extend(r.iter().map(|v| v / n));
        }
        ClassEmbeddingSet::new(
            names.into_iter().map(String::from).collect(),
            Array2::from_shape_vec((k, d), flat).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pool_uniform_mask_is_global_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_elem((4, 4), 1.0);
        let pooled = masked_average_pool(&f, &mask).unwrap();
        for ch in 0..3 {
            let mean: f64 = f.index_axis(ndarray::Axis(0), ch).iter().sum::<f64>() / 16.0;
            assert!((pooled[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_one_hot_mask_selects_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mut mask = Array2::zeros((4, 4));
        mask[(2, 1)] = 1.0;
        let pooled = masked_average_pool(&f, &mask).unwrap();
        for ch in 0..3 {
            assert!((pooled[ch] - f[(ch, 2, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let f = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let pooled = masked_average_pool(&f, &mask).unwrap();
        for ch in 0..3 {
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    num += f[(ch, y, x)] * mask[(y, x)];
                    den += mask[(y, x)];
                }
            }
            den /= 3.0; // the denominator is shared; divide once per channel below
            let _ = den;
            let mut total_mass = 0.0;
            for v in mask.iter() {
                total_mass += v;
            }
            let expected = num / total_mass.max(1e-6);
            assert!((pooled[ch] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_mask_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let f = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.1..1.0));
        let a = masked_average_pool(&f, &mask).unwrap();
        let b = masked_average_pool(&f, &mask.mapv(|v| v * 0.5)).unwrap();
        for ch in 0..2 {
            assert!((a[ch] - b[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_rejects_bad_mask() {
        let f = Array3::zeros((2, 3, 3));
        let mask = Array2::from_elem((3, 3), 1.5);
        assert!(matches!(
            masked_average_pool(&f, &mask),
            Err(RecognizeError::MaskOutOfRange(_))
        ));
    }

    /// A backbone whose projection is the identity, so classification
    /// behavior can be scripted exactly.
    struct IdentityBackbone {
        spec: BackboneSpec,
        proj: Array2<f64>,
    }

    impl IdentityBackbone {
        fn new(d: usize) -> Self {
            let mut spec = BackboneSpec::desk_stub();
            spec.embed_dim = d;
            spec.stage_channels = [4, 5, 6, d];
            Self { spec, proj: Array2::eye(d) }
        }
    }

    impl Backbone for IdentityBackbone {
        fn spec(&self) -> &BackboneSpec {
            &self.spec
        }
        fn encode_text(
            &self,
            _prompts: &[String],
        ) -> Result<crate::backbone::TextEncoding, BackboneError> {
            unimplemented!("not needed")
        }
        fn encode_image(
            &self,
            _image: &Array3<f64>,
        ) -> Result<FeaturePyramid, BackboneError> {
            unimplemented!("not needed")
        }
        fn projection_matrix(&self) -> &Array2<f64> {
            &self.proj
        }
        fn param_fingerprint(&self) -> String {
            "identity".into()
        }
    }

    #[test]
    fn exact_match_wins_with_unit_correlation() {
        let bb = IdentityBackbone::new(3);
        let e = unit_embeds(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec!["a", "b", "c"],
        );
        let pooled = Array1::from_vec(vec![0.0, 2.0, 0.0]);
        let pred = classify(&bb, &pooled, &e).unwrap();
        assert_eq!(pred.class_index, 1);
        assert!((pred.correlation[1] - 1.0).abs() < 1e-12);
        let sum: f64 = pred.class_scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let bb = IdentityBackbone::new(2);
        let e = unit_embeds(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec!["a", "b"]);
        let pooled = Array1::from_vec(vec![3.0, 0.0]);
        let pred = classify(&bb, &pooled, &e).unwrap();
        assert_eq!(pred.class_index, 0);
    }

    #[test]
    fn degenerate_zero_vector_flags_and_falls_to_zero() {
        let bb = IdentityBackbone::new(2);
        let e = unit_embeds(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec!["a", "b"]);
        let pooled = Array1::from_vec(vec![0.0, 0.0]);
        let pred = classify(&bb, &pooled, &e).unwrap();
        assert!(pred.degenerate);
        assert_eq!(pred.class_index, 0);
    }

    #[test]
    fn argmax_invariant_to_temperature_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let bb = StubBackbone::desk(1337);
        let e = {
            let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
            crate::prompts::class_embeddings(&bb, &crate::prompts::PromptTemplateSet::photo(), &names)
                .unwrap()
        };
        for _ in 0..10 {
            let pooled = Array1::from_shape_fn(192, |_| rng.gen_range(-1.0..1.0));
            let base = classify(&bb, &pooled, &e).unwrap();
            for scale in [0.5, 2.0] {
                let scaled = pooled.mapv(|v| v * scale);
                let p = classify(&bb, &scaled, &e).unwrap();
                assert_eq!(p.class_index, base.class_index, "scale invariance");
            }
            // temperature only sharpens scores; argmax of the raw
            // correlation must agree with the reported class
            let mut best = 0;
            for (i, &v) in base.correlation.iter().enumerate() {
                if v > base.correlation[best] {
                    best = i;
                }
            }
            assert_eq!(base.class_index, best);
        }
    }
}
