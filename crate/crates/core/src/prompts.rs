//! Prompt template sets, class-embedding averaging, and embedding-set
//! diagnostics.
//!
//! The `camo` set decorates a class name with six camouflage-flavored
//! phrasings; per-class embeddings are the renormalized mean of the
//! expansions' text embeddings and can be computed once per run.

use crate::backbone::{Backbone, ClassEmbeddingSet};
use ndarray::{Array2, ArrayView1};
use thiserror::Error;

pub const PLACEHOLDER: &str = "<class>";

/// The six CamoPrompts phrasings.
pub const CAMO_PROMPTS: [&str; 6] = [
    "A photo of the camouflaged <class>.",
    "A photo of the concealed <class>.",
    "A photo of the <class> camouflaged in the background.",
    "A photo of the <class> concealed in the background.",
    "A photo of the <class> camouflaged to blend in with its surroundings.",
    "A photo of the <class> concealed to blend in with its surroundings.",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template set must contain at least one template")]
    EmptyTemplateSet,
    #[error("template `{template}` must contain the `<class>` placeholder exactly once")]
    BadPlaceholder { template: String },
    #[error("class name must be non-empty")]
    EmptyClassName,
    #[error("class list must be non-empty")]
    EmptyClassList,
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
    #[error("embedding sets must be non-empty")]
    EmptyEmbeddingSet,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("backbone error: {0}")]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error("failed to read template file: {0}")]
    Io(#[from] std::io::Error),
}

/// An ordered set of prompt templates, each containing the `<class>`
/// placeholder exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplateSet {
    name: String,
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(name: impl Into<String>, templates: Vec<String>) -> Result<Self, PromptError> {
        if templates.is_empty() {
            return Err(PromptError::EmptyTemplateSet);
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(PromptError::BadPlaceholder { template: t.clone() });
            }
        }
        Ok(Self { name: name.into(), templates })
    }

    /// CamoPrompts: the six task-related phrasings.
    pub fn camo() -> Self {
        Self::new("camo", CAMO_PROMPTS.iter().map(|s| s.to_string()).collect())
            .expect("builtin templates are valid")
    }

    /// The generic single-template photo prompt.
    pub fn photo() -> Self {
        Self::new("photo", vec!["A photo of the <class>.".into()])
            .expect("builtin templates are valid")
    }

    /// The bare class name.
    pub fn bare() -> Self {
        Self::new("bare", vec!["<class>".into()]).expect("builtin templates are valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "camo" => Some(Self::camo()),
            "photo" => Some(Self::photo()),
            "bare" => Some(Self::bare()),
            _ => None,
        }
    }

    pub fn builtin_names() -> [&'static str; 3] {
        ["camo", "photo", "bare"]
    }

    /// Loads a set from a plain-text file: one template per line, `#`
    /// starts a comment, blank lines are skipped.
    pub fn from_file(name: impl Into<String>, path: &std::path::Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)?;
        let templates: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_string())
            .collect();
        Self::new(name, templates)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// One prompt per template with the placeholder substituted.
    pub fn expand(&self, class_name: &str) -> Result<Vec<String>, PromptError> {
        if class_name.trim().is_empty() {
            return Err(PromptError::EmptyClassName);
        }
        Ok(self.templates.iter().map(|t| t.replace(PLACEHOLDER, class_name)).collect())
    }
}

/// Embeds every class through every template, averages per class, and
/// renormalizes to unit length. All prompts go through a single
/// `encode_text` call so results can be cached per run.
pub fn class_embeddings(
    backbone: &dyn Backbone,
    set: &PromptTemplateSet,
    class_names: &[String],
) -> Result<ClassEmbeddingSet, PromptError> {
    if class_names.is_empty() {
        return Err(PromptError::EmptyClassList);
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in class_names {
        if !seen.insert(c.as_str()) {
            return Err(PromptError::DuplicateClass(c.clone()));
        }
    }
    let per_class = set.templates().len();
    let mut prompts = Vec::with_capacity(class_names.len() * per_class);
    for c in class_names {
        prompts.extend(set.expand(c)?);
    }
    let encoded = backbone.encode_text(&prompts)?;
    let d = encoded.embeddings.ncols();
    let mut rows = Vec::with_capacity(class_names.len() * d);
    for k in 0..class_names.len() {
        let mut mean = vec![0.0f64; d];
        for t in 0..per_class {
            let row = encoded.embeddings.row(k * per_class + t);
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= per_class as f64;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for m in mean.iter_mut() {
                *m /= norm;
            }
        } else {
            mean[0] = 1.0;
        }
        rows.extend_from_slice(&mean);
    }
    let embeddings = Array2::from_shape_vec((class_names.len(), d), rows).expect("shape");
    Ok(ClassEmbeddingSet::new(class_names.to_vec(), embeddings)?)
}

fn euclid(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// sup over rows of `a` of the distance to the nearest row of `b`.
pub fn directed_hausdorff(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, PromptError> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(PromptError::EmptyEmbeddingSet);
    }
    if a.ncols() != b.ncols() {
        return Err(PromptError::DimMismatch(a.ncols(), b.ncols()));
    }
    let mut sup = 0.0f64;
    for ra in a.rows() {
        let mut inf = f64::INFINITY;
        for rb in b.rows() {
            inf = inf.min(euclid(ra, rb));
        }
        sup = sup.max(inf);
    }
    Ok(sup)
}

/// Symmetric Hausdorff distance under the Euclidean metric.
pub fn hausdorff_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, PromptError> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StubBackbone;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn camo_expansion_matches_fixed_strings() {
        let set = PromptTemplateSet::camo();
        let got = set.expand("moth").unwrap();
        assert_eq!(got.len(), 6);
        assert!(got
            .contains(&"A photo of the moth camouflaged to blend in with its surroundings.".to_string()));
        let oct = set.expand("octopus").unwrap();
        assert!(oct.contains(&"A photo of the octopus concealed in the background.".to_string()));
    }

    #[test]
    fn single_template_identity() {
        let set = PromptTemplateSet::bare();
        assert_eq!(set.expand("cat").unwrap(), vec!["cat".to_string()]);
    }

    #[test]
    fn placeholder_enforced_at_construction() {
        assert!(matches!(
            PromptTemplateSet::new("bad", vec!["no placeholder".into()]),
            Err(PromptError::BadPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplateSet::new("bad", vec!["<class> and <class>".into()]),
            Err(PromptError::BadPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplateSet::new("empty", vec![]),
            Err(PromptError::EmptyTemplateSet)
        ));
    }

    #[test]
    fn expand_rejects_empty_class() {
        let set = PromptTemplateSet::camo();
        assert!(matches!(set.expand("  "), Err(PromptError::EmptyClassName)));
    }

    #[test]
    fn single_template_embedding_equals_prompt_embedding() {
        let bb = StubBackbone::desk(1337);
        let set = PromptTemplateSet::photo();
        let ce = class_embeddings(&bb, &set, &["lizard".into()]).unwrap();
        let direct = bb
            .encode_text(&["A photo of the lizard.".into()])
            .unwrap()
            .embeddings;
        let diff: f64 = ce
            .embeddings()
            .row(0)
            .iter()
            .zip(direct.row(0))
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn class_embeddings_shape_75_classes() {
        let bb = StubBackbone::desk(1337);
        let names: Vec<String> = (0..75).map(|i| format!("class{i}")).collect();
        let ce = class_embeddings(&bb, &PromptTemplateSet::camo(), &names).unwrap();
        assert_eq!(ce.embeddings().dim(), (75, 64));
        for r in ce.embeddings().rows() {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn class_embeddings_reject_duplicates() {
        let bb = StubBackbone::desk(1337);
        let names = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            class_embeddings(&bb, &PromptTemplateSet::camo(), &names),
            Err(PromptError::DuplicateClass(_))
        ));
    }

    #[test]
    fn template_order_invariance() {
        let bb = StubBackbone::desk(1337);
        let fwd = PromptTemplateSet::camo();
        let mut rev_templates: Vec<String> = fwd.templates().to_vec();
        rev_templates.reverse();
        let rev = PromptTemplateSet::new("camo-rev", rev_templates).unwrap();
        let names = vec!["crab".to_string(), "moth".to_string()];
        let a = class_embeddings(&bb, &fwd, &names).unwrap();
        let b = class_embeddings(&bb, &rev, &names).unwrap();
        let diff = a
            .embeddings()
            .iter()
            .zip(b.embeddings().iter())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-7);
    }

    #[test]
    fn hausdorff_identity_and_point_pair() {
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        assert_eq!(hausdorff_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn hausdorff_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let a = Array2::from_shape_fn((5, d), |_| rng.gen_range(-2.0..2.0));
        let b = Array2::from_shape_fn((7, d), |_| rng.gen_range(-2.0..2.0));

        // Exhaustive pairwise-distance oracle.
        let dist = |p: ArrayView1<f64>, q: ArrayView1<f64>| -> f64 {
            p.iter().zip(q.iter()).map(|(&x, &y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut d_ab = 0.0f64;
        for ra in a.rows() {
            let mut best = f64::INFINITY;
            for rb in b.rows() {
                let dd = dist(ra, rb);
                if dd < best {
                    best = dd;
                }
            }
            d_ab = d_ab.max(best);
        }
        let mut d_ba = 0.0f64;
        for rb in b.rows() {
            let mut best = f64::INFINITY;
            for ra in a.rows() {
                let dd = dist(rb, ra);
                if dd < best {
                    best = dd;
                }
            }
            d_ba = d_ba.max(best);
        }
        let expected = d_ab.max(d_ba);
        let got = hausdorff_distance(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_dim_mismatch() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 4));
        assert!(matches!(hausdorff_distance(&a, &b), Err(PromptError::DimMismatch(3, 4))));
    }

    #[test]
    fn template_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.txt");
        std::fs::write(&path, "# comment\nA photo of the <class>.\n\n<class> in shade\n").unwrap();
        let set = PromptTemplateSet::from_file("file", &path).unwrap();
        assert_eq!(set.templates().len(), 2);
    }
}
