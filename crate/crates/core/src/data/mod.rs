//! Dataset layer: manifest ingestion with class-disjoint splits, edge
//! ground-truth synthesis, depth loading, object attribute statistics,
//! taxonomy path similarity, and a synthetic camouflage toy set.
//!
//! Manifest format (tab-separated, `#` comments):
//!
//! ```text
//! ovcamo-manifest v1
//! <image_id>\t<image_path>\t<mask_path>\t<depth_path or ->\t<class_name>
//! ```
//!
//! Split file:
//!
//! ```text
//! ovcamo-split v1
//! seen\t<class_name>
//! unseen\t<class_name>
//! ```
//!
//! Taxonomy: a plain edge list, one `parent\tchild` per line.

mod attributes;
mod loader;
mod morphology;
mod taxonomy;
pub mod toyset;

pub use attributes::{compute_attributes, ObjectAttributes};
pub use loader::{load_sample, LoadMode, LoadedSample, SampleError};
pub use morphology::make_edge_gt;
pub use taxonomy::Taxonomy;

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_HEADER: &str = "ovcamo-manifest v1";
pub const SPLIT_HEADER: &str = "ovcamo-split v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad header in {path}: expected `{expected}`, found `{found}`")]
    Header { path: PathBuf, expected: &'static str, found: String },
    #[error("manifest validation failed with {} issue(s):\n{}", .0.len(), format_issues(.0))]
    Invalid(Vec<ManifestIssue>),
    #[error("class `{0}` is not a taxonomy node")]
    UnknownTaxonomyClass(String),
    #[error("taxonomy edge `{0}` is a self-loop")]
    SelfLoop(String),
}

fn format_issues(issues: &[ManifestIssue]) -> String {
    issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n")
}

/// A single structured validation finding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ManifestIssue {
    Parse { line: usize, message: String },
    DuplicateImageId { image_id: String },
    SplitOverlap { class: String },
    UnassignedClass { class: String },
    MissingFile { image_id: String, kind: String, path: PathBuf },
}

impl std::fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Parse { line, message } => write!(f, "line {line}: {message}"),
            Self::DuplicateImageId { image_id } => write!(f, "duplicate image id `{image_id}`"),
            Self::SplitOverlap { class } => {
                write!(f, "class `{class}` appears in both seen and unseen splits")
            }
            Self::UnassignedClass { class } => {
                write!(f, "class `{class}` is not assigned to any split")
            }
            Self::MissingFile { image_id, kind, path } => {
                write!(f, "record `{image_id}`: missing {kind} file {}", path.display())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub depth_path: Option<PathBuf>,
    pub class_name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

/// A validated dataset manifest plus its class split. Relative paths
/// resolve against the manifest file's directory.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub split: ClassSplit,
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub records: usize,
    pub classes: usize,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub seen_records: usize,
    pub unseen_records: usize,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn records_for(&self, split: Split) -> Vec<&ManifestRecord> {
        let set = match split {
            Split::Seen => &self.split.seen,
            Split::Unseen => &self.split.unseen,
        };
        self.records.iter().filter(|r| set.contains(&r.class_name)).collect()
    }

    /// Sorted class names present in a split.
    pub fn classes_for(&self, split: Split) -> Vec<String> {
        let set = match split {
            Split::Seen => &self.split.seen,
            Split::Unseen => &self.split.unseen,
        };
        set.iter().cloned().collect()
    }

    /// Sorted class names actually used by the records.
    pub fn record_classes(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.class_name.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn stats(&self) -> ManifestStats {
        let classes = self.record_classes();
        let seen_records = self.records_for(Split::Seen).len();
        let unseen_records = self.records_for(Split::Unseen).len();
        ManifestStats {
            records: self.records.len(),
            classes: classes.len(),
            seen_classes: self.split.seen.len(),
            unseen_classes: self.split.unseen.len(),
            seen_records,
            unseen_records,
        }
    }
}

fn read_with_header(
    path: &Path,
    expected: &'static str,
) -> Result<Vec<(usize, String)>, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut lines = Vec::new();
    let mut header_ok = false;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_ok {
            if line != expected {
                return Err(DataError::Header {
                    path: path.to_path_buf(),
                    expected,
                    found: line.to_string(),
                });
            }
            header_ok = true;
            continue;
        }
        lines.push((no + 1, line.to_string()));
    }
    if !header_ok {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            expected,
            found: "<empty file>".to_string(),
        });
    }
    Ok(lines)
}

/// Parses the two-list class split file.
pub fn load_split(path: &Path) -> Result<(ClassSplit, Vec<ManifestIssue>), DataError> {
    let mut split = ClassSplit::default();
    let mut issues = Vec::new();
    for (no, line) in read_with_header(path, SPLIT_HEADER)? {
        let mut parts = line.splitn(2, '\t');
        let which = parts.next().unwrap_or_default();
        let class = parts.next().unwrap_or_default().trim();
        if class.is_empty() {
            issues.push(ManifestIssue::Parse {
                line: no,
                message: "expected `<seen|unseen>\\t<class>`".into(),
            });
            continue;
        }
        match which {
            "seen" => {
                split.seen.insert(class.to_string());
            }
            "unseen" => {
                split.unseen.insert(class.to_string());
            }
            other => issues.push(ManifestIssue::Parse {
                line: no,
                message: format!("unknown split `{other}`"),
            }),
        }
    }
    for class in split.seen.intersection(&split.unseen) {
        issues.push(ManifestIssue::SplitOverlap { class: class.clone() });
    }
    Ok((split, issues))
}

/// Loads and validates a manifest against its split file. With
/// `check_files`, every referenced image/mask/depth path must exist.
/// Any issue rejects the manifest; the full structured list is returned
/// in the error.
pub fn load_manifest(
    manifest_path: &Path,
    split_path: &Path,
    check_files: bool,
) -> Result<DatasetManifest, DataError> {
    let (split, mut issues) = load_split(split_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (no, line) in read_with_header(manifest_path, MANIFEST_HEADER)? {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            issues.push(ManifestIssue::Parse {
                line: no,
                message: format!("expected 5 tab-separated fields, got {}", parts.len()),
            });
            continue;
        }
        let image_id = parts[0].to_string();
        if !ids.insert(image_id.clone()) {
            issues.push(ManifestIssue::DuplicateImageId { image_id: image_id.clone() });
        }
        records.push(ManifestRecord {
            image_id,
            image_path: PathBuf::from(parts[1]),
            mask_path: PathBuf::from(parts[2]),
            depth_path: if parts[3] == "-" { None } else { Some(PathBuf::from(parts[3])) },
            class_name: parts[4].to_string(),
        });
    }

    let mut unassigned = BTreeSet::new();
    for r in &records {
        if !split.seen.contains(&r.class_name) && !split.unseen.contains(&r.class_name) {
            unassigned.insert(r.class_name.clone());
        }
    }
    for class in unassigned {
        issues.push(ManifestIssue::UnassignedClass { class });
    }

    let manifest = DatasetManifest { records, split, root };
    if check_files {
        for r in &manifest.records {
            for (kind, p) in [
                ("image", Some(&r.image_path)),
                ("mask", Some(&r.mask_path)),
                ("depth", r.depth_path.as_ref()),
            ] {
                if let Some(p) = p {
                    let full = manifest.resolve(p);
                    if !full.exists() {
                        issues.push(ManifestIssue::MissingFile {
                            image_id: r.image_id.clone(),
                            kind: kind.to_string(),
                            path: full,
                        });
                    }
                }
            }
        }
    }
    if issues.is_empty() {
        Ok(manifest)
    } else {
        Err(DataError::Invalid(issues))
    }
}

/// Writes a manifest file (toy-set generator and tests).
pub fn write_manifest(
    manifest_path: &Path,
    records: &[ManifestRecord],
) -> Result<(), std::io::Error> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.image_id,
            r.image_path.display(),
            r.mask_path.display(),
            r.depth_path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
            r.class_name
        ));
    }
    std::fs::write(manifest_path, out)
}

pub fn write_split(split_path: &Path, split: &ClassSplit) -> Result<(), std::io::Error> {
    let mut out = String::from(SPLIT_HEADER);
    out.push('\n');
    for c in &split.seen {
        out.push_str(&format!("seen\t{c}\n"));
    }
    for c in &split.unseen {
        out.push_str(&format!("unseen\t{c}\n"));
    }
    std::fs::write(split_path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, manifest: &str, split: &str) -> (PathBuf, PathBuf) {
        let m = dir.join("manifest.txt");
        let s = dir.join("split.txt");
        std::fs::write(&m, manifest).unwrap();
        std::fs::write(&s, split).unwrap();
        (m, s)
    }

    #[test]
    fn toy_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = write_files(
            dir.path(),
            "ovcamo-manifest v1\nimg1\ta.png\ta_m.png\t-\tmoth\nimg2\tb.png\tb_m.png\tb_d.png\tcrab\nimg3\tc.png\tc_m.png\t-\toctopus\n",
            "ovcamo-split v1\nseen\tmoth\nseen\tcrab\nunseen\toctopus\n",
        );
        let man = load_manifest(&m, &s, false).unwrap();
        assert_eq!(man.records.len(), 3);
        assert_eq!(man.records_for(Split::Seen).len(), 2);
        assert_eq!(man.records_for(Split::Unseen).len(), 1);
        assert_eq!(man.records[1].depth_path.as_ref().unwrap().to_str(), Some("b_d.png"));
        let stats = man.stats();
        assert_eq!(stats.records, 3);
        assert_eq!(stats.classes, 3);
    }

    #[test]
    fn split_overlap_rejected_with_class_name() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = write_files(
            dir.path(),
            "ovcamo-manifest v1\nimg1\ta.png\tam.png\t-\tmoth\n",
            "ovcamo-split v1\nseen\tmoth\nunseen\tmoth\n",
        );
        match load_manifest(&m, &s, false) {
            Err(DataError::Invalid(issues)) => {
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ManifestIssue::SplitOverlap { class } if class == "moth")));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn unassigned_class_and_missing_files_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = write_files(
            dir.path(),
            "ovcamo-manifest v1\nimg1\ta.png\tam.png\t-\tmoth\nimg1\tb.png\tbm.png\t-\tmoth\n",
            "ovcamo-split v1\nseen\tcrab\n",
        );
        match load_manifest(&m, &s, true) {
            Err(DataError::Invalid(issues)) => {
                assert!(issues.iter().any(|i| matches!(i, ManifestIssue::UnassignedClass { .. })));
                assert!(issues.iter().any(|i| matches!(i, ManifestIssue::DuplicateImageId { .. })));
                assert!(issues.iter().any(|i| matches!(i, ManifestIssue::MissingFile { .. })));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn header_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let (m, s) = write_files(
            dir.path(),
            "img1\ta.png\tam.png\t-\tmoth\n",
            "ovcamo-split v1\nseen\tmoth\n",
        );
        assert!(matches!(load_manifest(&m, &s, false), Err(DataError::Header { .. })));
    }

    #[test]
    fn full_scale_synthetic_manifest_counts() {
        // An OVCamo-shaped manifest: 11,483 records over 75 classes,
        // 14 seen / 61 unseen, 7,713 / 3,770 records.
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = String::from("ovcamo-manifest v1\n");
        let mut split = String::from("ovcamo-split v1\n");
        let seen: Vec<String> = (0..14).map(|i| format!("seen_class_{i}")).collect();
        let unseen: Vec<String> = (0..61).map(|i| format!("unseen_class_{i}")).collect();
        for c in &seen {
            split.push_str(&format!("seen\t{c}\n"));
        }
        for c in &unseen {
            split.push_str(&format!("unseen\t{c}\n"));
        }
        let mut id = 0;
        for i in 0..7713 {
            let c = &seen[i % 14];
            manifest.push_str(&format!("img{id}\ti{id}.png\tm{id}.png\t-\t{c}\n"));
            id += 1;
        }
        for i in 0..3770 {
            let c = &unseen[i % 61];
            manifest.push_str(&format!("img{id}\ti{id}.png\tm{id}.png\t-\t{c}\n"));
            id += 1;
        }
        let (m, s) = write_files(dir.path(), &manifest, &split);
        let man = load_manifest(&m, &s, false).unwrap();
        let stats = man.stats();
        assert_eq!(stats.records, 11_483);
        assert_eq!(stats.classes, 75);
        assert_eq!(stats.seen_classes, 14);
        assert_eq!(stats.unseen_classes, 61);
        assert_eq!(stats.seen_records, 7_713);
        assert_eq!(stats.unseen_records, 3_770);
    }
}
