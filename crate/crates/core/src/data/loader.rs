//! Sample loading: decode, resize to the training resolution, apply
//! train-time augmentations with a per-sample seed, and synthesize the
//! edge ground truth from the final mask.

use super::morphology::make_edge_gt;
use super::{DatasetManifest, ManifestRecord};
use crate::util::{derived_rng, fnv1a64, resize_bilinear_2d, resize_nearest_2d};
use image::DynamicImage;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

const MASK_THRESHOLD: u8 = 128;
const MAX_ROTATION_DEG: f64 = 15.0;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sample `{image_id}`: cannot read {kind} file {path}: {message}")]
    Unreadable { image_id: String, kind: &'static str, path: String, message: String },
    #[error("sample `{image_id}`: class `{class}` not in the class list")]
    UnknownClass { image_id: String, class: String },
    #[error("sample `{image_id}`: depth required for training but no depth path present")]
    MissingDepth { image_id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Augmentations on; depth required.
    Train,
    /// Deterministic; depth is never loaded (not needed at inference).
    Eval,
}

/// One fully prepared sample at target resolution.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub image_id: String,
    /// (3, r, r) RGB in [0, 1].
    pub image: Array3<f64>,
    /// Binary mask.
    pub mask: Array2<f64>,
    /// Edge band synthesized from the (augmented) mask.
    pub edge: Array2<f64>,
    /// Min-max normalized depth; training only.
    pub depth: Option<Array2<f64>>,
    pub class_index: usize,
}

fn open_image(
    image_id: &str,
    kind: &'static str,
    path: &Path,
) -> Result<DynamicImage, SampleError> {
    image::open(path).map_err(|e| SampleError::Unreadable {
        image_id: image_id.to_string(),
        kind,
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn to_rgb_array(img: &DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
        }
    }
    out
}

fn to_mask_array(img: &DynamicImage) -> Array2<f64> {
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if g.get_pixel(x as u32, y as u32).0[0] >= MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    })
}

fn to_depth_array(img: &DynamicImage) -> Array2<f64> {
    // 8- or 16-bit grayscale, then per-image min-max to [0, 1]
    let raw: Array2<f64> = match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        other => {
            let g = other.to_luma8();
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
    };
    normalize_depth(raw)
}

pub(crate) fn normalize_depth(raw: Array2<f64>) -> Array2<f64> {
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for &v in raw.iter() {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    if mx - mn < 1e-12 {
        raw.mapv(|_| 0.0)
    } else {
        raw.mapv(|v| (v - mn) / (mx - mn))
    }
}

fn hflip2(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[(y, w - 1 - x)])
}

fn hflip3(a: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = a.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| a[(ch, y, w - 1 - x)])
}

/// Inverse-mapped rotation around the image center; bilinear for smooth
/// maps, nearest for masks, edge-clamped sampling.
fn rotate2(a: &Array2<f64>, angle_rad: f64, nearest: bool) -> Array2<f64> {
    let (h, w) = a.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, c) = (-angle_rad).sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = cx + dx * c - dy * s;
        let sy = cy + dx * s + dy * c;
        if nearest {
            let iy = sy.round().clamp(0.0, h as f64 - 1.0) as usize;
            let ix = sx.round().clamp(0.0, w as f64 - 1.0) as usize;
            a[(iy, ix)]
        } else {
            let y0 = sy.floor().clamp(0.0, h as f64 - 1.0) as usize;
            let x0 = sx.floor().clamp(0.0, w as f64 - 1.0) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let top = a[(y0, x0)] * (1.0 - fx) + a[(y0, x1)] * fx;
            let bot = a[(y1, x0)] * (1.0 - fx) + a[(y1, x1)] * fx;
            top * (1.0 - fy) + bot * fy
        }
    })
}

fn rotate3(a: &Array3<f64>, angle_rad: f64) -> Array3<f64> {
    let (c, h, w) = a.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane =
            Array2::from_shape_fn((h, w), |(y, x)| a[(ch, y, x)]);
        let rot = rotate2(&plane, angle_rad, false);
        for y in 0..h {
            for x in 0..w {
                out[(ch, y, x)] = rot[(y, x)];
            }
        }
    }
    out
}

/// Per-sample RNG stream derived from the global seed and the image id.
pub fn sample_rng(global_seed: u64, image_id: &str) -> ChaCha8Rng {
    derived_rng(global_seed ^ fnv1a64(image_id.as_bytes()), "sample-augment")
}

struct Prepared {
    image: Array3<f64>,
    mask: Array2<f64>,
    depth: Option<Array2<f64>>,
}

fn augment(p: Prepared, rng: &mut ChaCha8Rng) -> Prepared {
    let mut image = p.image;
    let mut mask = p.mask;
    let mut depth = p.depth;
    // flip, rotate, color jitter, in that order
    if rng.gen_bool(0.5) {
        image = hflip3(&image);
        mask = hflip2(&mask);
        depth = depth.map(|d| hflip2(&d));
    }
    let angle = rng.gen_range(-MAX_ROTATION_DEG..MAX_ROTATION_DEG).to_radians();
    image = rotate3(&image, angle);
    mask = rotate2(&mask, angle, true);
    depth = depth.map(|d| rotate2(&d, angle, false));

    let gains: [f64; 3] =
        [rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1), rng.gen_range(0.9..1.1)];
    let shift: f64 = rng.gen_range(-0.05..0.05);
    for c in 0..3 {
        for v in image.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
            *v = (*v * gains[c] + shift).clamp(0.0, 1.0);
        }
    }
    Prepared { image, mask, depth }
}

/// Loads one record: decode, resize (bilinear image/depth, nearest
/// mask), optional augmentation, and edge synthesis from the final
/// mask.
pub fn load_sample(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    classes: &[String],
    resolution: usize,
    mode: LoadMode,
    global_seed: u64,
) -> Result<LoadedSample, SampleError> {
    let class_index = classes.iter().position(|c| c == &record.class_name).ok_or_else(|| {
        SampleError::UnknownClass {
            image_id: record.image_id.clone(),
            class: record.class_name.clone(),
        }
    })?;

    let img = open_image(&record.image_id, "image", &manifest.resolve(&record.image_path))?;
    let mask = open_image(&record.image_id, "mask", &manifest.resolve(&record.mask_path))?;
    let image = {
        let full = to_rgb_array(&img);
        let (c, _, _) = full.dim();
        debug_assert_eq!(c, 3);
        crate::util::resize_bilinear_chw(&full, resolution, resolution)
    };
    let mask = resize_nearest_2d(&to_mask_array(&mask), resolution, resolution);
    let depth = match (mode, &record.depth_path) {
        (LoadMode::Train, Some(p)) => {
            let d = open_image(&record.image_id, "depth", &manifest.resolve(p))?;
            Some(resize_bilinear_2d(&to_depth_array(&d), resolution, resolution))
        }
        (LoadMode::Train, None) => {
            return Err(SampleError::MissingDepth { image_id: record.image_id.clone() })
        }
        (LoadMode::Eval, _) => None,
    };

    let prepared = Prepared { image, mask, depth };
    let prepared = match mode {
        LoadMode::Train => {
            let mut rng = sample_rng(global_seed, &record.image_id);
            augment(prepared, &mut rng)
        }
        LoadMode::Eval => prepared,
    };
    let edge = make_edge_gt(&prepared.mask);
    Ok(LoadedSample {
        image_id: record.image_id.clone(),
        image: prepared.image,
        mask: prepared.mask,
        edge,
        depth: prepared.depth,
        class_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_manifest, write_split, ClassSplit, DatasetManifest, ManifestRecord};
    use image::{GrayImage, Rgb, RgbImage};
    use std::path::PathBuf;

    fn write_fixture(dir: &Path, with_depth: bool) -> DatasetManifest {
        // 40x40 image with a bright 10x10 marker block at the left
        let mut img = RgbImage::new(40, 40);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = if (5..15).contains(&x) && (15..25).contains(&y) {
                Rgb([250, 40, 40])
            } else {
                Rgb([30, 120, 30])
            };
        }
        img.save(dir.join("img.png")).unwrap();
        let mut mask = GrayImage::new(40, 40);
        for (x, y, p) in mask.enumerate_pixels_mut() {
            p.0[0] = if (5..15).contains(&x) && (15..25).contains(&y) { 255 } else { 0 };
        }
        mask.save(dir.join("mask.png")).unwrap();
        if with_depth {
            let mut depth = GrayImage::new(40, 40);
            for (x, _, p) in depth.enumerate_pixels_mut() {
                p.0[0] = (x * 6) as u8;
            }
            depth.save(dir.join("depth.png")).unwrap();
        }
        let record = ManifestRecord {
            image_id: "fix1".into(),
            image_path: PathBuf::from("img.png"),
            mask_path: PathBuf::from("mask.png"),
            depth_path: with_depth.then(|| PathBuf::from("depth.png")),
            class_name: "moth".into(),
        };
        let split = ClassSplit {
            seen: ["moth".to_string()].into_iter().collect(),
            unseen: Default::default(),
        };
        write_manifest(&dir.join("manifest.txt"), &[record.clone()]).unwrap();
        write_split(&dir.join("split.txt"), &split).unwrap();
        DatasetManifest { records: vec![record], split, root: dir.to_path_buf() }
    }

    #[test]
    fn eval_mode_is_deterministic_and_depth_free() {
        let dir = tempfile::tempdir().unwrap();
        let man = write_fixture(dir.path(), false);
        let classes = vec!["moth".to_string()];
        let a = load_sample(&man, &man.records[0], &classes, 32, LoadMode::Eval, 7).unwrap();
        let b = load_sample(&man, &man.records[0], &classes, 32, LoadMode::Eval, 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert!(a.depth.is_none());
        assert_eq!(a.class_index, 0);
        assert!(a.mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.mask.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn train_mode_keeps_image_and_mask_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let man = write_fixture(dir.path(), true);
        let classes = vec!["moth".to_string()];
        // Across several augmentation seeds, the red marker must stay
        // inside the transformed mask.
        for seed in 0..6u64 {
            let s = load_sample(&man, &man.records[0], &classes, 40, LoadMode::Train, seed).unwrap();
            let mut aligned = 0usize;
            let mut marker = 0usize;
            for y in 0..40 {
                for x in 0..40 {
                    let red = s.image[(0, y, x)] > 0.6 && s.image[(1, y, x)] < 0.4;
                    if red {
                        marker += 1;
                        if s.mask[(y, x)] == 1.0 {
                            aligned += 1;
                        }
                    }
                }
            }
            assert!(marker > 20, "marker survived augmentation (seed {seed})");
            let frac = aligned as f64 / marker as f64;
            assert!(frac > 0.9, "mask/image alignment {frac} at seed {seed}");
            assert!(s.depth.is_some());
            assert!(s.edge.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn train_mode_requires_depth() {
        let dir = tempfile::tempdir().unwrap();
        let man = write_fixture(dir.path(), false);
        let classes = vec!["moth".to_string()];
        assert!(matches!(
            load_sample(&man, &man.records[0], &classes, 32, LoadMode::Train, 7),
            Err(SampleError::MissingDepth { .. })
        ));
    }

    #[test]
    fn unreadable_file_is_a_sample_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut man = write_fixture(dir.path(), false);
        man.records[0].image_path = PathBuf::from("missing.png");
        let classes = vec!["moth".to_string()];
        assert!(matches!(
            load_sample(&man, &man.records[0], &classes, 32, LoadMode::Eval, 7),
            Err(SampleError::Unreadable { kind: "image", .. })
        ));
    }

    #[test]
    fn depth_is_min_max_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let man = write_fixture(dir.path(), true);
        let classes = vec!["moth".to_string()];
        let s = load_sample(&man, &man.records[0], &classes, 40, LoadMode::Train, 3).unwrap();
        let d = s.depth.unwrap();
        let mn = d.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(mn >= 0.0 && mx <= 1.0);
        assert!(mx > 0.9, "rescaled to use the full range, max {mx}");
    }
}
