//! Synthetic camouflage toy set: textured objects tinted toward a
//! class-specific color on matching-texture backgrounds, with masks,
//! synthesized depth, and optional on-disk export in manifest format.

use super::{write_manifest, write_split, ClassSplit, ManifestRecord};
use crate::backbone::planted_palette;
use crate::util::derived_rng;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Strength of the class color shift inside the object.
    pub tint: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: vec!["moth".into(), "octopus".into(), "lizard".into(), "crab".into()],
            train_per_class: 16,
            test_per_class: 4,
            resolution: 64,
            seed: 2024,
            tint: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub image_id: String,
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
    pub depth: Array2<f64>,
    pub class_name: String,
    pub class_index: usize,
}

#[derive(Clone, Debug)]
pub struct ToySet {
    pub classes: Vec<String>,
    pub train: Vec<ToySample>,
    pub test: Vec<ToySample>,
    pub resolution: usize,
}

/// Low-frequency value noise in [0, 1]: a coarse random grid bilinearly
/// upsampled, plus a half-amplitude finer octave.
fn value_noise(rng: &mut ChaCha8Rng, r: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((r, r));
    let mut amplitude = 1.0;
    let mut total = 0.0;
    for cells in [6usize, 12] {
        let grid = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.gen_range(0.0..1.0));
        for y in 0..r {
            for x in 0..r {
                let gy = y as f64 / r as f64 * cells as f64;
                let gx = x as f64 / r as f64 * cells as f64;
                let y0 = gy.floor() as usize;
                let x0 = gx.floor() as usize;
                let fy = gy - y0 as f64;
                let fx = gx - x0 as f64;
                let top = grid[(y0, x0)] * (1.0 - fx) + grid[(y0, x0 + 1)] * fx;
                let bot = grid[(y0 + 1, x0)] * (1.0 - fx) + grid[(y0 + 1, x0 + 1)] * fx;
                out[(y, x)] += amplitude * (top * (1.0 - fy) + bot * fy);
            }
        }
        total += amplitude;
        amplitude *= 0.5;
    }
    out.mapv(|v| v / total)
}

/// A wobbly blob mask around a random center.
fn blob_mask(rng: &mut ChaCha8Rng, r: usize) -> (Array2<f64>, (f64, f64), f64) {
    let cy = rng.gen_range(0.34..0.66) * r as f64;
    let cx = rng.gen_range(0.34..0.66) * r as f64;
    let r0 = rng.gen_range(0.20..0.28) * r as f64;
    let harmonics: Vec<(f64, f64)> =
        (0..3).map(|_| (rng.gen_range(0.0..0.16), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
    let mask = Array2::from_shape_fn((r, r), |(y, x)| {
        let dy = y as f64 + 0.5 - cy;
        let dx = x as f64 + 0.5 - cx;
        let d = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        let mut wobble = 1.0;
        for (k, &(a, phi)) in harmonics.iter().enumerate() {
            wobble += a * ((k as f64 + 1.0) * theta + phi).cos();
        }
        if d <= r0 * wobble {
            1.0
        } else {
            0.0
        }
    });
    (mask, (cy, cx), r0)
}

fn make_sample(
    classes: &[String],
    palette: &[[f64; 3]],
    class_index: usize,
    image_id: String,
    resolution: usize,
    tint: f64,
    rng: &mut ChaCha8Rng,
) -> ToySample {
    let r = resolution;
    let texture = value_noise(rng, r);
    let base: [f64; 3] = [
        rng.gen_range(0.30..0.45),
        rng.gen_range(0.35..0.50),
        rng.gen_range(0.28..0.42),
    ];
    let (mask, (cy, cx), r0) = blob_mask(rng, r);
    let dir = palette[class_index];

    let mut image = Array3::zeros((3, r, r));
    for y in 0..r {
        for x in 0..r {
            let t = 0.35 + 0.5 * texture[(y, x)];
            for c in 0..3 {
                let mut v = base[c] * t + 0.15 * texture[(y, x)];
                if mask[(y, x)] == 1.0 {
                    v += tint * dir[c];
                }
                image[(c, y, x)] = v.clamp(0.0, 1.0);
            }
        }
    }

    // depth: a gentle background ramp with the object raised as a dome
    let depth = Array2::from_shape_fn((r, r), |(y, x)| {
        let bg = 0.2 + 0.3 * (y as f64 / r as f64);
        if mask[(y, x)] == 1.0 {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let d = (dy * dy + dx * dx).sqrt() / (r0 * 1.3);
            (0.6 + 0.35 * (1.0 - d * d).max(0.0).sqrt()).min(1.0)
        } else {
            bg
        }
    });

    ToySample {
        image_id,
        image,
        mask,
        depth,
        class_name: classes[class_index].clone(),
        class_index,
    }
}

/// Deterministic toy-set generation.
pub fn generate(spec: &ToySpec) -> ToySet {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let palette = planted_palette(&spec.classes);
    for (ci, class) in spec.classes.iter().enumerate() {
        for i in 0..spec.train_per_class {
            let id = format!("train_{class}_{i:03}");
            let mut rng = derived_rng(spec.seed, &format!("toy-{id}"));
            train.push(make_sample(&spec.classes, &palette, ci, id, spec.resolution, spec.tint, &mut rng));
        }
        for i in 0..spec.test_per_class {
            let id = format!("test_{class}_{i:03}");
            let mut rng = derived_rng(spec.seed, &format!("toy-{id}"));
            test.push(make_sample(&spec.classes, &palette, ci, id, spec.resolution, spec.tint, &mut rng));
        }
    }
    ToySet { classes: spec.classes.clone(), train, test, resolution: spec.resolution }
}

/// Paths produced by [`write_to_dir`].
pub struct ToyPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub split: PathBuf,
    pub taxonomy: PathBuf,
}

fn save_sample(dir: &Path, s: &ToySample) -> std::io::Result<ManifestRecord> {
    let r = s.image.dim().1;
    let mut img = image::RgbImage::new(r as u32, r as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (s.image[(c, y as usize, x as usize)] * 255.0).round() as u8;
        }
    }
    let mut mask = image::GrayImage::new(r as u32, r as u32);
    for (x, y, p) in mask.enumerate_pixels_mut() {
        p.0[0] = if s.mask[(y as usize, x as usize)] == 1.0 { 255 } else { 0 };
    }
    let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(r as u32, r as u32);
    for (x, y, p) in depth.enumerate_pixels_mut() {
        p.0[0] = (s.depth[(y as usize, x as usize)] * 65535.0).round() as u16;
    }
    let img_path = format!("images/{}.png", s.image_id);
    let mask_path = format!("masks/{}.png", s.image_id);
    let depth_path = format!("depths/{}.png", s.image_id);
    img.save(dir.join(&img_path)).map_err(std::io::Error::other)?;
    mask.save(dir.join(&mask_path)).map_err(std::io::Error::other)?;
    depth.save(dir.join(&depth_path)).map_err(std::io::Error::other)?;
    Ok(ManifestRecord {
        image_id: s.image_id.clone(),
        image_path: PathBuf::from(img_path),
        mask_path: PathBuf::from(mask_path),
        depth_path: Some(PathBuf::from(depth_path)),
        class_name: s.class_name.clone(),
    })
}

/// Writes the set as PNGs plus train/test manifests, a split file (all
/// classes seen; the toy task holds out images, not classes), and a
/// star taxonomy fixture.
pub fn write_to_dir(set: &ToySet, dir: &Path) -> std::io::Result<ToyPaths> {
    for sub in ["images", "masks", "depths"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut train_records = Vec::new();
    for s in &set.train {
        train_records.push(save_sample(dir, s)?);
    }
    let mut test_records = Vec::new();
    for s in &set.test {
        test_records.push(save_sample(dir, s)?);
    }
    let train_manifest = dir.join("manifest_train.txt");
    let test_manifest = dir.join("manifest_test.txt");
    write_manifest(&train_manifest, &train_records)?;
    write_manifest(&test_manifest, &test_records)?;
    let split_path = dir.join("split.txt");
    let split = ClassSplit {
        seen: set.classes.iter().cloned().collect(),
        unseen: Default::default(),
    };
    write_split(&split_path, &split)?;
    let taxonomy = dir.join("taxonomy.txt");
    let mut tax = String::from("# parent\tchild\n");
    for c in &set.classes {
        tax.push_str(&format!("creature\t{c}\n"));
    }
    std::fs::write(&taxonomy, tax)?;
    Ok(ToyPaths { train_manifest, test_manifest, split: split_path, taxonomy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let spec = ToySpec { train_per_class: 2, test_per_class: 1, ..Default::default() };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.train[0].image, b.train[0].image);
        for s in a.train.iter().chain(&a.test) {
            assert!(s.mask.iter().any(|&v| v == 1.0), "{} has an object", s.image_id);
            assert!(s.mask.iter().any(|&v| v == 0.0));
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.depth.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn object_mean_color_shifts_toward_class_direction() {
        let spec = ToySpec { train_per_class: 4, test_per_class: 0, ..Default::default() };
        let set = generate(&spec);
        let palette = planted_palette(&set.classes);
        for s in &set.train {
            let dir = palette[s.class_index];
            let mut obj = [0.0f64; 3];
            let mut bg = [0.0f64; 3];
            let (mut no, mut nb) = (0.0, 0.0);
            for y in 0..set.resolution {
                for x in 0..set.resolution {
                    for c in 0..3 {
                        if s.mask[(y, x)] == 1.0 {
                            obj[c] += s.image[(c, y, x)];
                        } else {
                            bg[c] += s.image[(c, y, x)];
                        }
                    }
                    if s.mask[(y, x)] == 1.0 {
                        no += 1.0;
                    } else {
                        nb += 1.0;
                    }
                }
            }
            let mut dot = 0.0;
            for c in 0..3 {
                dot += (obj[c] / no - bg[c] / nb) * dir[c];
            }
            assert!(dot > 0.05, "{}: tint projection {dot}", s.image_id);
        }
    }

    #[test]
    fn on_disk_roundtrip_validates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec { train_per_class: 1, test_per_class: 1, ..Default::default() };
        let set = generate(&spec);
        let paths = write_to_dir(&set, dir.path()).unwrap();
        let man = load_manifest(&paths.train_manifest, &paths.split, true).unwrap();
        assert_eq!(man.records.len(), 4);
        let test = load_manifest(&paths.test_manifest, &paths.split, true).unwrap();
        assert_eq!(test.records.len(), 4);
    }
}
