//! Small shared helpers: deterministic hashing, RNG derivation, and
//! bilinear resampling on ndarray types.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit. Stable across runs and platforms, unlike the std
/// hasher which is randomly keyed.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent RNG stream from a root seed and a label.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(label.as_bytes()))
}

/// Bilinear resize of an (h, w) plane; half-pixel centers, edge clamped.
pub fn resize_bilinear_2d(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = vec![0.0; oh * ow];
    let flat = src.as_standard_layout().iter().copied().collect::<Vec<_>>();
    crate::autograd::kernels::bilinear_resize_plane(&flat, h, w, oh, ow, &mut out);
    Array2::from_shape_vec((oh, ow), out).expect("shape")
}

/// Nearest-neighbor resize of an (h, w) plane with half-pixel centers.
pub fn resize_nearest_2d(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let iy = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        let ix = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
        src[(iy, ix)]
    })
}

/// Channelwise bilinear resize of a (c, h, w) stack.
pub fn resize_bilinear_chw(src: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, oh, ow));
    let flat = src.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let mut buf = vec![0.0; oh * ow];
    for ch in 0..c {
        crate::autograd::kernels::bilinear_resize_plane(
            &flat[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            oh,
            ow,
            &mut buf,
        );
        for y in 0..oh {
            for x in 0..ow {
                out[(ch, y, x)] = buf[y * ow + x];
            }
        }
    }
    out
}

/// 2x bilinear upsampling of a (c, h, w) stack.
pub fn upsample2x_chw(src: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = src.dim();
    resize_bilinear_chw(src, 2 * h, 2 * w)
}

/// Content hash of a list of named f64 buffers (order-sensitive).
pub fn hash_named_buffers<'a>(items: impl Iterator<Item = (&'a str, &'a [f64])>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, data) in items {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for v in data {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
