//! Edge ground-truth synthesis by morphology.

use ndarray::Array2;

/// dilate(mask) - erode(mask) with a 3x3 square structuring element,
/// one iteration each. Out-of-bounds neighbors count as background, so
/// a full-frame mask yields a one-pixel inner frame.
pub fn make_edge_gt(mask: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mask[(y as usize, x as usize)]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut mx = 0.0f64;
        let mut mn = 1.0f64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let v = at(y as isize + dy, x as isize + dx);
                mx = mx.max(v);
                mn = mn.min(v);
            }
        }
        mx - mn
    })
}
