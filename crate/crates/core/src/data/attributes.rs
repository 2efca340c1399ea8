//! Object attribute statistics over a binary mask.
//!
//! Concentration treats every foreground pixel as a unit square and
//! divides the object area by the area of the minimum rotated bounding
//! rectangle of the pixel-corner convex hull (a minimal rectangle always
//! aligns with a hull edge). Connected components use 4-connectivity;
//! the centroid averages pixel centers and is normalized by (w, h).

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttributes {
    /// Object area over its minimum rotated bounding-rectangle area.
    pub concentration: f64,
    /// Mean over RGB of (object channel mean / background channel mean).
    pub avg_color_ratio: f64,
    /// Object pixels over total pixels.
    pub area_ratio: f64,
    /// 4-connected component count.
    pub num_parts: usize,
    /// Pixel-center centroid normalized to [0, 1] as (x, y).
    pub centroid: (f64, f64),
    /// Set for an empty mask; all numeric fields are zero then.
    pub empty: bool,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain; returns hull vertices in counter-clockwise
/// order without the closing point.
pub(crate) fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    let n = pts.len();
    if n <= 2 {
        return pts;
    }
    let mut hull = Vec::with_capacity(2 * n);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Minimum-area rotated bounding rectangle of a point set: the optimum
/// aligns with one hull edge, so scan hull edges and project.
pub(crate) fn min_rotated_rect_area(pts: &[(f64, f64)]) -> f64 {
    let hull = convex_hull(pts.to_vec());
    if hull.len() < 3 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let n = hull.len();
    for i in 0..n {
        let (x0, y0) = hull[i];
        let (x1, y1) = hull[(i + 1) % n];
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        if len < 1e-12 {
            continue;
        }
        let ux = (x1 - x0) / len;
        let uy = (y1 - y0) / len;
        let (mut min_u, mut max_u) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_v, mut max_v) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(px, py) in &hull {
            let u = px * ux + py * uy;
            let v = -px * uy + py * ux;
            min_u = min_u.min(u);
            max_u = max_u.max(u);
            min_v = min_v.min(v);
            max_v = max_v.max(v);
        }
        best = best.min((max_u - min_u) * (max_v - min_v));
    }
    best
}

fn component_count(mask: &Array2<f64>) -> usize {
    let (h, w) = mask.dim();
    let mut seen = vec![false; h * w];
    let mut count = 0usize;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[(sy, sx)] != 1.0 || seen[sy * w + sx] {
                continue;
            }
            count += 1;
            stack.push((sy, sx));
            seen[sy * w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                let mut push = |ny: isize, nx: isize| {
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        return;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[(ny, nx)] == 1.0 && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                push(y as isize - 1, x as isize);
                push(y as isize + 1, x as isize);
                push(y as isize, x as isize - 1);
                push(y as isize, x as isize + 1);
            }
        }
    }
    count
}

/// Computes all five attributes for a binary mask over an RGB image.
pub fn compute_attributes(mask: &Array2<f64>, image: &Array3<f64>) -> ObjectAttributes {
    let (h, w) = mask.dim();
    debug_assert_eq!(image.dim().1, h, "image/mask height");
    debug_assert_eq!(image.dim().2, w, "image/mask width");
    let area: f64 = mask.iter().filter(|&&v| v == 1.0).count() as f64;
    if area == 0.0 {
        return ObjectAttributes {
            concentration: 0.0,
            avg_color_ratio: 0.0,
            area_ratio: 0.0,
            num_parts: 0,
            centroid: (0.0, 0.0),
            empty: true,
        };
    }

    // hull over pixel-square corners
    let mut corners = Vec::with_capacity(4 * area as usize);
    let mut cx_sum = 0.0;
    let mut cy_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == 1.0 {
                let (xf, yf) = (x as f64, y as f64);
                corners.push((xf, yf));
                corners.push((xf + 1.0, yf));
                corners.push((xf, yf + 1.0));
                corners.push((xf + 1.0, yf + 1.0));
                cx_sum += xf + 0.5;
                cy_sum += yf + 0.5;
            }
        }
    }
    let rect_area = min_rotated_rect_area(&corners);
    let concentration = if rect_area > 0.0 { (area / rect_area).min(1.0) } else { 1.0 };

    // channel means of object vs background
    let channels = image.dim().0;
    let mut ratio_sum = 0.0;
    let bg_count = (h * w) as f64 - area;
    for c in 0..channels {
        let mut obj = 0.0;
        let mut bg = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask[(y, x)] == 1.0 {
                    obj += image[(c, y, x)];
                } else {
                    bg += image[(c, y, x)];
                }
            }
        }
        let obj_mean = obj / area;
        if bg_count == 0.0 {
            ratio_sum += 1.0; // no background region: neutral ratio
        } else {
            let bg_mean = bg / bg_count;
            ratio_sum += obj_mean / bg_mean.max(1e-6);
        }
    }
    let avg_color_ratio = ratio_sum / channels as f64;

    ObjectAttributes {
        concentration,
        avg_color_ratio,
        area_ratio: area / (h * w) as f64,
        num_parts: component_count(mask),
        centroid: (cx_sum / area / w as f64, cy_sum / area / h as f64),
        empty: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((3, h, w), v)
    }

    #[test]
    fn full_frame_mask() {
        let mask = Array2::from_elem((8, 10), 1.0);
        let a = compute_attributes(&mask, &flat_image(8, 10, 0.5));
        assert!((a.concentration - 1.0).abs() < 1e-12);
        assert!((a.area_ratio - 1.0).abs() < 1e-12);
        assert_eq!(a.num_parts, 1);
        assert!((a.centroid.0 - 0.5).abs() < 1e-12);
        assert!((a.centroid.1 - 0.5).abs() < 1e-12);
        assert!((a.avg_color_ratio - 1.0).abs() < 1e-12);
        assert!(!a.empty);
    }

    #[test]
    fn axis_aligned_rectangle_concentration_one() {
        let mut mask = Array2::zeros((10, 10));
        for y in 2..7 {
            for x in 3..9 {
                mask[(y, x)] = 1.0;
            }
        }
        let a = compute_attributes(&mask, &flat_image(10, 10, 0.3));
        assert!((a.concentration - 1.0).abs() < 1e-9, "got {}", a.concentration);
        assert_eq!(a.num_parts, 1);
        assert!((a.area_ratio - 30.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_flagged() {
        let mask = Array2::zeros((4, 4));
        let a = compute_attributes(&mask, &flat_image(4, 4, 0.1));
        assert!(a.empty);
        assert_eq!(a.num_parts, 0);
        assert_eq!(a.area_ratio, 0.0);
    }

    #[test]
    fn two_parts_counted_with_4_connectivity() {
        let mut mask = Array2::zeros((5, 5));
        mask[(0, 0)] = 1.0;
        mask[(1, 1)] = 1.0; // diagonal contact only: separate parts
        mask[(3, 3)] = 1.0;
        mask[(3, 4)] = 1.0;
        let a = compute_attributes(&mask, &flat_image(5, 5, 0.2));
        assert_eq!(a.num_parts, 3);
    }

    #[test]
    fn color_ratio_object_brighter() {
        let mut mask = Array2::zeros((4, 4));
        mask[(1, 1)] = 1.0;
        mask[(1, 2)] = 1.0;
        let mut img = flat_image(4, 4, 0.2);
        for c in 0..3 {
            img[(c, 1, 1)] = 0.8;
            img[(c, 1, 2)] = 0.8;
        }
        let a = compute_attributes(&mask, &img);
        assert!((a.avg_color_ratio - 4.0).abs() < 1e-9, "got {}", a.avg_color_ratio);
    }

    #[test]
    fn diamond_concentration_below_one() {
        // A diagonal "plus" of unit squares cannot fill its rotated
        // bounding rectangle completely.
        let mut mask = Array2::zeros((7, 7));
        for (y, x) in [(1, 3), (2, 2), (2, 3), (2, 4), (3, 1), (3, 2), (3, 3), (3, 4), (3, 5), (4, 2), (4, 3), (4, 4), (5, 3)] {
            mask[(y, x)] = 1.0;
        }
        let a = compute_attributes(&mask, &flat_image(7, 7, 0.5));
        assert!(a.concentration < 1.0);
        assert!(a.concentration > 0.3);
    }

    #[test]
    fn l_shape_matches_exhaustive_rotated_rect_oracle() {
        let mut mask = Array2::zeros((8, 8));
        for y in 1..6 {
            mask[(y, 1)] = 1.0;
        }
        for x in 1..6 {
            mask[(5, x)] = 1.0;
        }
        let got = compute_attributes(&mask, &flat_image(8, 8, 0.4));

        // Oracle: exhaustive search over hull-edge-aligned rectangles
        // computed by rotating all corner points.
        let mut corners = Vec::new();
        let mut area = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                if mask[(y, x)] == 1.0 {
                    area += 1.0;
                    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                        corners.push((x as f64 + dx, y as f64 + dy));
                    }
                }
            }
        }
        let hull = convex_hull(corners.clone());
        let mut best = f64::INFINITY;
        for i in 0..hull.len() {
            let a0 = hull[i];
            let a1 = hull[(i + 1) % hull.len()];
            let theta = (a1.1 - a0.1).atan2(a1.0 - a0.0);
            let (s, c) = theta.sin_cos();
            let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
            for &(px, py) in &corners {
                let rx = px * c + py * s;
                let ry = -px * s + py * c;
                xmin = xmin.min(rx);
                xmax = xmax.max(rx);
                ymin = ymin.min(ry);
                ymax = ymax.max(ry);
            }
            best = best.min((xmax - xmin) * (ymax - ymin));
        }
        let expected = area / best;
        assert!(
            (got.concentration - expected).abs() < 1e-9,
            "{} vs {expected}",
            got.concentration
        );
    }
}
