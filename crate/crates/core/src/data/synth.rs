//! Synthetic shapes: one colored shape per image on a textured, low-saturation
//! background. The class decides the shape (circle, square, triangle, cross,
//! star); color, position and size are random, shapes are axis-aligned. The ground-truth mask is
//! exactly the set of pixels painted with the shape color.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng as _;

use super::{Dataset, Item};
use crate::repro::{self, Rng};

pub const CLASS_NAMES: [&str; 5] = ["circle", "square", "triangle", "cross", "star"];

/// Bounds on the fraction of mask pixels, guaranteed by the generator's size ranges.
pub const MASK_FRACTION_BOUNDS: (f64, f64) = (0.02, 0.4);

/// Generate `n` items; item `i` has label `i % num_classes` and id `shape_{i:05}`.
pub fn synth_shapes(n: usize, num_classes: usize, image_size: usize, seed: u64) -> Dataset {
    assert!((2..=5).contains(&num_classes), "num_classes must be in 2..=5");
    assert!(image_size >= 8, "image_size must be at least 8");
    let mut rng = repro::substream(seed, repro::SYNTH_DATA);
    let items = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let (image, mask) = draw_item(label, image_size, &mut rng);
            Item {
                image,
                label,
                mask: Some(mask),
                image_id: format!("shape_{i:05}"),
            }
        })
        .collect();
    Dataset {
        items,
        class_names: CLASS_NAMES[..num_classes].iter().map(|s| s.to_string()).collect(),
    }
}

/// HSV (h in degrees, s and v in [0, 1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn draw_item(label: usize, size: usize, rng: &mut Rng) -> (Array3<f64>, Array2<bool>) {
    let scale = size as f64 / 32.0;
    // Background: muted base color, two stripe textures and pixel noise.
    let base = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.0..0.25), rng.gen_range(0.35..0.65));
    let mut stripes = [(0.0, 0.0, 0.0); 2];
    for s in stripes.iter_mut() {
        let angle: f64 = rng.gen_range(0.0..PI);
        let freq = rng.gen_range(0.3..1.2) / scale;
        *s = (angle.cos() * freq, angle.sin() * freq, rng.gen_range(0.0..2.0 * PI));
    }
    let mut image = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let t: f64 = stripes
                .iter()
                .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                * 0.03;
            for c in 0..3 {
                let noise = rng.gen_range(-0.05..0.05);
                image[[c, y, x]] = (base[c] + t + noise).clamp(0.0, 1.0);
            }
        }
    }

    let (r_min, r_max) = match label {
        4 => (7.0, 10.0),
        _ => (6.0, 10.0),
    };
    let r = rng.gen_range(r_min..r_max) * scale;
    let margin = r + 1.0;
    let cx = rng.gen_range(margin..(size as f64 - margin));
    let cy = rng.gen_range(margin..(size as f64 - margin));
    let color = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.7..1.0), rng.gen_range(0.75..1.0));

    let mut mask = Array2::from_elem((size, size), false);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if inside(label, dx, dy, r) {
                mask[[y, x]] = true;
                for c in 0..3 {
                    image[[c, y, x]] = color[c];
                }
            }
        }
    }
    (image, mask)
}

fn inside(label: usize, dx: f64, dy: f64, r: f64) -> bool {
    match label {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // Apex up, base at the bottom.
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        3 => {
            let arm = r / 3.0;
            dx.abs() <= r && dy.abs() <= r && (dx.abs() <= arm || dy.abs() <= arm)
        }
        _ => in_star(dx, dy, r),
    }
}

/// Five-pointed star with inner radius 0.45·r, tested by ray casting.
fn in_star(x: f64, y: f64, r: f64) -> bool {
    let pts: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let radius = if i % 2 == 0 { r } else { 0.45 * r };
            let a = -PI / 2.0 + i as f64 * PI / 5.0;
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let a = synth_shapes(30, 3, 32, 7);
        let b = synth_shapes(30, 3, 32, 7);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn mask_fractions_within_bounds() {
        let (lo, hi) = MASK_FRACTION_BOUNDS;
        for classes in [3, 5] {
            let ds = synth_shapes(500, classes, 32, 11);
            for item in &ds.items {
                let mask = item.mask.as_ref().unwrap();
                let frac = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
                assert!(frac >= lo && frac <= hi, "{} has mask fraction {frac}", item.image_id);
            }
        }
    }

    #[test]
    fn classes_balanced() {
        let ds = synth_shapes(301, 3, 32, 1);
        let mut counts = [0usize; 3];
        ds.items.iter().for_each(|i| counts[i.label] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn mask_marks_shape_color() {
        let ds = synth_shapes(20, 5, 32, 3);
        for item in &ds.items {
            let mask = item.mask.as_ref().unwrap();
            let inside: Vec<[f64; 3]> = mask
                .indexed_iter()
                .filter(|(_, m)| **m)
                .map(|((y, x), _)| [item.image[[0, y, x]], item.image[[1, y, x]], item.image[[2, y, x]]])
                .collect();
            assert!(!inside.is_empty());
            assert!(inside.iter().all(|c| *c == inside[0]));
        }
    }

    #[test]
    fn primary_hues() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }
}
