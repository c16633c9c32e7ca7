//! Seeded synthetic images: rotated ellipses with known orientation and a
//! four-class colored-shape set for end-to-end runs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{write_png, Image};
use crate::train::{Dataset, Sample};

/// Class names of [`shapes_dataset`], in label order.
pub const SHAPE_CLASSES: [&str; 4] = ["brownspot", "healthy", "hispa", "leafblast"];

/// White `height×width` RGB image with a filled ellipse centred at
/// `(x, y)`, semi-axes `(a, b)` and major axis at `angle_deg` from the `x`
/// axis towards `y` (rows point down).
pub fn ellipse_image(height: usize, width: usize, center: (f64, f64), axes: (f64, f64), angle_deg: f64, color: [u8; 3]) -> Image {
    let mut img = Image::filled(height, width, 3, 255);
    let (s, c) = angle_deg.to_radians().sin_cos();
    for r in 0..height {
        for col in 0..width {
            let (dx, dy) = (col as f64 - center.0, r as f64 - center.1);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            if (u / axes.0).powi(2) + (v / axes.1).powi(2) <= 1.0 {
                img.pixel_mut(r, col).copy_from_slice(&color);
            }
        }
    }
    img
}

/// Sprinkles `count` dark single pixels at seeded positions.
pub fn add_speckle(img: &mut Image, count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        let (r, c) = (rng.gen_range(0..img.height), rng.gen_range(0..img.width));
        img.pixel_mut(r, c).fill(20);
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    base.map(|v| (v as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

/// One leaf-like image of class `label` (index into [`SHAPE_CLASSES`]).
///
/// Every image is a green elliptical leaf on a noisy light background; the
/// classes differ in the marks on the leaf: brown round spots, none,
/// short dark-blue streaks, or pale diamond lesions.
pub fn shape_image(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    if label >= SHAPE_CLASSES.len() {
        return Err(Error::InvalidArgument(format!("shape class {} out of range", label)));
    }
    let s = size as f64;
    let mut img = Image::filled(size, size, 3, 0);
    for r in 0..size {
        for c in 0..size {
            let px = jitter(rng, [235, 235, 225], 8);
            img.pixel_mut(r, c).copy_from_slice(&px);
        }
    }
    let center = (s * rng.gen_range(0.42..0.58), s * rng.gen_range(0.42..0.58));
    let axes = (s * rng.gen_range(0.34..0.44), s * rng.gen_range(0.16..0.24));
    let angle: f64 = rng.gen_range(-35.0..35.0);
    let leaf = jitter(rng, [60, 150, 55], 20);
    let (sn, cs) = angle.to_radians().sin_cos();
    let inside = |x: f64, y: f64| {
        let (dx, dy) = (x - center.0, y - center.1);
        let u = cs * dx + sn * dy;
        let v = -sn * dx + cs * dy;
        (u / axes.0).powi(2) + (v / axes.1).powi(2) <= 1.0
    };
    for r in 0..size {
        for c in 0..size {
            if inside(c as f64, r as f64) {
                let px = jitter(rng, leaf, 6);
                img.pixel_mut(r, c).copy_from_slice(&px);
            }
        }
    }
    // marks are placed at points on the leaf
    let marks = rng.gen_range(5..9);
    for _ in 0..marks {
        let t: f64 = rng.gen_range(-0.7..0.7);
        let w: f64 = rng.gen_range(-0.5..0.5);
        let (u, v) = (t * axes.0, w * axes.1);
        let mx = center.0 + cs * u - sn * v;
        let my = center.1 + sn * u + cs * v;
        let rad = s * rng.gen_range(0.09..0.13);
        for r in 0..size {
            for c in 0..size {
                let (dx, dy) = (c as f64 - mx, r as f64 - my);
                let hit = match label {
                    0 => dx * dx + dy * dy <= rad * rad,
                    2 => (dy - dx * 0.3).abs() <= rad * 0.5 && dx.abs() <= rad * 2.0,
                    3 => dx.abs() / (rad * 1.8) + dy.abs() / (rad * 0.9) <= 1.0,
                    _ => false,
                };
                if hit && inside(c as f64, r as f64) {
                    let color = match label {
                        0 => [140, 60, 10],
                        2 => [30, 30, 120],
                        _ => [230, 230, 160],
                    };
                    img.pixel_mut(r, c).copy_from_slice(&jitter(rng, color, 10));
                }
            }
        }
    }
    Ok(img)
}

/// Balanced dataset of `per_class` images per class, fully determined by `seed`.
pub fn shapes_dataset(per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 || size < 8 {
        return Err(Error::InvalidArgument("need at least one image per class and size >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
    for i in 0..per_class {
        for (label, name) in SHAPE_CLASSES.iter().enumerate() {
            let img = shape_image(label, size, &mut rng)?;
            samples.push(Sample {
                image: img.to_tensor(),
                label,
                path: PathBuf::from(format!("{}/{:04}.png", name, i)),
            });
        }
    }
    Dataset::new(samples, SHAPE_CLASSES.iter().map(|s| s.to_string()).collect())
}

/// Writes the same images as [`shapes_dataset`] as `root/<class>/NNNN.png`.
pub fn write_shapes_dataset(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in SHAPE_CLASSES {
        std::fs::create_dir_all(root.join(name)).map_err(|e| Error::io(&root.join(name), e))?;
    }
    for i in 0..per_class {
        for (label, name) in SHAPE_CLASSES.iter().enumerate() {
            let img = shape_image(label, size, &mut rng)?;
            write_png(&img, &root.join(name).join(format!("{:04}.png", i)))?;
        }
    }
    Ok(())
}
