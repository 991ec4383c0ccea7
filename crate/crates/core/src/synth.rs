//! Procedural texture images for the miniature experiments.
//!
//! Each image is a two-colour gradient background with a handful of
//! anti-aliased discs, rectangles and sinusoidal grating patches on top.
//! Everything is drawn from one seed, so a dataset is a seed range.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{rng_at, streams};

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(0.05..0.95))
}

/// Coverage of a point at signed distance `d` (negative inside), with a
/// one-pixel ramp.
fn coverage(d: f32) -> f32 {
    (0.5 - d).clamp(0.0, 1.0)
}

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Grating { cy: f32, cx: f32, r: f32, kx: f32, ky: f32, phase: f32 },
}

impl Shape {
    fn draw(size: f32, rng: &mut impl Rng) -> Self {
        match rng.random_range(0..3) {
            0 => Shape::Disc {
                cy: rng.random_range(0.0..size),
                cx: rng.random_range(0.0..size),
                r: rng.random_range(0.08..0.3) * size,
            },
            1 => {
                let (h, w) = (rng.random_range(0.15..0.6) * size, rng.random_range(0.15..0.6) * size);
                let (y0, x0) = (rng.random_range(-0.1..0.9) * size, rng.random_range(-0.1..0.9) * size);
                Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            }
            _ => {
                let period = rng.random_range(6.0..16.0f32);
                let angle = rng.random_range(0.0..PI);
                let k = 2.0 * PI / period;
                Shape::Grating {
                    cy: rng.random_range(0.0..size),
                    cx: rng.random_range(0.0..size),
                    r: rng.random_range(0.15..0.35) * size,
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            }
        }
    }

    /// Opacity at the pixel centre `(y, x)` and the blend factor between
    /// the shape's two colours.
    fn sample(&self, y: f32, x: f32) -> (f32, f32) {
        match *self {
            Shape::Disc { cy, cx, r } => (coverage(((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r), 0.0),
            Shape::Rect { y0, x0, y1, x1 } => {
                let d = (y0 - y).max(y - y1).max(x0 - x).max(x - x1);
                (coverage(d), 0.0)
            }
            Shape::Grating { cy, cx, r, kx, ky, phase } => {
                let a = coverage(((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r);
                (a, 0.5 + 0.5 * (kx * x + ky * y + phase).sin())
            }
        }
    }
}

/// A `size x size` texture determined by `seed`.
pub fn texture(seed: u64, size: usize) -> ImageTensor {
    let mut rng = rng_at(seed, &[streams::SYNTH]);
    let s = size as f32;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random_range(0.0..2.0 * PI);
    let (gy, gx) = (angle.sin(), angle.cos());
    let n_shapes = rng.random_range(3..=7);
    let shapes: Vec<(Shape, [f32; 3], [f32; 3])> = (0..n_shapes)
        .map(|_| (Shape::draw(s, &mut rng), color(&mut rng), color(&mut rng)))
        .collect();
    let mut img = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let g = (0.5 + ((py / s - 0.5) * gy + (px / s - 0.5) * gx)).clamp(0.0, 1.0);
            let mut rgb = [0f32; 3];
            for c in 0..3 {
                rgb[c] = c0[c] + g * (c1[c] - c0[c]);
            }
            for (shape, a_col, b_col) in &shapes {
                let (alpha, mixf) = shape.sample(py, px);
                if alpha > 0.0 {
                    for c in 0..3 {
                        let col = a_col[c] + mixf * (b_col[c] - a_col[c]);
                        rgb[c] += alpha * (col - rgb[c]);
                    }
                }
            }
            for c in 0..3 {
                img[(c * size + y) * size + x] = rgb[c];
            }
        }
    }
    ImageTensor::from_fn(size, size, |c, y, x| img[(c * size + y) * size + x])
}

/// Textures for seeds `first .. first + n`.
pub fn textures(first: u64, n: usize, size: usize) -> Vec<ImageTensor> {
    (0..n as u64).map(|i| texture(first + i, size)).collect()
}

/// Writes `n` textures as `tex-00000.png`, ... plus a `manifest.txt`.
pub fn write_dataset(dir: &Path, first: u64, n: usize, size: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(n);
    let mut paths = Vec::with_capacity(n);
    for (i, img) in textures(first, n, size).iter().enumerate() {
        let name = format!("tex-{i:05}.png");
        let path = dir.join(&name);
        img.save_png(&path)?;
        names.push(name);
        paths.push(path);
    }
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, names.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(paths)
}
