//! Procedurally rendered polygons with a viewpoint grid, small enough for CI.
//!
//! Class `k` is a polygon with `k + 3` vertices, one of which is pushed
//! outwards so every in-plane rotation looks different. The azimuth code sets
//! the rotation (10° per code), the elevation index squashes the shape
//! vertically, lighting sets the intensity and the instance sets the size.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Image, Sample, Viewpoint};
use crate::error::{Error, Result};

pub const CLASSES: usize = 3;
pub const SIDE: usize = 32;
const SUPERSAMPLE: usize = 4;

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn render(label: usize, view: Viewpoint, rng: &mut ChaCha8Rng) -> Image {
    let sides = label + 3;
    let radius = 8.0 + 0.5 * view.instance as f64;
    let angle = view.azimuth_degrees() as f64 * PI / 180.0 + rng.gen_range(-0.05..0.05);
    let squash = 1.0 - 0.06 * view.elevation as f64;
    let (cx, cy) = (16.0 + rng.gen_range(-2.0..2.0), 16.0 + rng.gen_range(-2.0..2.0));
    let poly: Vec<(f64, f64)> = (0..sides)
        .map(|k| {
            let r = if k == 0 { 1.45 * radius } else { radius };
            let t = angle + 2.0 * PI * k as f64 / sides as f64;
            (cx + r * t.cos(), cy + squash * r * t.sin())
        })
        .collect();
    let level = 0.5 + 0.1 * view.lighting as f64;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut pixels = Vec::with_capacity(SIDE * SIDE);
    for py in 0..SIDE {
        for px in 0..SIDE {
            let mut covered = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    covered += inside(&poly, x, y) as usize;
                }
            }
            let v = level * covered as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            pixels.push((v * 255.0).round() as u8);
        }
    }
    Image::new(1, SIDE, SIDE, pixels).expect("square canvas")
}

/// `n` samples; labels cycle through the classes and viewpoints walk the
/// 18 azimuths x 9 elevations grid, so both are balanced.
pub fn synthetic_dataset(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::ConfigInvalid("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let label = i % CLASSES;
            let view = Viewpoint {
                instance: rng.gen_range(0..10),
                elevation: ((i / (CLASSES * 18)) % 9) as u8,
                azimuth: (2 * ((i / CLASSES) % 18)) as u8,
                lighting: rng.gen_range(0..6),
            };
            Sample {
                image: render(label, view, &mut rng),
                label,
                meta: Some(view),
            }
        })
        .collect())
}
