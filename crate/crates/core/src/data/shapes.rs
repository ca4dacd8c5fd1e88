//! Deterministic multi-label shapes generator.
//!
//! Each 64×64 image carries one to three non-overlapping shapes from five
//! classes on a two-tone gray noise background. A shape has a desaturated,
//! noisy body in a class-correlated hue plus a small, high-saturation
//! striped marker patch — the marker is easy for a classifier to latch
//! onto, so image-level training alone tends to highlight the marker and
//! miss the body.

use rayon::prelude::*;

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

use super::{Mask, Sample, CLASSES, MIN_CLASS_PIXELS, SIDE};

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

const KINDS: [ShapeKind; CLASSES] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
];

impl ShapeKind {
    /// Membership test in shape-local coordinates, `s` = half-extent.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= 0.9 * s && dy.abs() <= 0.9 * s,
            // Point-up triangle: width grows linearly toward the base.
            ShapeKind::Triangle => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
            ShapeKind::Cross => {
                (dx.abs() <= 0.35 * s && dy.abs() <= s)
                    || (dy.abs() <= 0.35 * s && dx.abs() <= s)
            }
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= s * s && r2 >= (0.6 * s) * (0.6 * s)
            }
        }
    }

    /// Marker disk (center offset from the shape center, radius), chosen so
    /// the disk stays inside the shape body.
    fn marker(self, s: f64, rng: &mut SplitMix64) -> (f64, f64, f64) {
        match self {
            ShapeKind::Circle | ShapeKind::Square | ShapeKind::Triangle => {
                let angle = rng.uniform(0.0, std::f64::consts::TAU);
                let (ox, oy) = match self {
                    // Keep the marker toward the triangle's wide base.
                    ShapeKind::Triangle => (0.35 * s * angle.cos(), 0.45 * s),
                    _ => (0.45 * s * angle.cos(), 0.45 * s * angle.sin()),
                };
                (ox, oy, 0.42 * s)
            }
            ShapeKind::Cross => {
                let arm = rng.below(4);
                let d = 0.55 * s;
                let (ox, oy) = [(d, 0.0), (-d, 0.0), (0.0, d), (0.0, -d)][arm];
                (ox, oy, 0.3 * s)
            }
            ShapeKind::Ring => {
                let angle = rng.uniform(0.0, std::f64::consts::TAU);
                (0.8 * s * angle.cos(), 0.8 * s * angle.sin(), 0.19 * s)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = (h.floor() as usize).min(5);
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Placed {
    class: usize,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    s: f64,
    hue: f64,
    marker: (f64, f64, f64),
}

/// Generates one sample from its own derived stream (`seed ⊕ index`), so
/// samples are independent of generation order and worker count.
pub fn generate_one(seed: u64, index: usize) -> Sample {
    let mut rng = SplitMix64::stream(seed, index as u64);
    let side = SIDE as f64;

    // Background: two gray tones with per-pixel speckle.
    let (lo_tone, hi_tone) = (rng.uniform(0.38, 0.46), rng.uniform(0.54, 0.62));
    let mut rgb = vec![0.0f64; 3 * SIDE * SIDE];
    for j in 0..SIDE * SIDE {
        let tone = if rng.below(2) == 0 { lo_tone } else { hi_tone };
        let v = (tone + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
        rgb[j] = v;
        rgb[SIDE * SIDE + j] = v;
        rgb[2 * SIDE * SIDE + j] = v;
    }

    // Choose 1–3 distinct classes and place their shapes without overlap.
    let count = 1 + rng.below(3);
    let mut classes: Vec<usize> = (0..CLASSES).collect();
    rng.shuffle(&mut classes);
    classes.truncate(count);

    let mut placed: Vec<Placed> = Vec::new();
    for &class in &classes {
        let kind = KINDS[class];
        let s = rng.uniform(8.0, 13.0);
        for _attempt in 0..20 {
            let cx = rng.uniform(s + 3.0, side - 3.0 - s);
            let cy = rng.uniform(s + 3.0, side - 3.0 - s);
            let clear = placed.iter().all(|p| {
                let (dx, dy) = (p.cx - cx, p.cy - cy);
                (dx * dx + dy * dy).sqrt() >= p.s + s + 3.0
            });
            if clear {
                let hue = class as f64 / CLASSES as f64 + rng.uniform(-0.05, 0.05);
                let marker = kind.marker(s, &mut rng);
                placed.push(Placed {
                    class,
                    kind,
                    cx,
                    cy,
                    s,
                    hue,
                    marker,
                });
                break;
            }
        }
    }

    let mut gt = vec![0u8; SIDE * SIDE];
    for p in &placed {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (dx, dy) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
                if !p.kind.contains(dx, dy, p.s) {
                    continue;
                }
                let j = y * SIDE + x;
                gt[j] = (p.class + 1) as u8;
                let (mx, my, mr) = p.marker;
                let in_marker = {
                    let (ex, ey) = (dx - mx, dy - my);
                    ex * ex + ey * ey <= mr * mr
                };
                let color = if in_marker {
                    // High-saturation diagonal stripes, 2 px wide.
                    let bright = ((x + y) >> 1) & 1 == 0;
                    hsv_to_rgb(p.hue, 0.95, if bright { 1.0 } else { 0.3 })
                } else {
                    let sat = 0.30 + rng.uniform(-0.06, 0.06);
                    let val = 0.50 + rng.uniform(-0.10, 0.10);
                    hsv_to_rgb(p.hue, sat, val)
                };
                for (c, &v) in color.iter().enumerate() {
                    rgb[c * SIDE * SIDE + j] = v;
                }
            }
        }
    }

    // Snap to the 8-bit grid so a disk round trip is lossless.
    for v in &mut rgb {
        *v = (*v * 255.0).round() / 255.0;
    }

    // Image-level labels follow the mask, not the placement attempts.
    let mut pixel_counts = [0usize; CLASSES];
    for &g in &gt {
        if g > 0 {
            pixel_counts[g as usize - 1] += 1;
        }
    }
    let y: Vec<f64> = pixel_counts
        .iter()
        .map(|&c| if c >= MIN_CLASS_PIXELS { 1.0 } else { 0.0 })
        .collect();

    Sample {
        name: format!("sample_{index:05}"),
        image: Tensor::new(vec![3, SIDE, SIDE], rgb).expect("generated image is finite"),
        y,
        gt: Some(Mask {
            width: SIDE,
            height: SIDE,
            data: gt,
        }),
    }
}

/// Generates `n` samples in parallel; output is independent of the worker
/// count and identical across runs for a fixed seed.
pub fn generate(n: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(seed, i))
        .collect()
}
