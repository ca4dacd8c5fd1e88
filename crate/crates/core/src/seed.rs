//! Structure-aware seed locating.
//!
//! Every pixel gets a hard class assignment by comparing its correlation
//! structure against the localization-map stack: the pixel's structure map
//! (rectified cosine against every pixel feature) is scored by a weighted
//! IoU against each candidate class map, and the best-scoring class wins.
//! All of this is deliberately gradient-free — the result is a hard mask,
//! and gradients enter prototype modeling only through the pooled features.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm guard: pixels with feature norm at or below this have zero cosine
/// against everything.
pub const NORM_EPS: f64 = 1e-12;

/// Hard per-pixel assignment over K+1 classes (channel 0 = background),
/// one-hot along the class axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedMask {
    r: Tensor,
}

impl SeedMask {
    /// Wraps a `[K+1,H,W]` one-hot stack; validates one-hotness.
    pub fn new(r: Tensor) -> Result<Self> {
        if r.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: r.shape().to_vec(),
                reason: "seed mask must be [K+1,H,W]".into(),
            });
        }
        let (channels, pixels) = (r.shape()[0], r.shape()[1] * r.shape()[2]);
        for j in 0..pixels {
            let mut ones = 0;
            for c in 0..channels {
                let v = r.data()[c * pixels + j];
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::OutOfRange {
                        op: "SeedMask::new",
                        side: "mask",
                        value: v,
                    });
                }
            }
            if ones != 1 {
                return Err(Error::InvalidShape {
                    shape: r.shape().to_vec(),
                    reason: format!("pixel {j} has {ones} assignments, expected exactly 1"),
                });
            }
        }
        Ok(SeedMask { r })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.r
    }

    pub fn channels(&self) -> usize {
        self.r.shape()[0]
    }

    /// Assigned channel index per pixel, row-major.
    pub fn class_map(&self) -> Vec<u8> {
        let (channels, pixels) = (self.channels(), self.r.shape()[1] * self.r.shape()[2]);
        let mut out = vec![0u8; pixels];
        for (j, slot) in out.iter_mut().enumerate() {
            for c in 0..channels {
                if self.r.data()[c * pixels + j] == 1.0 {
                    *slot = c as u8;
                    break;
                }
            }
        }
        out
    }

    /// Number of pixels assigned to a channel.
    pub fn count(&self, channel: usize) -> usize {
        let pixels = self.r.shape()[1] * self.r.shape()[2];
        self.r.data()[channel * pixels..(channel + 1) * pixels]
            .iter()
            .filter(|&&v| v == 1.0)
            .count()
    }
}

/// Per-pixel feature norms of a `[C,H,W]` map, pixel order row-major.
fn pixel_norms(features: &Tensor) -> Vec<f64> {
    let (channels, pixels) = (features.shape()[0], features.len() / features.shape()[0]);
    let mut norms = vec![0.0; pixels];
    for (j, norm) in norms.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..channels {
            let v = features.data()[c * pixels + j];
            acc += v * v;
        }
        *norm = acc.sqrt();
    }
    norms
}

/// One row of the rectified cosine structure: `S^i(j)` for all j.
/// The self-entry is exactly 1 whenever the pixel has nonzero norm.
fn structure_row(features: &Tensor, norms: &[f64], i: usize, out: &mut [f64]) {
    let (channels, pixels) = (features.shape()[0], norms.len());
    if norms[i] <= NORM_EPS {
        out.fill(0.0);
        return;
    }
    for (j, slot) in out.iter_mut().enumerate() {
        if j == i {
            *slot = 1.0;
            continue;
        }
        if norms[j] <= NORM_EPS {
            *slot = 0.0;
            continue;
        }
        let mut dot = 0.0;
        for c in 0..channels {
            dot += features.data()[c * pixels + i] * features.data()[c * pixels + j];
        }
        let cos = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
        *slot = if cos > 0.0 { cos } else { 0.0 };
    }
}

/// Structure map of pixel `i` (row-major linear index) against every pixel
/// of a `[C,H,W]` feature map: `S^i(j) = ReLU(cos(f^i, F(j)))`, shape
/// `[H,W]`. Zero-norm pixels yield zero similarity.
pub fn structure_map(i: usize, features: &Tensor) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: features.shape().to_vec(),
            reason: "structure_map expects [C,H,W] features".into(),
        });
    }
    let (h, w) = (features.shape()[1], features.shape()[2]);
    if i >= h * w {
        return Err(Error::InvalidShape {
            shape: features.shape().to_vec(),
            reason: format!("pixel index {i} out of range for {h}x{w}"),
        });
    }
    let norms = pixel_norms(features);
    let mut row = vec![0.0; h * w];
    structure_row(features, &norms, i, &mut row);
    Ok(Tensor::from_parts(vec![h, w], row))
}

fn check_unit_range(data: &[f64], op: &'static str, side: &'static str) -> Result<()> {
    for &v in data {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange { op, side, value: v });
        }
    }
    Ok(())
}

/// Weighted IoU between a structure map and a class map (both `[H,W]`,
/// values in `[0,1]`): `Σ M·S / Σ (M + S − M·S)`; 0 when the denominator
/// vanishes.
pub fn structure_similarity(structure: &Tensor, map: &Tensor) -> Result<f64> {
    if structure.shape() != map.shape() {
        return Err(Error::ShapeMismatch {
            op: "structure_similarity",
            left: structure.shape().to_vec(),
            right: map.shape().to_vec(),
        });
    }
    check_unit_range(structure.data(), "structure_similarity", "structure")?;
    check_unit_range(map.data(), "structure_similarity", "map")?;
    Ok(similarity_from_slices(structure.data(), map.data()))
}

/// Core of Eq.-style weighted IoU on raw slices; assumes validated inputs.
fn similarity_from_slices(structure: &[f64], map: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&s, &m) in structure.iter().zip(map) {
        let prod = m * s;
        inter += prod;
        union += m + s - prod;
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-pixel class-similarity scores against a `[K+1,H,W]` localization
/// stack: channel `c` of the result holds `C_c^i` for every pixel `i`.
/// Only the background channel and present foreground classes are scored;
/// other channels are zero.
pub fn similarity_stack(
    features: &Tensor,
    maps: &Tensor,
    present: &[bool],
) -> Result<Tensor> {
    if features.rank() != 3 || maps.rank() != 3 || features.shape()[1..] != maps.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "similarity_stack",
            left: features.shape().to_vec(),
            right: maps.shape().to_vec(),
        });
    }
    if maps.shape()[0] != present.len() + 1 {
        return Err(Error::InvalidShape {
            shape: maps.shape().to_vec(),
            reason: format!("expected {} channels for the label vector", present.len() + 1),
        });
    }
    check_unit_range(maps.data(), "similarity_stack", "maps")?;
    let channels = maps.shape()[0];
    let pixels = maps.shape()[1] * maps.shape()[2];
    let active: Vec<usize> = (0..channels)
        .filter(|&c| c == 0 || present[c - 1])
        .collect();

    let norms = pixel_norms(features);
    let mut out = vec![0.0; channels * pixels];
    let mut row = vec![0.0; pixels];
    for i in 0..pixels {
        structure_row(features, &norms, i, &mut row);
        for &c in &active {
            let map = &maps.data()[c * pixels..(c + 1) * pixels];
            out[c * pixels + i] = similarity_from_slices(&row, map);
        }
    }
    Ok(Tensor::from_parts(maps.shape().to_vec(), out))
}

/// Assigns each pixel to the background or a present foreground class by
/// maximal structure similarity; ties break toward the lowest channel index
/// (background first).
pub fn locate(features: &Tensor, maps: &Tensor, present: &[bool]) -> Result<SeedMask> {
    if !present.iter().any(|&p| p) {
        return Err(Error::NoClassPresent);
    }
    let scores = similarity_stack(features, maps, present)?;
    let channels = scores.shape()[0];
    let pixels = scores.shape()[1] * scores.shape()[2];
    let active: Vec<usize> = (0..channels)
        .filter(|&c| c == 0 || present[c - 1])
        .collect();

    let mut r = vec![0.0; channels * pixels];
    for i in 0..pixels {
        let mut best = active[0];
        let mut best_score = scores.data()[active[0] * pixels + i];
        for &c in &active[1..] {
            let s = scores.data()[c * pixels + i];
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        r[best * pixels + i] = 1.0;
    }
    SeedMask::new(Tensor::from_parts(scores.shape().to_vec(), r))
}
