//! Class activation maps: raw per-class score maps, max-normalization,
//! background estimation, and classification logits.
//!
//! A localization stack ([`LocMaps`]) always has `K+1` channels: channel 0 is
//! the background map, channels `1..=K` are the foreground classes in dataset
//! order. Two kinds exist — the general stack derived from the classifier
//! weights, and the image-specific stack derived from per-image prototypes —
//! and the consistency loss requires one of each.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Background attenuation coefficient.
pub const ALPHA: f64 = 0.5;

/// Channel-max floor in normalization, guarding all-zero channels.
pub const NORM_EPS: f64 = 1e-5;

/// Which side of the general/specific pair a stack belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    /// Derived from the shared classifier weights (the plain CAM).
    General,
    /// Derived from image-specific prototypes.
    ImageSpecific,
}

/// A `[K+1, H, W]` stack of localization maps recorded on a tape.
/// Channel 0 is background; channels `1..=K` are foreground classes in
/// dataset order. All values lie in `[0,1]`.
#[derive(Clone, Copy)]
pub struct LocMaps {
    pub maps: Var,
    pub kind: MapKind,
}

impl LocMaps {
    /// Foreground class count (channel count minus background).
    pub fn classes(&self, tape: &Tape) -> Result<usize> {
        Ok(tape.shape(self.maps)?[0] - 1)
    }
}

/// Pre-activation score map: `scores[k](j) = θ_k · F_s(j)`, computed as a
/// bias-free 1×1 convolution. This is the quantity both the logits and the
/// CAM are derived from.
pub fn scores(tape: &Tape, f_s: Var, theta: Var) -> Result<Var> {
    let tshape = tape.shape(theta)?;
    if tshape.len() != 2 {
        return Err(Error::InvalidShape {
            shape: tshape,
            reason: "classifier weights must be [K, C_s]".into(),
        });
    }
    let kernel = tape.reshape(theta, &[tshape[0], tshape[1], 1, 1])?;
    tape.conv2d(f_s, kernel, 1, 0)
}

/// Per-class activation map `ReLU(θ_kᵀ F_s)`.
pub fn raw_cam(tape: &Tape, scores: Var) -> Result<Var> {
    tape.relu(scores)
}

/// Classification logits: spatial mean of the pre-activation score map, one
/// per class. Averaging the raw scores (not the rectified map) keeps the
/// classification gradient alive for negative classes.
pub fn logits(tape: &Tape, scores: Var) -> Result<Var> {
    tape.mean(scores, &[1, 2])
}

/// Per-channel normalization factors `1 / max(channel_max, ε)` computed from
/// a raw `[K,H,W]` map. Exposed separately so a derivative check can freeze
/// them: the normalizer is treated as a constant by the gradient.
pub fn norm_factors(raw: &Tensor) -> Result<Vec<f64>> {
    if raw.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: raw.shape().to_vec(),
            reason: "normalization expects a [K,H,W] stack".into(),
        });
    }
    let (k, chunk) = (raw.shape()[0], raw.shape()[1] * raw.shape()[2]);
    let mut factors = Vec::with_capacity(k);
    for c in 0..k {
        let mut m = f64::NEG_INFINITY;
        for &v in &raw.data()[c * chunk..(c + 1) * chunk] {
            if v > m {
                m = v;
            }
        }
        factors.push(1.0 / m.max(NORM_EPS));
    }
    Ok(factors)
}

/// Scales each channel into `[0,1]` by the given factors (normally from
/// [`norm_factors`]; a frozen copy during derivative checks). The factors
/// carry no gradient, so gradient flows through the numerator only.
pub fn normalize(tape: &Tape, raw: Var, factors: &[f64]) -> Result<Var> {
    tape.channel_scale(raw, factors)
}

/// Background map `M_b = α(1 − max_k M_k)` from a normalized `[K,H,W]`
/// foreground stack; result is `[1,H,W]`.
pub fn background(tape: &Tape, m_f: Var) -> Result<Var> {
    let shape = tape.shape(m_f)?;
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape,
            reason: "background expects a [K,H,W] stack".into(),
        });
    }
    let peak = tape.max(m_f, &[0])?;
    let scaled = tape.mul_scalar(peak, -ALPHA)?;
    let m_b = tape.add_scalar(scaled, ALPHA)?;
    tape.reshape(m_b, &[1, shape[1], shape[2]])
}

/// Stacks background and foreground maps into a `[K+1,H,W]` LocMaps.
pub fn assemble(tape: &Tape, m_b: Var, m_f: Var, kind: MapKind) -> Result<LocMaps> {
    let maps = tape.concat(&[m_b, m_f])?;
    Ok(LocMaps { maps, kind })
}
