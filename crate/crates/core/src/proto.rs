//! Image-specific prototypes and the activation maps they induce.
//!
//! Each labeled class (plus, optionally, the background) gets a prototype:
//! the mean feature over its seed pixels. Correlating every pixel against
//! the prototypes with a rectified cosine yields a second localization
//! stack that highlights whole objects instead of just their most
//! discriminative parts. Gradients flow through the pooled features and
//! the correlation, never through the hard seed assignment.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::cam::{self, LocMaps, MapKind};
use crate::error::{Error, Result};
use crate::seed::SeedMask;
use crate::tensor::{write_tensor, Tape, Tensor, Var};

/// Constant pooling recipe for prototype extraction: per-row pixel weights
/// (seed indicators, or a one-hot fallback at the row's map peak) with
/// matching divisors. The plan is plain data — gradients flow only through
/// the pooled features — and capturing one freezes the seed assignment, so
/// a finite-difference probe sees exactly the function the tape
/// differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPlan {
    /// `[K+1, H·W]` nonnegative weights; row 0 is the background.
    pub weights: Tensor,
    /// Positive divisor per row (seed count, or 1 for fallback and
    /// inactive rows).
    pub divisors: Vec<f64>,
    /// Which rows produce a real prototype: background iff modeled,
    /// foreground iff labeled present.
    pub valid: Vec<bool>,
}

impl PoolPlan {
    pub fn classes(&self) -> usize {
        self.valid.len() - 1
    }

    pub fn pixels(&self) -> usize {
        self.weights.shape()[1]
    }

    fn row_weights(&self, rows: std::ops::Range<usize>) -> Tensor {
        let n = self.pixels();
        let data = self.weights.data()[rows.start * n..rows.end * n].to_vec();
        Tensor::from_parts(vec![rows.end - rows.start, n], data)
    }
}

/// Builds the pooling recipe for one image from its seed assignment.
///
/// Active rows are the background (when `model_background`) and every
/// labeled-present class. An active row with seed pixels pools their mean;
/// an active row with no seeds falls back to the single pixel where that
/// row's localization map peaks (ties toward the lowest linear index).
/// Inactive rows get zero weights and stay invalid.
pub fn pool_plan(
    seeds: &SeedMask,
    present: &[bool],
    maps: &Tensor,
    model_background: bool,
) -> Result<PoolPlan> {
    if seeds.tensor().shape() != maps.shape() {
        return Err(Error::ShapeMismatch {
            op: "pool_plan",
            left: seeds.tensor().shape().to_vec(),
            right: maps.shape().to_vec(),
        });
    }
    let channels = maps.shape()[0];
    if channels != present.len() + 1 {
        return Err(Error::InvalidShape {
            shape: maps.shape().to_vec(),
            reason: format!("expected {} channels for the label vector", present.len() + 1),
        });
    }
    let pixels = maps.shape()[1] * maps.shape()[2];
    let mut weights = vec![0.0; channels * pixels];
    let mut divisors = vec![1.0; channels];
    let mut valid = vec![false; channels];

    for k in 0..channels {
        let active = if k == 0 { model_background } else { present[k - 1] };
        if !active {
            continue;
        }
        valid[k] = true;
        let count = seeds.count(k);
        if count > 0 {
            let row = &seeds.tensor().data()[k * pixels..(k + 1) * pixels];
            weights[k * pixels..(k + 1) * pixels].copy_from_slice(row);
            divisors[k] = count as f64;
        } else {
            // Degenerate image: no pixel was assigned to this active row.
            // Use the strongest pixel of its own localization map so a
            // prototype always exists for every labeled class.
            let map = &maps.data()[k * pixels..(k + 1) * pixels];
            let mut best = 0;
            for (j, &v) in map.iter().enumerate() {
                if v > map[best] {
                    best = j;
                }
            }
            weights[k * pixels + best] = 1.0;
        }
    }

    Ok(PoolPlan {
        weights: Tensor::from_parts(vec![channels, pixels], weights),
        divisors,
        valid,
    })
}

/// Per-image class prototypes. Foreground prototypes live in whichever
/// feature space the pipeline selected; the background prototype, when
/// modeled, always lives in the hierarchical space.
#[derive(Debug, Clone)]
pub struct Prototypes {
    fg: Var,
    bg: Option<Var>,
    valid: Vec<bool>,
}

impl Prototypes {
    /// `[K, C]` stack of foreground prototypes (invalid rows are zero).
    pub fn foreground(&self) -> Var {
        self.fg
    }

    /// `[1, C_h]` background prototype, when background modeling is on.
    pub fn background(&self) -> Option<Var> {
        self.bg
    }

    /// Validity per row, background first.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn classes(&self) -> usize {
        self.valid.len() - 1
    }

    /// Writes `{stem}.tnsr` with the prototype records (background first
    /// when present, then the foreground stack) and `{stem}.txt` listing
    /// the per-row validity flags.
    pub fn save(&self, tape: &Tape, stem: &Path) -> Result<()> {
        let tnsr_path = stem.with_extension("tnsr");
        let txt_path = stem.with_extension("txt");
        let tnsr_name = tnsr_path.display().to_string();
        let mut out = BufWriter::new(
            File::create(&tnsr_path).map_err(|e| Error::io(&tnsr_name, e))?,
        );
        if let Some(bg) = self.bg {
            write_tensor(&mut out, &tnsr_name, &tape.value(bg)?)?;
        }
        write_tensor(&mut out, &tnsr_name, &tape.value(self.fg)?)?;
        out.flush()
            .map_err(|e| Error::io(&tnsr_name, e))?;

        let txt_name = txt_path.display().to_string();
        let mut txt = String::new();
        txt.push_str(&format!(
            "records={}\n",
            if self.bg.is_some() { 2 } else { 1 }
        ));
        for (row, v) in self.valid.iter().enumerate() {
            txt.push_str(&format!("row{row},{v}\n"));
        }
        std::fs::write(&txt_path, txt).map_err(|e| Error::io(&txt_name, e))
    }
}

/// Pools prototypes from flattened feature maps.
///
/// `features` is the `[C_f, H·W]` stack chosen for foreground prototypes;
/// `hier` is the `[C_h, H·W]` hierarchical stack, which always hosts the
/// background prototype. Rows of the plan with zero weights pool to zero
/// vectors, which downstream correlation treats as inert.
pub fn extract(tape: &Tape, features: Var, hier: Var, plan: &PoolPlan) -> Result<Prototypes> {
    let n = plan.pixels();
    for (var, name) in [(features, "features"), (hier, "hier")] {
        let shape = tape.shape(var)?;
        if shape.len() != 2 || shape[1] != n {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("extract expects {name} as [C,{n}]"),
            });
        }
    }
    let channels = plan.classes() + 1;
    let fg = tape.weighted_pool(
        features,
        &plan.row_weights(1..channels),
        &plan.divisors[1..],
    )?;
    let bg = if plan.valid[0] {
        Some(tape.weighted_pool(hier, &plan.row_weights(0..1), &plan.divisors[..1])?)
    } else {
        None
    };
    Ok(Prototypes {
        fg,
        bg,
        valid: plan.valid.clone(),
    })
}

/// Correlates every pixel against the prototypes: rectified cosine per
/// foreground class, plus a background channel — either the background
/// prototype's own correlation or, without one, the attenuated complement
/// of the strongest foreground activation. Returns an image-specific
/// localization stack in `[0,1]` with zero channels for absent classes.
pub fn iscam(
    tape: &Tape,
    features: Var,
    hier: Var,
    protos: &Prototypes,
    height: usize,
    width: usize,
) -> Result<LocMaps> {
    let n = height * width;
    for var in [features, hier] {
        let shape = tape.shape(var)?;
        if shape.len() != 2 || shape[1] != n {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("iscam expects flattened [C,{n}] features"),
            });
        }
    }
    let k = protos.classes();
    let cos_fg = tape.cosine_map(features, protos.fg)?;
    let act_fg = tape.relu(cos_fg)?;
    let m_fg = tape.reshape(act_fg, &[k, height, width])?;
    let m_bg = match protos.bg {
        Some(bg) => {
            let cos_bg = tape.cosine_map(hier, bg)?;
            let act_bg = tape.relu(cos_bg)?;
            tape.reshape(act_bg, &[1, height, width])?
        }
        None => cam::background(tape, m_fg)?,
    };
    cam::assemble(tape, m_bg, m_fg, MapKind::ImageSpecific)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedMask;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn seeds(shape: &[usize], data: &[f64]) -> SeedMask {
        SeedMask::new(tensor(shape, data)).unwrap()
    }

    #[test]
    fn extract_means_seed_features() {
        let tape = Tape::new();
        // Two pixels, both assigned to class 1, features [1,2] and [5,6].
        let f = tape.constant(tensor(&[2, 2], &[1.0, 5.0, 2.0, 6.0]));
        let r = seeds(&[2, 1, 2], &[0.0, 0.0, 1.0, 1.0]);
        let maps = tensor(&[2, 1, 2], &[0.0, 0.0, 1.0, 1.0]);
        let plan = pool_plan(&r, &[true], &maps, false).unwrap();
        let p = extract(&tape, f, f, &plan).unwrap();
        assert_eq!(tape.value(p.foreground()).unwrap().data(), &[3.0, 4.0]);
        assert!(p.background().is_none());
        assert_eq!(p.valid(), &[false, true]);
    }

    #[test]
    fn single_pixel_seed_copies_the_feature() {
        let tape = Tape::new();
        let f = tape.constant(tensor(&[2, 2], &[1.0, 5.0, 2.0, 6.0]));
        // Pixel 0 → background, pixel 1 → class 1.
        let r = seeds(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let maps = tensor(&[2, 1, 2], &[0.5, 0.5, 0.5, 0.5]);
        let plan = pool_plan(&r, &[true], &maps, true).unwrap();
        let p = extract(&tape, f, f, &plan).unwrap();
        assert_eq!(tape.value(p.foreground()).unwrap().data(), &[5.0, 6.0]);
        let bg = tape.value(p.background().unwrap()).unwrap();
        assert_eq!(bg.data(), &[1.0, 2.0]);
    }

    #[test]
    fn empty_seed_row_falls_back_to_map_peak() {
        let tape = Tape::new();
        let f = tape.constant(tensor(&[1, 3], &[10.0, 20.0, 30.0]));
        // All pixels went to background; class 1 is present but seedless.
        let r = seeds(&[2, 1, 3], &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let maps = tensor(&[2, 1, 3], &[0.9, 0.9, 0.9, 0.1, 0.8, 0.3]);
        let plan = pool_plan(&r, &[true], &maps, true).unwrap();
        assert_eq!(plan.divisors, vec![3.0, 1.0]);
        let p = extract(&tape, f, f, &plan).unwrap();
        // Class-1 map peaks at pixel 1 → prototype is that pixel's feature.
        assert_eq!(tape.value(p.foreground()).unwrap().data(), &[20.0]);
    }

    #[test]
    fn inactive_rows_pool_to_zero() {
        let tape = Tape::new();
        let f = tape.constant(tensor(&[1, 2], &[1.0, 2.0]));
        let r = seeds(&[3, 1, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let maps = tensor(&[3, 1, 2], &[0.5; 6]);
        let plan = pool_plan(&r, &[true, false], &maps, true).unwrap();
        assert_eq!(plan.valid, vec![true, true, false]);
        let p = extract(&tape, f, f, &plan).unwrap();
        let fg = tape.value(p.foreground()).unwrap();
        assert_eq!(fg.data(), &[2.0, 0.0]); // class 2 row is zero
    }

    #[test]
    fn iscam_cosine_values() {
        let tape = Tape::new();
        // Pixel 0 feature [1,0]; pixel 1 feature [-1,0]; pixel 2 feature
        // [1,0] again. Prototype for the single class: [1,1].
        let f = tape.constant(tensor(&[2, 3], &[1.0, -1.0, 1.0, 0.0, 0.0, 0.0]));
        let r = seeds(&[2, 1, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let maps = tensor(&[2, 1, 3], &[0.5; 6]);
        let plan = pool_plan(&r, &[true], &maps, true).unwrap();
        let p = extract(&tape, f, f, &plan).unwrap();
        // Seed pixels 0 and 2 both carry [1,0] → prototype [1,0].
        let m = iscam(&tape, f, f, &p, 1, 3).unwrap();
        let maps_v = tape.value(m.maps).unwrap();
        assert_eq!(maps_v.shape(), &[2, 1, 3]);
        // Foreground channel: cos with [1,0] → 1, ReLU(-1) → 0, 1.
        assert_eq!(&maps_v.data()[3..6], &[1.0, 0.0, 1.0]);
        // Background prototype is pixel 1's feature [-1,0]: cosine -1 → 0
        // after rectification, self-pixel → 1.
        assert_eq!(&maps_v.data()[0..3], &[0.0, 1.0, 0.0]);
        assert_eq!(m.kind, MapKind::ImageSpecific);
    }

    #[test]
    fn iscam_oblique_prototype_example() {
        let tape = Tape::new();
        let f = tape.constant(tensor(&[2, 1], &[1.0, 0.0]));
        let protos = Prototypes {
            fg: tape.constant(tensor(&[1, 2], &[1.0, 1.0])),
            bg: None,
            valid: vec![false, true],
        };
        let m = iscam(&tape, f, f, &protos, 1, 1).unwrap();
        let v = tape.value(m.maps).unwrap();
        assert!((v.data()[1] - 0.70711).abs() < 1e-5);
        // Without a background prototype the background channel is the
        // attenuated complement: 0.5·(1 − 0.70711…).
        assert!((v.data()[0] - 0.5 * (1.0 - v.data()[1])).abs() < 1e-15);
    }

    #[test]
    fn absent_class_channel_is_zero() {
        let tape = Tape::new();
        let f = tape.constant(tensor(&[1, 2], &[1.0, 2.0]));
        let r = seeds(&[3, 1, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let maps = tensor(&[3, 1, 2], &[0.5; 6]);
        let plan = pool_plan(&r, &[true, false], &maps, true).unwrap();
        let p = extract(&tape, f, f, &plan).unwrap();
        let m = iscam(&tape, f, f, &p, 1, 2).unwrap();
        let v = tape.value(m.maps).unwrap();
        assert_eq!(&v.data()[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn orthogonal_regions_give_exact_indicators() {
        let tape = Tape::new();
        // Left pixel pair carries [1,0]; right pair carries [0,1].
        let f = tape.constant(tensor(
            &[2, 4],
            &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        ));
        // Class 1 seeds = left region, background seeds = right region.
        let r = seeds(&[2, 1, 4], &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let maps = tensor(&[2, 1, 4], &[0.5; 8]);
        let plan = pool_plan(&r, &[true], &maps, true).unwrap();
        let p = extract(&tape, f, f, &plan).unwrap();
        let m = iscam(&tape, f, f, &p, 1, 4).unwrap();
        let v = tape.value(m.maps).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scaling_features_leaves_iscam_unchanged() {
        let tape = Tape::new();
        let base = tensor(&[2, 3], &[0.3, -0.7, 1.1, 0.9, 0.2, -0.4]);
        let scaled = base.mul_scalar(7.5).unwrap();
        let r = seeds(&[2, 1, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let maps = tensor(&[2, 1, 3], &[0.5; 6]);
        let plan = pool_plan(&r, &[true], &maps, true).unwrap();

        let run = |feat: &Tensor| {
            let f = tape.constant(feat.clone());
            let p = extract(&tape, f, f, &plan).unwrap();
            let m = iscam(&tape, f, f, &p, 1, 3).unwrap();
            tape.value(m.maps).unwrap()
        };
        let a = run(&base);
        let b = run(&scaled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn save_writes_records_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let tape = Tape::new();
        let f = tape.constant(tensor(&[2, 2], &[1.0, 5.0, 2.0, 6.0]));
        let r = seeds(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let maps = tensor(&[2, 1, 2], &[0.5; 4]);
        let plan = pool_plan(&r, &[true], &maps, true).unwrap();
        let p = extract(&tape, f, f, &plan).unwrap();
        let stem = dir.path().join("protos");
        p.save(&tape, &stem).unwrap();

        let bytes = std::fs::read(stem.with_extension("tnsr")).unwrap();
        let mut cursor = std::io::Cursor::new(bytes);
        let mut offset = 0u64;
        let bg = crate::tensor::read_tensor(&mut cursor, "protos.tnsr", &mut offset).unwrap();
        let fg = crate::tensor::read_tensor(&mut cursor, "protos.tnsr", &mut offset).unwrap();
        assert_eq!(bg.data(), &[1.0, 2.0]);
        assert_eq!(fg.data(), &[5.0, 6.0]);

        let txt = std::fs::read_to_string(stem.with_extension("txt")).unwrap();
        assert_eq!(txt, "records=2\nrow0,true\nrow1,true\n");
    }
}
