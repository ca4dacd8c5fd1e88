//! Synthetic multi-label shapes benchmark: generation, disk formats, and
//! the sample/mask types shared with evaluation.
//!
//! On disk a dataset directory holds `labels.csv` (header `file,labels`,
//! one row per sample with a little-endian class bitmask), one binary PPM
//! per image, and optionally one binary PGM per ground-truth mask. Masks
//! store raw class indices (0 = background, `k+1` = class `k`).

mod netpbm;
mod shapes;

pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use shapes::{generate, generate_one};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Foreground class count.
pub const CLASSES: usize = 5;
/// Image side length in pixels.
pub const SIDE: usize = 64;
/// A class counts as present when it occupies at least this many pixels.
pub const MIN_CLASS_PIXELS: usize = 16;

/// Dense label image; values are class indices with 255 reserved as the
/// evaluation ignore value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// One benchmark image with its multi-hot labels and, when available, the
/// pixel ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    /// `[3, 64, 64]` values in `[0,1]`, quantized to the 8-bit grid.
    pub image: Tensor,
    /// Multi-hot class labels, length [`CLASSES`].
    pub y: Vec<f64>,
    pub gt: Option<Mask>,
}

impl Sample {
    /// Label vector as presence flags.
    pub fn present(&self) -> Vec<bool> {
        self.y.iter().map(|&v| v == 1.0).collect()
    }
}

/// Horizontal flip of a `[C,H,W]` tensor.
pub fn hflip(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0; image.len()];
    for ci in 0..c {
        for y in 0..h {
            let row = ci * h * w + y * w;
            for x in 0..w {
                out[row + x] = image.data()[row + (w - 1 - x)];
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

fn labels_to_bitmask(y: &[f64]) -> u32 {
    y.iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(k, _)| 1u32 << k)
        .sum()
}

fn bitmask_to_labels(mask: u32) -> Vec<f64> {
    (0..CLASSES)
        .map(|k| if mask & (1 << k) != 0 { 1.0 } else { 0.0 })
        .collect()
}

fn image_to_bytes(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut rgb = vec![0u8; 3 * h * w];
    for j in 0..h * w {
        for c in 0..3 {
            rgb[3 * j + c] = (image.data()[c * h * w + j] * 255.0).round() as u8;
        }
    }
    rgb
}

fn bytes_to_image(w: usize, h: usize, rgb: &[u8]) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for j in 0..h * w {
        for c in 0..3 {
            data[c * h * w + j] = rgb[3 * j + c] as f64 / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Writes a dataset directory: `labels.csv` plus per-sample PPM images and
/// PGM masks (when ground truth is attached).
pub fn save(dir: &Path, samples: &[Sample]) -> Result<()> {
    let csv_path = dir.join("labels.csv");
    let csv_name = csv_path.display().to_string();
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(|e| Error::io(&csv_name, e))?);
    csv.write_all(b"file,labels\n")
        .map_err(|e| Error::io(&csv_name, e))?;
    for sample in samples {
        csv.write_all(format!("{},{}\n", sample.name, labels_to_bitmask(&sample.y)).as_bytes())
            .map_err(|e| Error::io(&csv_name, e))?;

        let ppm_path = dir.join(format!("{}.ppm", sample.name));
        let ppm_name = ppm_path.display().to_string();
        let mut out =
            BufWriter::new(File::create(&ppm_path).map_err(|e| Error::io(&ppm_name, e))?);
        let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
        write_ppm(&mut out, &ppm_name, w, h, &image_to_bytes(&sample.image))?;
        out.flush().map_err(|e| Error::io(&ppm_name, e))?;

        if let Some(gt) = &sample.gt {
            let pgm_path = dir.join(format!("{}.pgm", sample.name));
            let pgm_name = pgm_path.display().to_string();
            let mut out =
                BufWriter::new(File::create(&pgm_path).map_err(|e| Error::io(&pgm_name, e))?);
            write_pgm(&mut out, &pgm_name, gt.width, gt.height, &gt.data)?;
            out.flush().map_err(|e| Error::io(&pgm_name, e))?;
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_name, e))
}

/// Loads a dataset directory written by [`save`]. A missing mask file
/// leaves that sample's ground truth unavailable; a malformed file fails
/// with its name and byte offset.
pub fn load(dir: &Path) -> Result<Vec<Sample>> {
    let csv_path = dir.join("labels.csv");
    let csv_name = csv_path.display().to_string();
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_name, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "file,labels")) => {}
        _ => return Err(Error::parse(&csv_name, 0u64, "expected header 'file,labels'")),
    }

    let mut samples = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (name, mask_str) = line.split_once(',').ok_or_else(|| {
            Error::parse(&csv_name, lineno as u64, format!("row without comma: {line:?}"))
        })?;
        let bitmask: u32 = mask_str.parse().map_err(|_| {
            Error::parse(&csv_name, lineno as u64, format!("bad bitmask {mask_str:?}"))
        })?;

        let ppm_path = dir.join(format!("{name}.ppm"));
        let ppm_name = ppm_path.display().to_string();
        let file = File::open(&ppm_path).map_err(|e| Error::io(&ppm_name, e))?;
        let (w, h, rgb) = read_ppm(&mut BufReader::new(file), &ppm_name)?;
        let image = bytes_to_image(w, h, &rgb);

        let pgm_path = dir.join(format!("{name}.pgm"));
        let gt = match File::open(&pgm_path) {
            Ok(file) => {
                let pgm_name = pgm_path.display().to_string();
                let (mw, mh, data) = read_pgm(&mut BufReader::new(file), &pgm_name)?;
                Some(Mask {
                    width: mw,
                    height: mh,
                    data,
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(pgm_path.display().to_string(), e)),
        };

        samples.push(Sample {
            name: name.to_string(),
            image,
            y: bitmask_to_labels(bitmask),
            gt,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmask_encoding_matches_the_convention() {
        assert_eq!(bitmask_to_labels(0b00101), vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(labels_to_bitmask(&[1.0, 0.0, 1.0, 0.0, 0.0]), 0b00101);
    }

    #[test]
    fn save_load_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(4, 9);
        save(dir.path(), &samples).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.image, b.image);
            assert_eq!(a.y, b.y);
            assert_eq!(a.gt, b.gt);
        }
    }

    #[test]
    fn missing_mask_leaves_gt_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(2, 5);
        save(dir.path(), &samples).unwrap();
        std::fs::remove_file(dir.path().join(format!("{}.pgm", samples[0].name))).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert!(loaded[0].gt.is_none());
        assert!(loaded[1].gt.is_some());
    }

    #[test]
    fn malformed_image_fails_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(1, 5);
        save(dir.path(), &samples).unwrap();
        let ppm = dir.path().join("sample_00000.ppm");
        let mut bytes = std::fs::read(&ppm).unwrap();
        bytes.truncate(bytes.len() - 100);
        std::fs::write(&ppm, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn hflip_mirrors_columns() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(hflip(&t).data(), &[3.0, 2.0, 1.0]);
        let img = generate(1, 2).remove(0).image;
        assert_eq!(hflip(&hflip(&img)), img);
    }
}
