//! Per-image forward pass tying the extractor, general localization maps,
//! seed locating, prototypes, and image-specific maps together, plus the
//! checkpoint format that round-trips a trained model with its pipeline
//! options.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write as _};
use std::path::Path;

use crate::backbone::{self, BackboneConfig, BackboneParams, BackboneVars, STAGES};
use crate::cam::{self, LocMaps, MapKind};
use crate::error::{Error, Result};
use crate::proto::{self, PoolPlan, Prototypes};
use crate::seed::{self, SeedMask};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, Var};

/// Feature space used for foreground prototypes and their activation maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpace {
    /// Final-stage features only.
    Semantic,
    /// Concatenated lateral projections of all stages.
    Hierarchical,
}

impl FeatureSpace {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSpace::Semantic => "semantic",
            FeatureSpace::Hierarchical => "hierarchical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "semantic" => Some(FeatureSpace::Semantic),
            "hierarchical" => Some(FeatureSpace::Hierarchical),
            _ => None,
        }
    }
}

/// Switches selecting which parts of the pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOpts {
    /// Feature space for foreground prototypes.
    pub feature: FeatureSpace,
    /// Model an explicit background prototype (always on the hierarchical
    /// feature). Off: the image-specific background channel is the
    /// attenuated complement of the strongest foreground activation.
    pub bpm: bool,
    /// Run seed locating + prototype extraction + image-specific maps.
    pub ipe: bool,
    /// Train with the general/specific consistency term (requires `ipe`).
    pub gsc: bool,
}

impl Default for PipelineOpts {
    fn default() -> Self {
        PipelineOpts {
            feature: FeatureSpace::Hierarchical,
            bpm: true,
            ipe: true,
            gsc: true,
        }
    }
}

impl PipelineOpts {
    /// Classification-only baseline: plain general maps, nothing else.
    pub fn cam_only() -> Self {
        PipelineOpts {
            feature: FeatureSpace::Hierarchical,
            bpm: true,
            ipe: false,
            gsc: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gsc && !self.ipe {
            return Err(Error::Config(
                "the consistency loss requires the image-specific pipeline".into(),
            ));
        }
        Ok(())
    }
}

/// Values the forward pass treats as constants: normalization factors of
/// the general maps and the prototype pooling plan. Re-running the pass
/// with a frozen capture pins both, so numeric probes differentiate
/// exactly the function the tape recorded.
#[derive(Debug, Clone)]
pub struct Capture {
    pub norm_factors: Vec<f64>,
    pub plan: Option<PoolPlan>,
}

/// Everything one image's forward pass produces.
pub struct ForwardArtifacts {
    /// `[K]` image-level scores (mean of the pre-activation score map).
    pub logits: Var,
    /// General localization stack.
    pub cam: LocMaps,
    /// Image-specific localization stack, when the pipeline computes one.
    pub iscam: Option<LocMaps>,
    /// Hard seed assignment (absent when a frozen capture supplied the
    /// pooling plan, or when the image-specific pipeline is off).
    pub seeds: Option<SeedMask>,
    /// Per-image prototypes, when computed.
    pub protos: Option<Prototypes>,
    /// Detached values used by this pass; feed back as `frozen` to re-run
    /// the same function.
    pub capture: Capture,
}

/// Runs the full per-image pipeline on a tape.
///
/// `present` flags the labeled classes (length K). With `frozen`, the
/// normalization factors and pooling plan are taken from an earlier pass
/// instead of being recomputed from current values.
pub fn forward(
    tape: &Tape,
    model: &BackboneVars,
    image: Var,
    present: &[bool],
    opts: &PipelineOpts,
    frozen: Option<&Capture>,
) -> Result<ForwardArtifacts> {
    opts.validate()?;
    if present.len() != model.config.classes {
        return Err(Error::Config(format!(
            "label vector has {} classes, model expects {}",
            present.len(),
            model.config.classes
        )));
    }

    let bundle = backbone::forward(tape, model, image)?;
    let scores = cam::scores(tape, bundle.f_s, model.classifier())?;
    let logits = cam::logits(tape, scores)?;
    let raw = cam::raw_cam(tape, scores)?;
    let norm_factors = match frozen {
        Some(c) => c.norm_factors.clone(),
        None => cam::norm_factors(&tape.value(raw)?)?,
    };
    let m_hat = cam::normalize(tape, raw, &norm_factors)?;
    let m_b = cam::background(tape, m_hat)?;
    let general = cam::assemble(tape, m_b, m_hat, MapKind::General)?;

    if !opts.ipe {
        return Ok(ForwardArtifacts {
            logits,
            cam: general,
            iscam: None,
            seeds: None,
            protos: None,
            capture: Capture {
                norm_factors,
                plan: None,
            },
        });
    }

    let (plan, seeds) = match frozen.and_then(|c| c.plan.clone()) {
        Some(plan) => (plan, None),
        None => {
            let maps_value = tape.value(general.maps)?;
            let f_s_value = tape.value(bundle.f_s)?;
            let seeds = seed::locate(&f_s_value, &maps_value, present)?;
            let plan = proto::pool_plan(&seeds, present, &maps_value, opts.bpm)?;
            (plan, Some(seeds))
        }
    };

    let grid = tape.shape(bundle.f_s)?;
    let (h, w) = (grid[1], grid[2]);
    let f_s_flat = tape.reshape(bundle.f_s, &[model.config.c_s(), h * w])?;
    let f_h_flat = tape.reshape(bundle.f_h, &[model.config.c_h(), h * w])?;
    let selected = match opts.feature {
        FeatureSpace::Semantic => f_s_flat,
        FeatureSpace::Hierarchical => f_h_flat,
    };
    let protos = proto::extract(tape, selected, f_h_flat, &plan)?;
    let iscam = proto::iscam(tape, selected, f_h_flat, &protos, h, w)?;

    Ok(ForwardArtifacts {
        logits,
        cam: general,
        iscam: Some(iscam),
        seeds,
        protos: Some(protos),
        capture: Capture {
            norm_factors,
            plan: Some(plan),
        },
    })
}

const CHECKPOINT_FORMAT: &str = "sipe-checkpoint-v1";

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// Writes a trained model plus its pipeline options: a line-oriented text
/// manifest, an `END` marker, then one binary tensor record per parameter
/// in fixed order.
pub fn save_checkpoint<W: std::io::Write>(
    out: &mut W,
    path: &str,
    params: &BackboneParams,
    opts: &PipelineOpts,
) -> Result<()> {
    let cfg = &params.config;
    let mut manifest = String::new();
    manifest.push_str(&format!("format={CHECKPOINT_FORMAT}\n"));
    manifest.push_str(&format!("in_channels={}\n", cfg.in_channels));
    manifest.push_str(&format!(
        "stage_channels={}\n",
        cfg.stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    manifest.push_str(&format!("lateral_channels={}\n", cfg.lateral_channels));
    manifest.push_str(&format!("classes={}\n", cfg.classes));
    manifest.push_str(&format!("feature={}\n", opts.feature.name()));
    manifest.push_str(&format!("bpm={}\n", fmt_bool(opts.bpm)));
    manifest.push_str(&format!("ipe={}\n", fmt_bool(opts.ipe)));
    manifest.push_str(&format!("gsc={}\n", fmt_bool(opts.gsc)));
    for name in backbone::param_names() {
        manifest.push_str(&format!("param={name}\n"));
    }
    manifest.push_str("END\n");
    out.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for tensor in params.tensors() {
        write_tensor(out, path, tensor)?;
    }
    Ok(())
}

/// Convenience wrapper writing a checkpoint atomically (temp + rename).
pub fn save_checkpoint_file(
    path: &Path,
    params: &BackboneParams,
    opts: &PipelineOpts,
) -> Result<()> {
    let name = path.display().to_string();
    let tmp = path.with_extension("tmp");
    let tmp_name = tmp.display().to_string();
    {
        let mut out = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp_name, e))?);
        save_checkpoint(&mut out, &name, params, opts)?;
        out.flush().map_err(|e| Error::io(&tmp_name, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(&name, e))
}

fn parse_usize(path: &str, offset: u64, key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::parse(path, offset, format!("bad integer for {key}: {value:?}")))
}

fn parse_flag(path: &str, offset: u64, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::parse(
            path,
            offset,
            format!("bad flag for {key}: {value:?}"),
        )),
    }
}

/// Reads a checkpoint back; verifies the manifest, parameter names, and
/// every tensor shape.
pub fn load_checkpoint<R: Read>(input: R, path: &str) -> Result<(BackboneParams, PipelineOpts)> {
    let mut reader = BufReader::new(input);
    let mut offset = 0u64;

    let mut keys: Vec<(String, String)> = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(path, offset, "manifest ended without END"));
        }
        offset += n as u64;
        let line = line.trim_end_matches('\n');
        if line == "END" {
            break;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(path, offset, format!("manifest line without '=': {line:?}"))
        })?;
        keys.push((key.to_string(), value.to_string()));
    }

    let mut config = BackboneConfig::default();
    let mut opts = PipelineOpts::default();
    let mut names: Vec<String> = Vec::new();
    let mut format_seen = false;
    for (key, value) in &keys {
        match key.as_str() {
            "format" => {
                if value != CHECKPOINT_FORMAT {
                    return Err(Error::parse(
                        path,
                        offset,
                        format!("unsupported format {value:?}"),
                    ));
                }
                format_seen = true;
            }
            "in_channels" => config.in_channels = parse_usize(path, offset, key, value)?,
            "stage_channels" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != STAGES {
                    return Err(Error::parse(
                        path,
                        offset,
                        format!("expected {STAGES} stage channels, got {}", parts.len()),
                    ));
                }
                for (i, p) in parts.iter().enumerate() {
                    config.stage_channels[i] = parse_usize(path, offset, key, p)?;
                }
            }
            "lateral_channels" => config.lateral_channels = parse_usize(path, offset, key, value)?,
            "classes" => config.classes = parse_usize(path, offset, key, value)?,
            "feature" => {
                opts.feature = FeatureSpace::parse(value).ok_or_else(|| {
                    Error::parse(path, offset, format!("unknown feature space {value:?}"))
                })?;
            }
            "bpm" => opts.bpm = parse_flag(path, offset, key, value)?,
            "ipe" => opts.ipe = parse_flag(path, offset, key, value)?,
            "gsc" => opts.gsc = parse_flag(path, offset, key, value)?,
            "param" => names.push(value.clone()),
            _ => {
                return Err(Error::parse(
                    path,
                    offset,
                    format!("unknown manifest key {key:?}"),
                ));
            }
        }
    }
    if !format_seen {
        return Err(Error::parse(path, offset, "manifest missing format line"));
    }
    config.validate()?;
    let expected = backbone::param_names();
    if names != expected {
        return Err(Error::parse(
            path,
            offset,
            format!("parameter list mismatch: got {names:?}"),
        ));
    }

    let mut params = BackboneParams::init(&config, 0)?;
    for (tensor, name) in params.tensors_mut().into_iter().zip(&expected) {
        let loaded = read_tensor(&mut reader, path, &mut offset)?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::parse(
                path,
                offset,
                format!(
                    "shape mismatch for {name}: file has {:?}, model needs {:?}",
                    loaded.shape(),
                    tensor.shape()
                ),
            ));
        }
        *tensor = loaded;
    }
    let mut probe = [0u8; 1];
    match reader.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::parse(path, offset, "trailing bytes after parameters"));
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok((params, opts))
}

/// Reads a checkpoint from disk, mapping a missing file to a dedicated
/// error naming what was looked for.
pub fn load_checkpoint_file(path: &Path) -> Result<(BackboneParams, PipelineOpts)> {
    let name = path.display().to_string();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingCheckpoint { config: name });
        }
        Err(e) => return Err(Error::io(&name, e)),
    };
    load_checkpoint(file, &name)
}

/// Upsamples a localization stack's values to the given spatial size with
/// bilinear interpolation — the bridge from feature-grid maps to
/// image-resolution pseudo labels.
pub fn upsample_maps(maps: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    maps.resize_bilinear(height, width)
}
