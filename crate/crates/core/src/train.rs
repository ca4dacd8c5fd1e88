//! Training objective and loop: multi-label classification loss, the
//! general/specific consistency loss, momentum SGD with a polynomial
//! learning-rate schedule, and a finite-difference gradient audit.

use rayon::prelude::*;

use crate::backbone::{BackboneConfig, BackboneParams, BackboneVars};
use crate::cam::LocMaps;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::pipeline::{self, Capture, PipelineOpts};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Multi-label binary cross-entropy between logits and `{0,1}` targets,
/// averaged over classes. Evaluated in softplus form, so extreme logits
/// stay finite.
pub fn cls_loss(tape: &Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    tape.multi_label_bce(logits, targets)
}

/// Mean absolute discrepancy between a general and an image-specific
/// localization stack over the background channel and the present
/// foreground channels; gradients flow through both stacks.
pub fn gsc_loss(tape: &Tape, a: &LocMaps, b: &LocMaps, present: &[bool]) -> Result<Var> {
    if a.kind == b.kind {
        return Err(Error::SameMapKind { kind: a.kind });
    }
    let shape = tape.shape(a.maps)?;
    if shape.len() != 3 || shape[0] != present.len() + 1 {
        return Err(Error::InvalidShape {
            shape,
            reason: format!("expected [{},H,W] stacks", present.len() + 1),
        });
    }
    let diff = tape.sub(a.maps, b.maps)?;
    let dist = tape.abs(diff)?;
    let mut factors = vec![0.0; present.len() + 1];
    factors[0] = 1.0;
    let mut compared = 1.0;
    for (k, &p) in present.iter().enumerate() {
        if p {
            factors[k + 1] = 1.0;
            compared += 1.0;
        }
    }
    let masked = tape.channel_scale(dist, &factors)?;
    let total = tape.sum(masked, &[])?;
    let pixels = (shape[1] * shape[2]) as f64;
    tape.mul_scalar(total, 1.0 / (compared * pixels))
}

/// One image's losses, with the capture needed to replay the pass as the
/// exact function the tape differentiated.
#[derive(Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub cls: Var,
    pub gsc: Option<Var>,
    pub capture: Capture,
}

/// Runs the pipeline on one image and assembles its training objective:
/// the classification term plus, when enabled, the consistency term.
pub fn total_loss(
    tape: &Tape,
    model: &BackboneVars,
    image: Var,
    y: &[f64],
    opts: &PipelineOpts,
    frozen: Option<&Capture>,
) -> Result<SampleLoss> {
    for &v in y {
        if v != 0.0 && v != 1.0 {
            return Err(Error::OutOfRange {
                op: "total_loss",
                side: "labels",
                value: v,
            });
        }
    }
    let present: Vec<bool> = y.iter().map(|&v| v == 1.0).collect();
    let arts = pipeline::forward(tape, model, image, &present, opts, frozen)?;
    let cls = cls_loss(tape, arts.logits, y)?;
    let (total, gsc) = if opts.gsc {
        let iscam = arts.iscam.as_ref().expect("gsc requires the specific stack");
        let gsc = gsc_loss(tape, &arts.cam, iscam, &present)?;
        (tape.add(cls, gsc)?, Some(gsc))
    } else {
        (cls, None)
    };
    Ok(SampleLoss {
        total,
        cls,
        gsc,
        capture: arts.capture,
    })
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate of the extractor stages.
    pub lr_backbone: f64,
    /// Base learning rate of the lateral projections and the classifier
    /// (the newly added layers), conventionally 10× the stage rate.
    pub lr_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr_backbone: 0.02,
            lr_new: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            seed: 1,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_new", self.lr_new),
            ("poly_power", self.poly_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Momentum buffers mirroring the parameter tensors, plus the step count.
pub struct OptimState {
    velocities: Vec<Tensor>,
    step: usize,
}

impl OptimState {
    pub fn new(params: &BackboneParams) -> Self {
        OptimState {
            velocities: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Polynomial decay factor after `step` of `total` iterations.
pub fn poly_factor(step: usize, total: usize, power: f64) -> f64 {
    let t = (step as f64 / total.max(1) as f64).min(1.0);
    (1.0 - t).max(0.0).powf(power)
}

/// One momentum-SGD update: `v ← m·v + (g + wd·p)`, `p ← p − lr·v`, with
/// the stage group and the new-layer group on their own base rates and the
/// shared polynomial decay.
pub fn step(
    params: &mut BackboneParams,
    grads: &[Tensor],
    state: &mut OptimState,
    config: &TrainConfig,
    total_iters: usize,
) -> Result<()> {
    let factor = poly_factor(state.step, total_iters, config.poly_power);
    let backbone_group: Vec<bool> = (0..grads.len())
        .map(|i| params.is_backbone_group(i))
        .collect();
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::Config(format!(
            "expected {} gradients, got {}",
            tensors.len(),
            grads.len()
        )));
    }
    for (i, (param, grad)) in tensors.into_iter().zip(grads).enumerate() {
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let base = if backbone_group[i] {
            config.lr_backbone
        } else {
            config.lr_new
        };
        let lr = base * factor;
        let velocity = &mut state.velocities[i];
        for ((p, v), g) in param
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(grad.data())
        {
            *v = config.momentum * *v + (g + config.weight_decay * *p);
            *p -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// One training-log record, mirroring the on-disk log line
/// `step,lr,l_cls,l_gsc,l_total`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    /// New-layer-group learning rate at this step.
    pub lr: f64,
    pub l_cls: f64,
    pub l_gsc: f64,
    pub l_total: f64,
}

/// A finished training run: final parameters and the per-step log.
pub struct TrainOutcome {
    pub params: BackboneParams,
    pub log: Vec<LogRecord>,
}

fn batch_gradients(
    params: &BackboneParams,
    batch: &[(usize, bool)],
    samples: &[Sample],
    opts: &PipelineOpts,
) -> Result<(Vec<Tensor>, f64, f64)> {
    // Per-sample passes are independent; each runs on its own tape. The
    // accumulation below walks the batch in order, so the sum is identical
    // no matter how many workers ran.
    let per_sample: Vec<(Vec<Tensor>, f64, f64)> = batch
        .par_iter()
        .map(|&(idx, flip)| {
            let sample = &samples[idx];
            let tape = Tape::new();
            let model = params.register(&tape, true);
            let image = if flip {
                tape.constant(data::hflip(&sample.image))
            } else {
                tape.constant(sample.image.clone())
            };
            let loss = total_loss(&tape, &model, image, &sample.y, opts, None)?;
            let l_cls = tape.value(loss.cls)?.item();
            let l_gsc = match loss.gsc {
                Some(g) => tape.value(g)?.item(),
                None => 0.0,
            };
            let mut grads = tape.backward(loss.total)?;
            let tensors = model
                .vars
                .iter()
                .map(|&v| grads.take(v))
                .collect::<Result<Vec<_>>>()?;
            Ok((tensors, l_cls, l_gsc))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut acc, mut cls_sum, mut gsc_sum) = iter.next().expect("batch is nonempty");
    for (tensors, c, g) in iter {
        for (a, t) in acc.iter_mut().zip(&tensors) {
            for (av, tv) in a.data_mut().iter_mut().zip(t.data()) {
                *av += tv;
            }
        }
        cls_sum += c;
        gsc_sum += g;
    }
    for a in &mut acc {
        for v in a.data_mut() {
            *v *= scale;
        }
    }
    Ok((acc, cls_sum * scale, gsc_sum * scale))
}

/// Trains a model from scratch on the given samples. `on_epoch` runs after
/// every epoch with the current parameters (checkpoint hook). The whole
/// run is a pure function of (samples, configs): shuffling and flips come
/// from dedicated per-epoch streams, and batch reductions are ordered.
pub fn train(
    samples: &[Sample],
    backbone_cfg: &BackboneConfig,
    config: &TrainConfig,
    opts: &PipelineOpts,
    mut on_epoch: impl FnMut(usize, &BackboneParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    opts.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = BackboneParams::init(backbone_cfg, config.seed)?;
    let mut state = OptimState::new(&params);
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_iters = steps_per_epoch * config.epochs;
    let mut log = Vec::with_capacity(total_iters);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        SplitMix64::stream(config.seed, 2 * epoch as u64 + 1).shuffle(&mut order);
        let mut flip_rng = SplitMix64::stream(config.seed, 2 * epoch as u64 + 2);

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(usize, bool)> = chunk
                .iter()
                .map(|&idx| (idx, config.flip && flip_rng.below(2) == 1))
                .collect();
            let (grads, l_cls, l_gsc) = batch_gradients(&params, &batch, samples, opts)?;
            let lr = config.lr_new * poly_factor(state.step, total_iters, config.poly_power);
            step(&mut params, &grads, &mut state, config, total_iters)?;
            log.push(LogRecord {
                step: state.step,
                lr,
                l_cls,
                l_gsc,
                l_total: l_cls + l_gsc,
            });
        }
        on_epoch(epoch, &params)?;
    }
    Ok(TrainOutcome { params, log })
}

/// Formats the training log in its on-disk line format.
pub fn format_log(log: &[LogRecord]) -> String {
    let mut out = String::from("step,lr,l_cls,l_gsc,l_total\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8}\n",
            r.step, r.lr, r.l_cls, r.l_gsc, r.l_total
        ));
    }
    out
}

/// Result of a finite-difference audit of the full objective's gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

const FD_STEP: f64 = 1e-5;

fn loss_value(
    params: &BackboneParams,
    image: &Tensor,
    y: &[f64],
    opts: &PipelineOpts,
    frozen: &Capture,
) -> Result<f64> {
    let tape = Tape::new();
    let model = params.register(&tape, false);
    let image = tape.constant(image.clone());
    let loss = total_loss(&tape, &model, image, y, opts, Some(frozen))?;
    Ok(tape.value(loss.total)?.item())
}

/// Compares every parameter's analytic gradient of the full objective
/// against central finite differences on a small model. The normalization
/// factors and the pooling plan are captured once at the base point and
/// held fixed, matching what the recorded computation treats as constant.
/// `relu_scale` deliberately corrupts the rectifier's backward rule when
/// set to anything but 1 — a negative control proving the audit can fail.
pub fn grad_check(seed: u64, side: usize, relu_scale: f64) -> Result<GradCheckReport> {
    let config = BackboneConfig::tiny(2);
    let params = BackboneParams::init(&config, seed)?;
    let mut rng = SplitMix64::stream(seed, 0xF0);
    let image_data: Vec<f64> = (0..3 * side * side).map(|_| rng.uniform(0.0, 1.0)).collect();
    let image = Tensor::new(vec![3, side, side], image_data)?;
    let y = [1.0, 0.0];
    let opts = PipelineOpts::default();

    // Analytic pass; the capture pins seed assignment and normalization.
    let tape = Tape::new();
    tape.skew_relu_backward(relu_scale);
    let model = params.register(&tape, true);
    let image_var = tape.constant(image.clone());
    let loss = total_loss(&tape, &model, image_var, &y, &opts, None)?;
    let frozen = loss.capture.clone();
    let mut grads = tape.backward(loss.total)?;
    let analytic: Vec<Tensor> = model
        .vars
        .iter()
        .map(|&v| grads.take(v))
        .collect::<Result<Vec<_>>>()?;

    let names = crate::backbone::param_names();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    let mut probe = params.clone();
    for (pi, analytic_grad) in analytic.iter().enumerate() {
        for ei in 0..analytic_grad.len() {
            let original = probe.tensors()[pi].data()[ei];
            probe.tensors_mut()[pi].data_mut()[ei] = original + FD_STEP;
            let plus = loss_value(&probe, &image, &y, &opts, &frozen)?;
            probe.tensors_mut()[pi].data_mut()[ei] = original - FD_STEP;
            let minus = loss_value(&probe, &image, &y, &opts, &frozen)?;
            probe.tensors_mut()[pi].data_mut()[ei] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic_grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = names[pi].clone();
                report.worst_element = ei;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cam::MapKind;

    fn loc(tape: &Tape, kind: MapKind, shape: &[usize], data: &[f64]) -> LocMaps {
        LocMaps {
            maps: tape.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap()),
            kind,
        }
    }

    #[test]
    fn cls_loss_examples() {
        let tape = Tape::new();
        let zero = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let l = cls_loss(&tape, zero, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);

        let logits = tape.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let l = cls_loss(&tape, logits, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).unwrap().item() - 0.31326).abs() < 1e-5);

        let huge = tape.constant(Tensor::new(vec![1], vec![100.0]).unwrap());
        let l = cls_loss(&tape, huge, &[1.0]).unwrap();
        assert!(tape.value(l).unwrap().item() < 1e-40);
    }

    #[test]
    fn gsc_loss_examples() {
        let tape = Tape::new();
        let a = loc(&tape, MapKind::General, &[2, 1, 2], &[0.2, 0.4, 0.6, 0.8]);
        let b = loc(&tape, MapKind::ImageSpecific, &[2, 1, 2], &[0.2, 0.4, 0.6, 0.8]);
        let l = gsc_loss(&tape, &a, &b, &[true]).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 0.0);

        let ones = loc(&tape, MapKind::General, &[2, 1, 2], &[1.0; 4]);
        let zeros = loc(&tape, MapKind::ImageSpecific, &[2, 1, 2], &[0.0; 4]);
        let l = gsc_loss(&tape, &ones, &zeros, &[true]).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 1.0);
    }

    #[test]
    fn gsc_loss_masks_absent_classes_and_is_symmetric() {
        let tape = Tape::new();
        let a = loc(
            &tape,
            MapKind::General,
            &[3, 1, 2],
            &[0.1, 0.2, 0.5, 0.6, 0.9, 1.0],
        );
        let b = loc(
            &tape,
            MapKind::ImageSpecific,
            &[3, 1, 2],
            &[0.2, 0.4, 0.1, 0.2, 0.0, 0.0],
        );
        // Class 2 absent: its |0.9| + |1.0| discrepancy must not count.
        let l = gsc_loss(&tape, &a, &b, &[true, false]).unwrap();
        let expected = (0.1 + 0.2 + 0.4 + 0.4) / (2.0 * 2.0);
        assert!((tape.value(l).unwrap().item() - expected).abs() < 1e-12);

        let l_rev = gsc_loss(&tape, &b, &a, &[true, false]).unwrap();
        assert_eq!(
            tape.value(l).unwrap().item(),
            tape.value(l_rev).unwrap().item()
        );
    }

    #[test]
    fn gsc_loss_rejects_same_kind() {
        let tape = Tape::new();
        let a = loc(&tape, MapKind::General, &[2, 1, 1], &[0.1, 0.2]);
        let b = loc(&tape, MapKind::General, &[2, 1, 1], &[0.1, 0.2]);
        assert!(matches!(
            gsc_loss(&tape, &a, &b, &[true]),
            Err(Error::SameMapKind { kind: MapKind::General })
        ));
    }

    #[test]
    fn total_without_gsc_equals_cls() {
        let params = BackboneParams::init(&BackboneConfig::tiny(2), 3).unwrap();
        let tape = Tape::new();
        let model = params.register(&tape, true);
        let mut rng = SplitMix64::new(5);
        let image = tape.constant(
            Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.next_f64()).collect()).unwrap(),
        );
        let opts = PipelineOpts {
            gsc: false,
            ..PipelineOpts::default()
        };
        let loss = total_loss(&tape, &model, image, &[1.0, 0.0], &opts, None).unwrap();
        assert_eq!(loss.total, loss.cls);
        assert!(loss.gsc.is_none());
    }

    #[test]
    fn zero_image_keeps_the_objective_finite() {
        let params = BackboneParams::init(&BackboneConfig::tiny(2), 3).unwrap();
        let tape = Tape::new();
        let model = params.register(&tape, true);
        let image = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let loss = total_loss(
            &tape,
            &model,
            image,
            &[1.0, 0.0],
            &PipelineOpts::default(),
            None,
        )
        .unwrap();
        let total = tape.value(loss.total).unwrap().item();
        assert!(total.is_finite());
        // All-zero features leave both specific channels empty while the
        // general background sits at its ceiling: the consistency term is
        // exactly the background discrepancy 0.5 averaged over 2 channels.
        let gsc = tape.value(loss.gsc.unwrap()).unwrap().item();
        assert!((gsc - 0.25).abs() < 1e-12);
        let grads = tape.backward(loss.total).unwrap();
        for &v in &model.vars {
            assert!(grads.get(v).unwrap().data().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn total_loss_rejects_soft_labels() {
        let params = BackboneParams::init(&BackboneConfig::tiny(2), 3).unwrap();
        let tape = Tape::new();
        let model = params.register(&tape, true);
        let image = tape.constant(Tensor::zeros(&[3, 8, 8]));
        let err = total_loss(
            &tape,
            &model,
            image,
            &[0.5, 1.0],
            &PipelineOpts::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
    }

    #[test]
    fn sgd_step_examples() {
        let config = BackboneConfig::tiny(2);
        let mut params = BackboneParams::init(&config, 1).unwrap();
        let zero_grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut state = OptimState::new(&params);
        let before: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let train_cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        step(&mut params, &zero_grads, &mut state, &train_cfg, 10).unwrap();
        for (a, b) in params.tensors().iter().zip(&before) {
            assert_eq!(**a, *b); // zero grad + zero decay → unchanged
        }

        // Weight decay alone shrinks parameters.
        let decay_cfg = TrainConfig {
            weight_decay: 0.1,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        step(&mut params, &zero_grads, &mut state, &decay_cfg, 10).unwrap();
        let after = params.tensors();
        let idx = before
            .iter()
            .enumerate()
            .find(|(_, t)| t.data().iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .unwrap();
        let (b, a) = (before[idx].data(), after[idx].data());
        let j = b.iter().position(|&v| v != 0.0).unwrap();
        assert!(a[j].abs() < b[j].abs());
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_factor(0, 100, 0.9), 1.0);
        assert_eq!(poly_factor(100, 100, 0.9), 0.0);
        let mid = poly_factor(50, 100, 0.9);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn scalar_step_example() {
        // One step on p=1, g=1, lr=0.1, no momentum, no decay → 0.9.
        let cfg = TrainConfig {
            lr_backbone: 0.1,
            lr_new: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            poly_power: 0.9,
            ..TrainConfig::default()
        };
        // poly factor at step 0 is exactly 1.
        let v = 0.0 * cfg.momentum + 1.0;
        let p = 1.0 - cfg.lr_new * poly_factor(0, 10, cfg.poly_power) * v;
        assert!((p - 0.9).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let samples = data::generate(16, 21);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 7,
            ..TrainConfig::default()
        };
        let bb = BackboneConfig::tiny(data::CLASSES);
        let opts = PipelineOpts::default();
        let run = || train(&samples, &bb, &cfg, &opts, |_, _| Ok(())).unwrap();
        let a = run();
        let b = run();
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(**x, *y);
        }
        assert_eq!(a.log, b.log);

        let first = a.log.first().unwrap().l_total;
        let last = a.log.last().unwrap().l_total;
        assert!(
            last < first,
            "loss did not decrease: {first} → {last}"
        );
    }

    #[test]
    fn gradcheck_passes_and_negative_control_fails() {
        let report = grad_check(1, 8, 1.0).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}[{}]: analytic {} vs numeric {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_element,
            report.analytic,
            report.numeric
        );

        let corrupted = grad_check(1, 8, 2.0).unwrap();
        assert!(
            corrupted.max_rel_err > 1e-2,
            "corrupted backward should fail loudly, got {}",
            corrupted.max_rel_err
        );
    }
}
