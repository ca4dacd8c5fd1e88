//! Four-stage convolutional feature extractor.
//!
//! Each stage is one 3×3 convolution plus ReLU; stages 2–4 downsample by
//! stride 2, so the final grid is input/8. The last stage's output is the
//! semantic feature `F_s`. Every stage also feeds a bias-free linear 1×1
//! lateral convolution; the four lateral outputs are bilinearly resized to
//! the final grid and concatenated channel-wise into the hierarchical
//! feature `F_h`. The classifier is a bias-free weight matrix `[K, C_s]`
//! applied as a 1×1 convolution by the `cam` module.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

pub const STAGES: usize = 4;

/// Widths and class count for the extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of the four stages.
    pub stage_channels: [usize; STAGES],
    /// Output channels of each lateral 1×1 convolution.
    pub lateral_channels: usize,
    /// Foreground class count K.
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: [16, 32, 64, 128],
            lateral_channels: 16,
            classes: 5,
        }
    }
}

impl BackboneConfig {
    /// A deliberately small configuration for derivative checks, where every
    /// parameter is perturbed individually.
    pub fn tiny(classes: usize) -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: [4, 6, 8, 8],
            lateral_channels: 2,
            classes,
        }
    }

    /// Semantic feature width (last stage).
    pub fn c_s(&self) -> usize {
        self.stage_channels[STAGES - 1]
    }

    /// Hierarchical feature width (four concatenated laterals).
    pub fn c_h(&self) -> usize {
        STAGES * self.lateral_channels
    }

    /// Ratio of input size to final grid size.
    pub fn total_stride(&self) -> usize {
        STRIDES.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.lateral_channels > 0
            && self.classes > 0
            && self.stage_channels.iter().all(|&c| c > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "backbone channel widths and class count must be positive".into(),
            ))
        }
    }
}

/// Per-stage strides; the product is the total stride.
pub const STRIDES: [usize; STAGES] = [1, 2, 2, 2];

/// All trainable tensors, in the fixed serialization order:
/// stage kernels and biases, lateral kernels, classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stage_kernels: Vec<Tensor>,
    pub stage_biases: Vec<Tensor>,
    pub lateral_kernels: Vec<Tensor>,
    /// Classifier weights `[K, C_s]`, no bias.
    pub classifier: Tensor,
}

/// Fixed parameter names matching [`BackboneParams::tensors`] order.
pub fn param_names() -> Vec<String> {
    let mut names = Vec::new();
    for i in 1..=STAGES {
        names.push(format!("stage{i}.kernel"));
        names.push(format!("stage{i}.bias"));
    }
    for i in 1..=STAGES {
        names.push(format!("lateral{i}.kernel"));
    }
    names.push("classifier.weight".to_string());
    names
}

impl BackboneParams {
    /// Kaiming-style scaled uniform initialization: kernels uniform in
    /// ±sqrt(6/fan_in), biases zero. Deterministic per seed — each tensor is
    /// filled from its own derived stream, so adding parameters elsewhere
    /// cannot shift existing draws.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream_idx = 0u64;
        let mut kaiming = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = SplitMix64::stream(seed, stream_idx);
            stream_idx += 1;
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        let mut stage_kernels = Vec::with_capacity(STAGES);
        let mut stage_biases = Vec::with_capacity(STAGES);
        let mut in_c = config.in_channels;
        for &out_c in &config.stage_channels {
            stage_kernels.push(kaiming(&[out_c, in_c, 3, 3], in_c * 9)?);
            stage_biases.push(Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        let mut lateral_kernels = Vec::with_capacity(STAGES);
        for &stage_c in &config.stage_channels {
            lateral_kernels.push(kaiming(
                &[config.lateral_channels, stage_c, 1, 1],
                stage_c,
            )?);
        }
        let classifier = kaiming(&[config.classes, config.c_s()], config.c_s())?;
        Ok(BackboneParams {
            config: config.clone(),
            stage_kernels,
            stage_biases,
            lateral_kernels,
            classifier,
        })
    }

    /// All parameter tensors in the fixed order of [`param_names`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for i in 0..STAGES {
            out.push(&self.stage_kernels[i]);
            out.push(&self.stage_biases[i]);
        }
        for k in &self.lateral_kernels {
            out.push(k);
        }
        out.push(&self.classifier);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for pair in self.stage_kernels.iter_mut().zip(self.stage_biases.iter_mut()) {
            out.push(pair.0);
            out.push(pair.1);
        }
        for k in self.lateral_kernels.iter_mut() {
            out.push(k);
        }
        out.push(&mut self.classifier);
        out
    }

    /// True for parameters belonging to the pretrained-analog backbone group
    /// (stage kernels and biases); false for the newly-added group (laterals
    /// and classifier), which trains at a higher rate.
    pub fn is_backbone_group(&self, index: usize) -> bool {
        index < 2 * STAGES
    }

    /// Registers every parameter on a tape, tracked when `trainable`.
    /// Order matches [`BackboneParams::tensors`].
    pub fn register(&self, tape: &Tape, trainable: bool) -> BackboneVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BackboneVars {
            config: self.config.clone(),
            vars,
        }
    }
}

/// Tape-registered parameters plus the layout to address them.
pub struct BackboneVars {
    pub config: BackboneConfig,
    /// Same order as [`BackboneParams::tensors`].
    pub vars: Vec<Var>,
}

impl BackboneVars {
    pub fn stage_kernel(&self, i: usize) -> Var {
        self.vars[2 * i]
    }
    pub fn stage_bias(&self, i: usize) -> Var {
        self.vars[2 * i + 1]
    }
    pub fn lateral_kernel(&self, i: usize) -> Var {
        self.vars[2 * STAGES + i]
    }
    pub fn classifier(&self) -> Var {
        self.vars[3 * STAGES]
    }
}

/// Forward-pass outputs: stage activations plus the two fused features.
pub struct FeatureBundle {
    /// Post-ReLU output of each stage.
    pub stages: Vec<Var>,
    /// Semantic feature: the last stage's output, `[C_s, H, W]`.
    pub f_s: Var,
    /// Hierarchical feature: concatenated resized laterals, `[C_h, H, W]`.
    pub f_h: Var,
}

/// Runs the extractor on a `[3, H0, W0]` image already registered on the
/// tape. `H0`, `W0` must be divisible by the total stride.
pub fn forward(tape: &Tape, params: &BackboneVars, image: Var) -> Result<FeatureBundle> {
    let shape = tape.shape(image)?;
    if shape.len() != 3 || shape[0] != params.config.in_channels {
        return Err(Error::InvalidShape {
            shape,
            reason: format!(
                "backbone expects [{}, H, W] input",
                params.config.in_channels
            ),
        });
    }
    let stride = params.config.total_stride();
    if shape[1] % stride != 0 || shape[2] % stride != 0 {
        return Err(Error::IndivisibleInput {
            h: shape[1],
            w: shape[2],
            stride,
        });
    }
    let (out_h, out_w) = (shape[1] / stride, shape[2] / stride);

    let mut stages = Vec::with_capacity(STAGES);
    let mut x = image;
    for i in 0..STAGES {
        let conv = tape.conv2d(x, params.stage_kernel(i), STRIDES[i], 1)?;
        let biased = tape.bias_add(conv, params.stage_bias(i))?;
        x = tape.relu(biased)?;
        stages.push(x);
    }
    let f_s = stages[STAGES - 1];

    let mut laterals = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let projected = tape.conv2d(stages[i], params.lateral_kernel(i), 1, 0)?;
        laterals.push(tape.resize_bilinear(projected, out_h, out_w)?);
    }
    let f_h = tape.concat(&laterals)?;

    Ok(FeatureBundle { stages, f_s, f_h })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = BackboneConfig::default();
        let a = BackboneParams::init(&config, 7).unwrap();
        let b = BackboneParams::init(&config, 7).unwrap();
        let c = BackboneParams::init(&config, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let config = BackboneConfig::default();
        let params = BackboneParams::init(&config, 1).unwrap();
        // Stage 2: fan-in 16·9 = 144 → bound sqrt(6/144).
        let bound = (6.0 / 144.0f64).sqrt();
        let k = &params.stage_kernels[1];
        assert!(k.data().iter().all(|v| v.abs() <= bound));
        // Bound is tight-ish: some draw lands in the outer half.
        assert!(k.data().iter().any(|v| v.abs() > bound / 2.0));
        // Biases start at zero.
        assert!(params.stage_biases.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_shapes_and_zero_image() {
        let config = BackboneConfig::tiny(2);
        let params = BackboneParams::init(&config, 3).unwrap();
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let image = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let bundle = forward(&tape, &vars, image).unwrap();
        assert_eq!(tape.shape(bundle.f_s).unwrap(), vec![config.c_s(), 2, 2]);
        assert_eq!(tape.shape(bundle.f_h).unwrap(), vec![config.c_h(), 2, 2]);
        // Zero image and zero biases → all features zero.
        assert!(tape.value(bundle.f_s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(tape.value(bundle.f_h).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let config = BackboneConfig::default();
        let params = BackboneParams::init(&config, 5).unwrap();
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let image = tape.constant(Tensor::zeros(&[3, 60, 64]));
        assert!(matches!(
            forward(&tape, &vars, image),
            Err(Error::IndivisibleInput { h: 60, w: 64, stride: 8 })
        ));
    }

    #[test]
    fn brightness_scaling_keeps_stage1_zero_pattern() {
        let config = BackboneConfig::tiny(2);
        let params = BackboneParams::init(&config, 11).unwrap();
        let mut img = Vec::new();
        for i in 0..3 * 16 * 16 {
            img.push(((i * 29 + 3) % 101) as f64 / 101.0);
        }
        let image = Tensor::new(vec![3, 16, 16], img.clone()).unwrap();
        let doubled = image.mul_scalar(2.0).unwrap();

        let run = |input: Tensor| {
            let tape = Tape::new();
            let vars = params.register(&tape, false);
            let v = tape.constant(input);
            let bundle = forward(&tape, &vars, v).unwrap();
            tape.value(bundle.stages[0]).unwrap()
        };
        let a = run(image);
        let b = run(doubled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x == 0.0, *y == 0.0);
        }
    }

    #[test]
    fn param_names_align_with_tensor_order() {
        let names = param_names();
        let params = BackboneParams::init(&BackboneConfig::default(), 2).unwrap();
        assert_eq!(names.len(), params.tensors().len());
        assert_eq!(names[0], "stage1.kernel");
        assert_eq!(names[8], "lateral1.kernel");
        assert_eq!(names.last().unwrap(), "classifier.weight");
        // Group split: stages are the backbone group, the rest is new.
        assert!(params.is_backbone_group(7));
        assert!(!params.is_backbone_group(8));
    }
}
