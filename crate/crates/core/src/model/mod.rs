//! Classifier backbones shared by the evidential head, the co-teaching
//! trainer, and the baseline methods.
//!
//! Two architectures are provided: a compact three-block CNN for desk-scale
//! experiments and a slimmed residual network that keeps ResNet18's four
//! stages but uses one residual block per stage instead of two. Both end in
//! global average pooling, dropout, and a two-logit linear head; the mapping
//! from logits to evidence or probabilities lives with the respective heads.

mod checkpoint;
mod layers;
mod optim;

pub use checkpoint::{load_backbone, load_backbone_bytes, save_backbone, save_backbone_bytes};
pub use layers::{ForwardMode, Param, ParamKind};
pub use optim::AdamW;

use layers::{Activation, AvgPool2, BasicBlock, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Layer, Linear, Relu};
use ndarray::{Array2, Array3, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream_rng;

/// Number of output logits: one per class.
pub const OUTPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallCnn,
    HalfResnet18,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Self::SmallCnn),
            "half_resnet18" => Ok(Self::HalfResnet18),
            other => Err(Error::InvalidConfig(format!("unknown backbone kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub dropout_rate: f64,
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::SmallCnn,
            dropout_rate: 0.3,
            input_size: (32, 32),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.input_size.0 < 8 || self.input_size.1 < 8 {
            return Err(Error::InvalidConfig(format!(
                "input_size must be at least 8x8, got {:?}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// A backbone instance: an ordered layer stack plus its configuration.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
}

fn build_small_cnn(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    let channels = [1usize, 16, 32, 64];
    for i in 0..3 {
        layers.push(Layer::Conv(Conv2d::new(
            &format!("conv{}", i + 1),
            channels[i],
            channels[i + 1],
            (3, 3),
            1,
            1,
            rng,
        )));
        layers.push(Layer::Relu(Relu::new()));
        layers.push(Layer::Pool(AvgPool2::new()));
    }
    layers.push(Layer::Gap(GlobalAvgPool::new()));
    layers.push(Layer::Drop(Dropout::new(config.dropout_rate)));
    layers.push(Layer::Fc(Linear::new("head", 64, OUTPUT_DIM, rng)));
    layers
}

fn build_half_resnet18(config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = vec![
        Layer::Conv(Conv2d::new("stem", 1, 64, (3, 3), 1, 1, rng)),
        Layer::Bn(BatchNorm2d::new("stem_bn", 64)),
        Layer::Relu(Relu::new()),
    ];
    // Four stages; the reference layout runs two residual blocks per stage,
    // this variant runs one.
    let widths = [64usize, 64, 128, 256, 512];
    for stage in 0..4 {
        let stride = if stage == 0 { 1 } else { 2 };
        layers.push(Layer::Block(Box::new(BasicBlock::new(
            &format!("stage{}.block0", stage + 1),
            widths[stage],
            widths[stage + 1],
            stride,
            rng,
        ))));
    }
    layers.push(Layer::Gap(GlobalAvgPool::new()));
    layers.push(Layer::Drop(Dropout::new(config.dropout_rate)));
    layers.push(Layer::Fc(Linear::new("head", 512, OUTPUT_DIM, rng)));
    layers
}

impl Backbone {
    /// Builds a freshly initialized backbone; all weights derive from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream_rng(seed, 0x1217);
        let layers = match config.kind {
            BackboneKind::SmallCnn => build_small_cnn(&config, &mut rng),
            BackboneKind::HalfResnet18 => build_half_resnet18(&config, &mut rng),
        };
        Ok(Self { config, layers })
    }

    /// Same architecture, independently drawn weights.
    pub fn clone_with_new_init(&self, seed: u64) -> Result<Self> {
        Self::new(self.config, seed)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the network. `rng` is required whenever `mode` activates dropout
    /// and the configured rate is positive.
    pub fn forward(
        &mut self,
        batch: &Array3<f32>,
        mode: ForwardMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<f64>> {
        let (n, h, w) = batch.dim();
        if n == 0 {
            return Ok(Array2::zeros((0, OUTPUT_DIM)));
        }
        if (h, w) != self.config.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} input", self.config.input_size),
                got: format!("({h}, {w})"),
            });
        }
        let x = Array4::from_shape_fn((n, 1, h, w), |(ni, _, r, c)| batch[[ni, r, c]] as f64);
        let mut act = Activation::Map(x);
        for layer in &mut self.layers {
            act = layer.forward(act, mode, rng.as_deref_mut())?;
        }
        let logits = match act {
            Activation::Vec2(a) => a,
            Activation::Map(_) => {
                return Err(Error::InvalidConfig(
                    "internal: backbone must end in a flattened head".into(),
                ))
            }
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "backbone produced non-finite logits (diverged training?)".into(),
            ));
        }
        Ok(logits)
    }

    /// Backpropagates d(loss)/d(logits), overwriting every parameter's
    /// gradient. Must follow a forward pass in a cache-building mode.
    pub fn backward(&mut self, grad_logits: &Array2<f64>) -> Result<()> {
        let mut grad = Activation::Vec2(grad_logits.clone());
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad)?;
        }
        Ok(())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for layer in &self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params_mut(f);
        }
    }

    /// Batch-norm running statistics and any other non-parameter state.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for layer in &self.layers {
            layer.visit_buffers(f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for layer in &mut self.layers {
            layer.visit_buffers_mut(f);
        }
    }

    /// Ordered (name, shape) list over parameters — the architecture's
    /// identity for equality checks and checkpoint validation.
    pub fn fingerprint(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.shape().to_vec())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// Number of residual blocks in the stack (0 for the plain CNN).
    pub fn residual_block_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_block()).count()
    }
}
