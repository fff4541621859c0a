//! Layered CNN description: a convolutional backbone, one global average
//! pool and a linear classification head.

use crate::error::NnError;
use crate::tensor::Tensor;

/// A 2-D convolution with square kernels. Weights are laid out
/// `[out_channels, in_channels / groups, kernel, kernel]`; batch norm must
/// already be folded into them.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups.max(1)) * self.kernel * self.kernel
    }

    /// Output side length for an input of side `input`, if positive.
    pub fn output_side(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn validate(&self, index: usize) -> Result<(), NnError> {
        let err = |msg: String| NnError::Architecture(format!("conv layer {index}: {msg}"));
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(err("zero channels".into()));
        }
        if self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(err("kernel, stride and groups must be positive".into()));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(err(format!(
                "groups {} do not divide channels {}->{}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.weight.len() != self.weight_len() {
            return Err(err(format!(
                "weight has {} values, expected {}",
                self.weight.len(),
                self.weight_len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(err(format!(
                "bias has {} values, expected {}",
                self.bias.len(),
                self.out_channels
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(err("non-finite weight".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu6,
    GlobalAvgPool,
    /// The classification head. Its parameters live in [`Model::head_weights`]
    /// and [`Model::head_bias`].
    Linear,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu6 => "relu6",
            Layer::GlobalAvgPool => "gap",
            Layer::Linear => "linear",
        }
    }
}

/// A validated classifier. Immutable after construction and safe to share
/// between concurrent inference calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    head_weights: Tensor,
    head_bias: Vec<f32>,
    labels: Vec<String>,
    input_size: usize,
    feature_shape: (usize, usize, usize),
}

impl Model {
    /// Validates every structural invariant before returning the model.
    pub fn new(
        layers: Vec<Layer>,
        head_weights: Tensor,
        head_bias: Vec<f32>,
        labels: Vec<String>,
        input_size: usize,
    ) -> Result<Self, NnError> {
        if input_size == 0 {
            return Err(NnError::Architecture("input_size must be positive".into()));
        }
        let gap_count = layers
            .iter()
            .filter(|l| matches!(l, Layer::GlobalAvgPool))
            .count();
        if gap_count != 1 {
            return Err(NnError::Architecture(format!(
                "expected exactly one global-average-pool layer, found {gap_count}"
            )));
        }
        let n = layers.len();
        if n < 2 || layers[n - 1] != Layer::Linear || layers[n - 2] != Layer::GlobalAvgPool {
            return Err(NnError::Architecture(
                "the linear head must be the only layer after global-average-pool".into(),
            ));
        }

        let mut channels = 3;
        let mut side = input_size;
        let mut saw_conv = false;
        for (i, layer) in layers[..n - 2].iter().enumerate() {
            match layer {
                Layer::Conv2d(conv) => {
                    conv.validate(i)?;
                    if conv.in_channels != channels {
                        return Err(NnError::ChannelMismatch(format!(
                            "layer {i} expects {} input channels but receives {channels}",
                            conv.in_channels
                        )));
                    }
                    side = conv.output_side(side).ok_or_else(|| {
                        NnError::Architecture(format!(
                            "layer {i} collapses the spatial size to zero"
                        ))
                    })?;
                    channels = conv.out_channels;
                    saw_conv = true;
                }
                Layer::Relu6 => {}
                other => {
                    return Err(NnError::Architecture(format!(
                        "layer {i} ({}) may not appear in the backbone",
                        other.kind()
                    )))
                }
            }
        }
        if !saw_conv {
            return Err(NnError::Architecture("backbone has no convolution".into()));
        }

        let (classes, cols) = head_weights.rows_cols()?;
        if cols != channels {
            return Err(NnError::ChannelMismatch(format!(
                "head expects {cols} channels but the backbone emits {channels}"
            )));
        }
        if head_bias.len() != classes {
            return Err(NnError::Architecture(format!(
                "head bias has {} entries for {classes} classes",
                head_bias.len()
            )));
        }
        if labels.len() != classes {
            return Err(NnError::Architecture(format!(
                "{} labels for {classes} classes",
                labels.len()
            )));
        }
        if head_bias.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }

        Ok(Self {
            layers,
            head_weights,
            head_bias,
            labels,
            input_size,
            feature_shape: (channels, side, side),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `[num_classes, num_channels]`.
    pub fn head_weights(&self) -> &Tensor {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &[f32] {
        &self.head_bias
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// `(channels, height, width)` of the final convolution output.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature_shape
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// Same model with `delta` added to every head bias entry.
    pub fn with_bias_shift(&self, delta: f32) -> Self {
        let mut m = self.clone();
        m.head_bias.iter_mut().for_each(|b| *b += delta);
        m
    }
}
