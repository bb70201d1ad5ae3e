//! Declarative layer descriptions.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub(crate) fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::None => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
    pub use_bias: bool,
    pub trainable: bool,
}

impl Conv2dSpec {
    pub fn new(filters: usize, kernel_size: usize) -> Self {
        Conv2dSpec {
            filters,
            kernel_size,
            stride: 1,
            padding: Padding::Same,
            activation: Activation::Relu,
            use_bias: true,
            trainable: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub units: usize,
    pub activation: Activation,
    pub use_bias: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d(Conv2dSpec),
    MaxPool2d { window: usize, stride: usize },
    BatchNorm { momentum: f64, epsilon: f64 },
    Dropout { rate: f64 },
    Flatten,
    Dense(DenseSpec),
    /// Channel concatenation of two or more rank-3 inputs.
    Concat,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense(_) => "dense",
            LayerKind::Concat => "concat",
        }
    }

    /// Whether the optimizer may update this layer's parameters.
    pub fn trainable(&self) -> bool {
        match self {
            LayerKind::Conv2d(c) => c.trainable,
            LayerKind::Dense(d) => d.trainable,
            LayerKind::BatchNorm { .. } => true,
            _ => false,
        }
    }
}

/// One node of a model graph. Empty `inputs` means "the previous layer",
/// or the model input for the first layer. The name `input` refers to the
/// model input explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            inputs: Vec::new(),
        }
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }
}

pub const INPUT: &str = "input";
