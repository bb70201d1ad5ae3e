//! The twin networks.
//!
//! MM-V (village) is four `same`-padded convolutions alternating with max
//! pooling, followed by batchnorm, dropout, flatten and a two-layer dense
//! head. MM-A (actual case) has the same layout under an `A_` prefix. MM-V-A
//! is MM-A plus a frozen copy of `V_conv2d_3` applied to the pooled output of
//! `A_conv2d_2`; its output (no bias, no activation) is concatenated with
//! `A_conv2d_3` along channels and feeds `A_conv2d_4`:
//!
//! ```text
//! F3(X_A) = concat(F2(X_A) * W3_V, relu(F2(X_A) * W3_A + B3_A))
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::{param_name, KERNEL};
use crate::nn::{Activation, Conv2dSpec, DenseSpec, LayerKind, LayerSpec, Network, Padding, WeightStore};
use crate::rng;

/// Layer whose kernel is transplanted from MM-V into MM-V-A.
pub const DONOR_LAYER: &str = "V_conv2d_3";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MM-V")]
    Village,
    #[serde(rename = "MM-A")]
    ActualCase,
    #[serde(rename = "MM-V-A")]
    Transfer,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Village => "MM-V",
            Variant::ActualCase => "MM-A",
            Variant::Transfer => "MM-V-A",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Variant::Village => "V",
            Variant::ActualCase | Variant::Transfer => "A",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MM-V" | "mmv" | "village" => Ok(Variant::Village),
            "MM-A" | "mma" => Ok(Variant::ActualCase),
            "MM-V-A" | "mmva" | "transfer" => Ok(Variant::Transfer),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Architecture knobs, serialized as TOML next to trained weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub filters: [usize; 4],
    pub kernel_size: usize,
    pub padding: Padding,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub dense_units: usize,
    pub conv_activation: Activation,
    pub hidden_activation: Activation,
    pub dropout_conv: f64,
    pub dropout_dense: f64,
    pub batchnorm_momentum: f64,
    pub batchnorm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Village,
            input_size: 64,
            filters: [32, 32, 64, 64],
            kernel_size: 3,
            padding: Padding::Same,
            pool_window: 2,
            pool_stride: 2,
            dense_units: 256,
            conv_activation: Activation::Relu,
            hidden_activation: Activation::Relu,
            dropout_conv: 0.1,
            dropout_dense: 0.5,
            batchnorm_momentum: 0.99,
            batchnorm_epsilon: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Where the transferred kernel enters the actual-case stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferBinding {
    pub donor_layer: String,
    /// Node whose output both junction branches consume.
    pub junction_input: String,
    pub merge_layer: String,
    pub consumer_layer: String,
    pub donor_kernel_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub transfer: Option<TransferBinding>,
}

/// A compiled model: its declaration and the shape-checked graph.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub config: ModelConfig,
    pub network: Network,
}

impl Model {
    pub fn name(&self) -> &'static str {
        self.spec.variant.label()
    }

    /// Names of the convolution layers in graph order.
    pub fn conv_layers(&self) -> Vec<&str> {
        self.spec
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d(_)))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Stand-alone graph of the transfer junction, taking the junction input
    /// feature map as its model input. Only defined for MM-V-A.
    pub fn junction_network(&self) -> Option<Result<Network>> {
        let binding = self.spec.transfer.as_ref()?;
        let shape = self
            .network
            .layer_shapes()
            .into_iter()
            .find(|(n, _)| *n == binding.junction_input)
            .map(|(_, s)| s)?;
        let pick = |name: &str| self.spec.layers.iter().find(|l| l.name == name).cloned();
        let (Some(mut donor), Some(mut own), Some(merge)) = (
            pick(&binding.donor_layer),
            pick(&conv_name(Variant::Transfer, 3)),
            pick(&binding.merge_layer),
        ) else {
            return None;
        };
        donor.inputs = vec![crate::nn::INPUT.to_string()];
        own.inputs = vec![crate::nn::INPUT.to_string()];
        Some(Network::build(&[donor, own, merge], &shape))
    }
}

pub fn conv_name(variant: Variant, i: usize) -> String {
    format!("{}_conv2d_{i}", variant.prefix())
}

fn pool_name(variant: Variant, i: usize) -> String {
    format!("{}_max_pooling2d_{i}", variant.prefix())
}

fn validate(config: &ModelConfig) -> Result<()> {
    if config.input_size == 0 || config.filters.contains(&0) || config.kernel_size == 0 || config.dense_units == 0 {
        return Err(Error::Config("input size, filters, kernel size and dense units must be positive".into()));
    }
    if config.pool_window < 2 || config.pool_stride == 0 {
        return Err(Error::Config("pool window must be >= 2 and stride >= 1".into()));
    }
    for (what, rate) in [("dropout_conv", config.dropout_conv), ("dropout_dense", config.dropout_dense)] {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("{what} must be in [0,1), got {rate}")));
        }
    }
    Ok(())
}

fn conv(config: &ModelConfig, variant: Variant, i: usize) -> LayerSpec {
    LayerSpec::new(
        conv_name(variant, i),
        LayerKind::Conv2d(Conv2dSpec {
            filters: config.filters[i - 1],
            kernel_size: config.kernel_size,
            stride: 1,
            padding: config.padding,
            activation: config.conv_activation,
            use_bias: true,
            trainable: true,
        }),
    )
}

fn pool(config: &ModelConfig, variant: Variant, i: usize) -> LayerSpec {
    LayerSpec::new(
        pool_name(variant, i),
        LayerKind::MaxPool2d {
            window: config.pool_window,
            stride: config.pool_stride,
        },
    )
}

fn head(config: &ModelConfig, variant: Variant) -> Vec<LayerSpec> {
    let p = variant.prefix();
    vec![
        LayerSpec::new(
            format!("{p}_batch_normalization"),
            LayerKind::BatchNorm {
                momentum: config.batchnorm_momentum,
                epsilon: config.batchnorm_epsilon,
            },
        ),
        LayerSpec::new(format!("{p}_dropout_1"), LayerKind::Dropout { rate: config.dropout_conv }),
        LayerSpec::new(format!("{p}_flatten"), LayerKind::Flatten),
        LayerSpec::new(
            format!("{p}_dense_1"),
            LayerKind::Dense(DenseSpec {
                units: config.dense_units,
                activation: config.hidden_activation,
                use_bias: true,
                trainable: true,
            }),
        ),
        LayerSpec::new(format!("{p}_dropout_2"), LayerKind::Dropout { rate: config.dropout_dense }),
        LayerSpec::new(
            format!("{p}_dense_2"),
            LayerKind::Dense(DenseSpec {
                units: 1,
                activation: Activation::Sigmoid,
                use_bias: true,
                trainable: true,
            }),
        ),
    ]
}

fn plain_layers(config: &ModelConfig, variant: Variant) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for i in 1..=4 {
        layers.push(conv(config, variant, i));
        layers.push(pool(config, variant, i));
    }
    layers.extend(head(config, variant));
    layers
}

fn compile(spec: ModelSpec, config: &ModelConfig) -> Result<Model> {
    let network = Network::build(&spec.layers, &spec.input_shape).map_err(|e| match e {
        Error::InvalidLayer { layer, reason } => Error::Config(format!(
            "{} does not fit a {}x{} input at `{layer}`: {reason}",
            spec.variant.label(),
            config.input_size,
            config.input_size
        )),
        other => other,
    })?;
    Ok(Model {
        spec,
        config: config.clone(),
        network,
    })
}

fn init(model: &Model, seed: u64) -> WeightStore {
    model.network.init_weights(&mut rng::stream(seed, "init", 0))
}

/// Village model (or its MM-A twin) declaration without weights.
pub fn mmv_model(config: &ModelConfig, variant: Variant) -> Result<Model> {
    validate(config)?;
    if variant == Variant::Transfer {
        return Err(Error::Config("MM-V-A needs donor weights; use build_mmva".into()));
    }
    let spec = ModelSpec {
        variant,
        input_shape: [config.input_size, config.input_size, 3],
        layers: plain_layers(config, variant),
        transfer: None,
    };
    compile(spec, config)
}

/// MM-V with freshly initialized weights.
pub fn build_mmv(config: &ModelConfig, seed: u64) -> Result<(Model, WeightStore)> {
    let model = mmv_model(config, Variant::Village)?;
    let weights = init(&model, seed);
    Ok((model, weights))
}

/// MM-A: the twin with the same layout as MM-V and no transfer branch.
pub fn build_mma(config: &ModelConfig, seed: u64) -> Result<(Model, WeightStore)> {
    let model = mmv_model(config, Variant::ActualCase)?;
    let weights = init(&model, seed);
    Ok((model, weights))
}

/// MM-V-A declaration for a donor kernel of the given `[k, k, cin, n]` shape.
pub fn mmva_model(config: &ModelConfig, donor_kernel_shape: &[usize]) -> Result<Model> {
    validate(config)?;
    let v = Variant::Transfer;
    let &[k, k2, cin, n] = donor_kernel_shape else {
        return Err(Error::Config(format!(
            "donor kernel must be rank 4, got shape {donor_kernel_shape:?}"
        )));
    };
    if k != k2 || k == 0 || n == 0 {
        return Err(Error::Config(format!("donor kernel shape {donor_kernel_shape:?} is not a square kernel")));
    }
    if cin != config.filters[1] {
        return Err(Error::Config(format!(
            "donor kernel expects {cin} input channels but {} produces {}",
            conv_name(v, 2),
            config.filters[1]
        )));
    }
    let junction_input = pool_name(v, 2);
    let merge = "A_concatenate".to_string();
    let mut layers = Vec::new();
    for i in 1..=2 {
        layers.push(conv(config, v, i));
        layers.push(pool(config, v, i));
    }
    layers.push(
        LayerSpec::new(
            DONOR_LAYER,
            LayerKind::Conv2d(Conv2dSpec {
                filters: n,
                kernel_size: k,
                stride: 1,
                padding: config.padding,
                activation: Activation::None,
                use_bias: false,
                trainable: false,
            }),
        )
        .with_inputs(&[&junction_input]),
    );
    layers.push(conv(config, v, 3).with_inputs(&[&junction_input]));
    layers.push(LayerSpec::new(merge.clone(), LayerKind::Concat).with_inputs(&[DONOR_LAYER, &conv_name(v, 3)]));
    layers.push(pool(config, v, 3));
    layers.push(conv(config, v, 4));
    layers.push(pool(config, v, 4));
    layers.extend(head(config, v));
    let spec = ModelSpec {
        variant: v,
        input_shape: [config.input_size, config.input_size, 3],
        layers,
        transfer: Some(TransferBinding {
            donor_layer: DONOR_LAYER.to_string(),
            junction_input,
            merge_layer: merge,
            consumer_layer: conv_name(v, 4),
            donor_kernel_shape: donor_kernel_shape.to_vec(),
        }),
    };
    compile(spec, &config.clone().with_variant(v))
}

/// MM-V-A whose frozen branch carries the donor's `V_conv2d_3/kernel`.
/// Every other parameter is freshly initialized from `seed`.
pub fn build_mmva(config: &ModelConfig, donor: &WeightStore, seed: u64) -> Result<(Model, WeightStore)> {
    let key = param_name(DONOR_LAYER, KERNEL);
    let kernel = donor
        .get(&key)
        .ok_or_else(|| Error::Config(format!("donor weights have no `{key}` entry")))?;
    let model = mmva_model(config, kernel.shape())?;
    let mut weights = init(&model, seed);
    weights.insert(key, kernel.clone());
    Ok((model, weights))
}

/// Rebuilds the model a trained weights file belongs to and checks every shape.
pub fn restore(config: &ModelConfig, weights: &WeightStore) -> Result<Model> {
    let model = match config.variant {
        Variant::Transfer => {
            let key = param_name(DONOR_LAYER, KERNEL);
            mmva_model(config, weights.require(&key)?.shape())?
        }
        v => mmv_model(config, v)?,
    };
    model.network.validate_weights(weights)?;
    Ok(model)
}

/// Layer totals under the convention used in reports: every graph node is a
/// layer, the model input is not.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCount {
    pub conv: usize,
    pub pool: usize,
    pub other: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.conv + self.pool + self.other
    }
}

pub fn layer_count(spec: &ModelSpec) -> LayerCount {
    let mut c = LayerCount::default();
    for l in &spec.layers {
        match l.kind {
            LayerKind::Conv2d(_) => c.conv += 1,
            LayerKind::MaxPool2d { .. } => c.pool += 1,
            _ => c.other += 1,
        }
    }
    c
}
