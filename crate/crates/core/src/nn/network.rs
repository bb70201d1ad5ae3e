//! A small directed-acyclic layer graph with reverse-mode gradients.
//!
//! Nodes run in declaration order; each node may consume the model input or
//! any earlier node. Parameters live outside the graph in a [`WeightStore`]
//! keyed `"<layer>/<param>"`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

use super::layer::{Activation, LayerKind, LayerSpec, INPUT};
use super::ops::{self, ConvGeom, PoolGeom};
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const KERNEL: &str = "kernel";
pub const BIAS: &str = "bias";
pub const GAMMA: &str = "gamma";
pub const BETA: &str = "beta";
pub const MOVING_MEAN: &str = "moving_mean";
pub const MOVING_VARIANCE: &str = "moving_variance";
/// Number of running-statistics updates applied so far, stored as `[1]`.
pub const MOVING_COUNT: &str = "moving_count";

pub fn param_name(layer: &str, param: &str) -> String {
    format!("{layer}/{param}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Input,
    Node(usize),
}

#[derive(Clone, Debug)]
enum Geom {
    Conv(ConvGeom),
    Pool(PoolGeom),
    None,
}

#[derive(Clone, Debug)]
struct Node {
    spec: LayerSpec,
    sources: Vec<Source>,
    in_shapes: Vec<Vec<usize>>,
    out_shape: Vec<usize>,
    geom: Geom,
}

/// A parameter the graph expects to find in a [`WeightStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: String,
    pub shape: Vec<usize>,
    /// Updated by the optimizer.
    pub trainable: bool,
}

/// Gradient of the loss with respect to the network output.
#[derive(Clone, Debug)]
pub enum OutputGrad {
    /// d loss / d output, `[batch * output-size]`.
    Output(Vec<f64>),
    /// d loss / d pre-activation of the final conv or dense layer.
    PreActivation(Vec<f64>),
}

pub enum Mode<'a> {
    /// Dropout is the identity and batchnorm uses running statistics.
    Inference,
    /// Dropout masks come from the given stream; batchnorm uses batch statistics.
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Pool(Vec<u32>),
    Dropout(Vec<f64>),
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Dense { pre: Vec<f64> },
}

/// Running-statistic update produced by a training forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormUpdate {
    pub layer: String,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Everything a forward pass recorded for the backward pass.
pub struct Trace<T> {
    batch: usize,
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    aux: Vec<Aux>,
    pub batchnorm_updates: Vec<BatchNormUpdate>,
}

impl<T: Real> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("network has at least one layer")
    }

    pub fn node_output(&self, index: usize) -> &Tensor<T> {
        &self.outputs[index]
    }

    /// Pre-activation values of the final layer, when it is dense.
    pub fn final_pre_activation(&self) -> Option<&[f64]> {
        match self.aux.last() {
            Some(Aux::Dense { pre }) => Some(pre),
            _ => None,
        }
    }
}

/// Test hook: scales one layer's kernel gradient to emulate a broken backward rule.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardFault {
    pub layer: String,
    pub kernel_grad_scale: f64,
}

#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    params: Vec<ParamInfo>,
    fault: Option<BackwardFault>,
}

impl Network {
    /// Resolves inputs and checks the shape algebra for every layer.
    pub fn build(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut nodes: Vec<Node> = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        for (i, spec) in layers.iter().enumerate() {
            let name = spec.name.as_str();
            if name.is_empty() || name == INPUT || name.contains('/') {
                return Err(Error::layer(name, "layer names must be non-empty, not `input`, and free of `/`"));
            }
            if index.contains_key(name) {
                return Err(Error::layer(name, "duplicate layer name"));
            }
            let sources = if spec.inputs.is_empty() {
                vec![if i == 0 { Source::Input } else { Source::Node(i - 1) }]
            } else {
                spec.inputs
                    .iter()
                    .map(|s| {
                        if s == INPUT {
                            Ok(Source::Input)
                        } else {
                            index
                                .get(s.as_str())
                                .map(|&j| Source::Node(j))
                                .ok_or_else(|| Error::layer(name, format!("unknown or later input `{s}`")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let in_shapes: Vec<Vec<usize>> = sources
                .iter()
                .map(|s| match s {
                    Source::Input => input_shape.to_vec(),
                    Source::Node(j) => nodes[*j].out_shape.clone(),
                })
                .collect();
            let (out_shape, geom, layer_params) = infer(spec, &in_shapes)?;
            params.extend(layer_params);
            index.insert(name, i);
            nodes.push(Node {
                spec: spec.clone(),
                sources,
                in_shapes,
                out_shape,
                geom,
            });
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            nodes,
            params,
            fault: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes.last().expect("non-empty").out_shape
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.nodes.iter().map(|n| &n.spec)
    }

    /// `(layer name, per-sample output shape)` for every layer.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes.iter().map(|n| (n.spec.name.clone(), n.out_shape.clone())).collect()
    }

    /// Per-sample input shapes of a layer, in input order.
    pub fn layer_input_shapes(&self, layer: &str) -> Option<&[Vec<usize>]> {
        self.nodes.iter().find(|n| n.spec.name == layer).map(|n| n.in_shapes.as_slice())
    }

    pub fn layer_index(&self, layer: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.spec.name == layer)
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn trainable_params(&self) -> impl Iterator<Item = &ParamInfo> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_params().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn inject_backward_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    /// Glorot-uniform kernels, zero biases, unit gammas, zero betas,
    /// zero running means, unit running variances and zero update counts.
    pub fn init_weights(&self, rng: &mut Rng) -> WeightStore<f32> {
        let mut store = WeightStore::new();
        for p in &self.params {
            let n: usize = p.shape.iter().product();
            let suffix = p.name.rsplit('/').next().unwrap_or_default();
            let data: Vec<f32> = match suffix {
                KERNEL => {
                    let (fan_in, fan_out) = fans(&p.shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect()
                }
                GAMMA | MOVING_VARIANCE => vec![1.0; n],
                _ => vec![0.0; n],
            };
            store.insert(p.name.clone(), Tensor::new(p.shape.clone(), data).expect("param shapes are positive"));
        }
        store
    }

    /// Checks that every expected parameter is present with the right shape.
    pub fn validate_weights<T: Real>(&self, store: &WeightStore<T>) -> Result<()> {
        for p in &self.params {
            let t = store.require(&p.name)?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::shape(&p.name, &p.shape, t.shape()));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, weights: &WeightStore<T>, input: &Tensor<T>, mut mode: Mode<'_>) -> Result<Trace<T>> {
        let batch = self.check_input(input)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut updates = Vec::new();
        for node in &self.nodes {
            let name = node.spec.name.as_str();
            let src = |s: &Source| -> &Tensor<T> {
                match s {
                    Source::Input => input,
                    Source::Node(j) => &outputs[*j],
                }
            };
            let x = src(&node.sources[0]);
            let mut out_shape = vec![batch];
            out_shape.extend_from_slice(&node.out_shape);
            let (values, a): (Vec<f64>, Aux) = match (&node.spec.kind, &node.geom) {
                (LayerKind::Conv2d(c), Geom::Conv(g)) => {
                    let kernel = weights.require(&param_name(name, KERNEL))?;
                    let bias = if c.use_bias {
                        Some(weights.require(&param_name(name, BIAS))?.data())
                    } else {
                        None
                    };
                    let out = ops::conv_forward(x.data(), batch, g, kernel.data(), bias, c.filters, c.activation);
                    (out, Aux::None)
                }
                (LayerKind::MaxPool2d { .. }, Geom::Pool(g)) => {
                    let (out, arg) = ops::maxpool_forward(x.data(), batch, g);
                    (out, Aux::Pool(arg))
                }
                (LayerKind::BatchNorm { momentum, epsilon }, _) => {
                    let channels = *node.out_shape.last().expect("rank >= 1");
                    let gamma = weights.require(&param_name(name, GAMMA))?.to_f64_vec();
                    let beta = weights.require(&param_name(name, BETA))?.to_f64_vec();
                    let (mean, var) = if mode.is_train() {
                        let (m, v) = ops::channel_moments(x.data(), channels);
                        updates.push(BatchNormUpdate {
                            layer: name.to_string(),
                            momentum: *momentum,
                            batch_mean: m.clone(),
                            batch_var: v.clone(),
                        });
                        (m, v)
                    } else {
                        (
                            weights.require(&param_name(name, MOVING_MEAN))?.to_f64_vec(),
                            weights.require(&param_name(name, MOVING_VARIANCE))?.to_f64_vec(),
                        )
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let mut xhat = Vec::with_capacity(x.len());
                    let mut out = Vec::with_capacity(x.len());
                    for row in x.data().chunks_exact(channels) {
                        for (ch, v) in row.iter().enumerate() {
                            let h = (v.to_f64() - mean[ch]) * inv_std[ch];
                            xhat.push(h);
                            out.push(gamma[ch] * h + beta[ch]);
                        }
                    }
                    (out, Aux::BatchNorm { xhat, inv_std })
                }
                (LayerKind::Dropout { rate }, _) => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let scale: Vec<f64> = (0..x.len())
                            .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                            .collect();
                        let out = x.data().iter().zip(&scale).map(|(v, s)| v.to_f64() * s).collect();
                        (out, Aux::Dropout(scale))
                    }
                    _ => (x.to_f64_vec(), Aux::None),
                },
                (LayerKind::Flatten, _) => (x.to_f64_vec(), Aux::None),
                (LayerKind::Dense(d), _) => {
                    let features = node.in_shapes[0][0];
                    let kernel = weights.require(&param_name(name, KERNEL))?;
                    let bias = if d.use_bias {
                        Some(weights.require(&param_name(name, BIAS))?.data())
                    } else {
                        None
                    };
                    let pre = ops::dense_forward(x.data(), batch, features, kernel.data(), bias, d.units);
                    let out = pre.iter().map(|&z| d.activation.apply(z)).collect();
                    (out, Aux::Dense { pre })
                }
                (LayerKind::Concat, _) => {
                    let parts: Vec<(&Tensor<T>, usize)> = node
                        .sources
                        .iter()
                        .zip(&node.in_shapes)
                        .map(|(s, shape)| (src(s), shape[2]))
                        .collect();
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let pixels = batch * node.out_shape[0] * node.out_shape[1];
                    let mut out = Vec::with_capacity(pixels * total);
                    for p in 0..pixels {
                        for (t, c) in &parts {
                            out.extend(t.data()[p * c..(p + 1) * c].iter().map(|v| v.to_f64()));
                        }
                    }
                    (out, Aux::None)
                }
                _ => unreachable!("geometry is fixed at build time"),
            };
            let t = Tensor::from_f64(&out_shape, &values);
            t.check_finite(name)?;
            outputs.push(t);
            aux.push(a);
        }
        Ok(Trace {
            batch,
            input: input.clone(),
            outputs,
            aux,
            batchnorm_updates: updates,
        })
    }

    /// Inference-mode forward pass returning only the output.
    pub fn predict<T: Real>(&self, weights: &WeightStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = self.forward(weights, input, Mode::Inference)?;
        Ok(trace.outputs.into_iter().next_back().expect("non-empty"))
    }

    /// Gradients of every trainable parameter, keyed by parameter name.
    pub fn backward<T: Real>(
        &self,
        weights: &WeightStore<T>,
        trace: &Trace<T>,
        output_grad: OutputGrad,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let batch = trace.batch;
        let last = self.nodes.len() - 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut pre_grad_last = None;
        match output_grad {
            OutputGrad::Output(g) => {
                check_len("output gradient", g.len(), trace.outputs[last].len())?;
                grads[last] = Some(g);
            }
            OutputGrad::PreActivation(g) => {
                if !matches!(self.nodes[last].spec.kind, LayerKind::Dense(_) | LayerKind::Conv2d(_)) {
                    return Err(Error::layer(
                        &self.nodes[last].spec.name,
                        "pre-activation gradients need a final conv or dense layer",
                    ));
                }
                check_len("pre-activation gradient", g.len(), trace.outputs[last].len())?;
                pre_grad_last = Some(g);
            }
        }
        let mut out = BTreeMap::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let name = node.spec.name.as_str();
            let pre_given = if i == last { pre_grad_last.take() } else { None };
            let g_out = match (grads[i].take(), &pre_given) {
                (Some(g), _) => g,
                (None, Some(_)) => Vec::new(),
                (None, None) => continue,
            };
            let x = match node.sources[0] {
                Source::Input => &trace.input,
                Source::Node(j) => &trace.outputs[j],
            };
            let needs_input: Vec<bool> = node.sources.iter().map(|s| matches!(s, Source::Node(_))).collect();
            let input_grads: Vec<Option<Vec<f64>>> = match (&node.spec.kind, &node.geom) {
                (LayerKind::Conv2d(c), Geom::Conv(g)) => {
                    let grad_pre = match pre_given {
                        Some(p) => p,
                        None => through_activation(&g_out, trace.outputs[i].data(), c.activation),
                    };
                    let kernel = weights.require(&param_name(name, KERNEL))?;
                    let r = ops::conv_backward(
                        x.data(),
                        batch,
                        g,
                        kernel.data(),
                        c.filters,
                        &grad_pre,
                        c.trainable,
                        c.trainable && c.use_bias,
                        needs_input[0],
                    );
                    if let Some(mut dk) = r.kernel {
                        self.apply_fault(name, &mut dk);
                        out.insert(param_name(name, KERNEL), dk);
                    }
                    if let Some(db) = r.bias {
                        out.insert(param_name(name, BIAS), db);
                    }
                    vec![r.input]
                }
                (LayerKind::MaxPool2d { .. }, _) => {
                    let Aux::Pool(arg) = &trace.aux[i] else { unreachable!() };
                    vec![needs_input[0].then(|| ops::maxpool_backward(&g_out, arg, x.len()))]
                }
                (LayerKind::BatchNorm { .. }, _) => {
                    let Aux::BatchNorm { xhat, inv_std } = &trace.aux[i] else { unreachable!() };
                    let channels = inv_std.len();
                    let gamma = weights.require(&param_name(name, GAMMA))?.to_f64_vec();
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for (gr, xr) in g_out.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
                        for ch in 0..channels {
                            dgamma[ch] += gr[ch] * xr[ch];
                            dbeta[ch] += gr[ch];
                        }
                    }
                    let train = trace.batchnorm_updates.iter().any(|u| u.layer == name);
                    let dx = needs_input[0].then(|| {
                        let m = (g_out.len() / channels) as f64;
                        g_out
                            .chunks_exact(channels)
                            .zip(xhat.chunks_exact(channels))
                            .flat_map(|(gr, xr)| {
                                (0..channels).map(|ch| {
                                    let scale = gamma[ch] * inv_std[ch];
                                    if train {
                                        scale / m * (m * gr[ch] - dbeta[ch] - xr[ch] * dgamma[ch])
                                    } else {
                                        scale * gr[ch]
                                    }
                                })
                            })
                            .collect()
                    });
                    if node.spec.kind.trainable() {
                        out.insert(param_name(name, GAMMA), dgamma);
                        out.insert(param_name(name, BETA), dbeta);
                    }
                    vec![dx]
                }
                (LayerKind::Dropout { .. }, _) => {
                    let dx = match &trace.aux[i] {
                        Aux::Dropout(scale) => g_out.iter().zip(scale).map(|(g, s)| g * s).collect(),
                        _ => g_out,
                    };
                    vec![needs_input[0].then_some(dx)]
                }
                (LayerKind::Flatten, _) => vec![needs_input[0].then_some(g_out)],
                (LayerKind::Dense(d), _) => {
                    let grad_pre = match pre_given {
                        Some(p) => p,
                        None => through_activation(&g_out, trace.outputs[i].data(), d.activation),
                    };
                    let kernel = weights.require(&param_name(name, KERNEL))?;
                    let r = ops::dense_backward(
                        x.data(),
                        batch,
                        node.in_shapes[0][0],
                        kernel.data(),
                        d.units,
                        &grad_pre,
                        d.trainable,
                        d.trainable && d.use_bias,
                        needs_input[0],
                    );
                    if let Some(mut dk) = r.kernel {
                        self.apply_fault(name, &mut dk);
                        out.insert(param_name(name, KERNEL), dk);
                    }
                    if let Some(db) = r.bias {
                        out.insert(param_name(name, BIAS), db);
                    }
                    vec![r.input]
                }
                (LayerKind::Concat, _) => {
                    let widths: Vec<usize> = node.in_shapes.iter().map(|s| s[2]).collect();
                    let total: usize = widths.iter().sum();
                    let pixels = g_out.len() / total;
                    let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(pixels * w)).collect();
                    for p in 0..pixels {
                        let mut off = p * total;
                        for (part, w) in parts.iter_mut().zip(&widths) {
                            part.extend_from_slice(&g_out[off..off + w]);
                            off += w;
                        }
                    }
                    parts
                        .into_iter()
                        .zip(&needs_input)
                        .map(|(p, need)| need.then_some(p))
                        .collect()
                }
                _ => unreachable!("geometry is fixed at build time"),
            };
            for (src, g) in node.sources.iter().zip(input_grads) {
                if let (Source::Node(j), Some(g)) = (src, g) {
                    match &mut grads[*j] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        for (name, g) in &out {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(out)
    }

    fn apply_fault(&self, layer: &str, grad: &mut [f64]) {
        if let Some(f) = &self.fault {
            if f.layer == layer {
                grad.iter_mut().for_each(|g| *g *= f.kernel_grad_scale);
            }
        }
    }

    fn check_input<T: Real>(&self, input: &Tensor<T>) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape(INPUT, &expected, shape));
        }
        input.check_finite(INPUT)?;
        Ok(shape[0])
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} has {got} values, expected {want}")))
    }
}

fn through_activation<T: Real>(grad: &[f64], outputs: &[T], act: Activation) -> Vec<f64> {
    if act == Activation::None {
        return grad.to_vec();
    }
    grad.iter()
        .zip(outputs)
        .map(|(g, y)| g * act.derivative_from_output(y.to_f64()))
        .collect()
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [k1, k2, cin, cout] => (k1 * k2 * cin, k1 * k2 * cout),
        [fin, fout] => (*fin, *fout),
        [n] => (*n, *n),
        _ => (1, 1),
    }
}

type Inferred = (Vec<usize>, Geom, Vec<ParamInfo>);

fn infer(spec: &LayerSpec, in_shapes: &[Vec<usize>]) -> Result<Inferred> {
    let name = spec.name.as_str();
    let param = |p: &str, shape: Vec<usize>, trainable: bool| ParamInfo {
        name: param_name(name, p),
        layer: name.to_string(),
        shape,
        trainable,
    };
    let single = || -> Result<&Vec<usize>> {
        if in_shapes.len() == 1 {
            Ok(&in_shapes[0])
        } else {
            Err(Error::layer(name, format!("expects one input, got {}", in_shapes.len())))
        }
    };
    let rank3 = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
        match s.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            _ => Err(Error::layer(name, format!("expects a rank-3 input, got {s:?}"))),
        }
    };
    match &spec.kind {
        LayerKind::Conv2d(c) => {
            let (h, w, ch) = rank3(single()?)?;
            if c.kernel_size == 0 || c.filters == 0 || c.stride == 0 {
                return Err(Error::layer(name, "kernel size, filters and stride must be positive"));
            }
            let g = ConvGeom::new(h, w, ch, c.kernel_size, c.stride, c.padding).ok_or_else(|| {
                Error::layer(
                    name,
                    format!("kernel {} does not fit a {h}x{w} input with {:?} padding", c.kernel_size, c.padding),
                )
            })?;
            let k = c.kernel_size;
            let mut params = vec![param(KERNEL, vec![k, k, ch, c.filters], c.trainable)];
            if c.use_bias {
                params.push(param(BIAS, vec![c.filters], c.trainable));
            }
            Ok((vec![g.ho, g.wo, c.filters], Geom::Conv(g), params))
        }
        LayerKind::MaxPool2d { window, stride } => {
            let (h, w, ch) = rank3(single()?)?;
            if *window < 2 {
                return Err(Error::layer(name, format!("pool window must be at least 2, got {window}")));
            }
            let g = PoolGeom::new(h, w, ch, *window, *stride).ok_or_else(|| {
                Error::layer(name, format!("pool window {window} stride {stride} does not fit {h}x{w}"))
            })?;
            Ok((vec![g.ho, g.wo, ch], Geom::Pool(g), Vec::new()))
        }
        LayerKind::BatchNorm { momentum, epsilon } => {
            let s = single()?;
            if !(0.0..1.0).contains(momentum) || *epsilon <= 0.0 {
                return Err(Error::layer(name, "batchnorm needs momentum in [0,1) and epsilon > 0"));
            }
            let ch = *s.last().ok_or_else(|| Error::layer(name, "batchnorm needs a rank >= 1 input"))?;
            let params = vec![
                param(GAMMA, vec![ch], true),
                param(BETA, vec![ch], true),
                param(MOVING_MEAN, vec![ch], false),
                param(MOVING_VARIANCE, vec![ch], false),
                param(MOVING_COUNT, vec![1], false),
            ];
            Ok((s.clone(), Geom::None, params))
        }
        LayerKind::Dropout { rate } => {
            let s = single()?;
            if !(0.0..1.0).contains(rate) {
                return Err(Error::layer(name, format!("dropout rate must be in [0,1), got {rate}")));
            }
            Ok((s.clone(), Geom::None, Vec::new()))
        }
        LayerKind::Flatten => {
            let s = single()?;
            Ok((vec![s.iter().product()], Geom::None, Vec::new()))
        }
        LayerKind::Dense(d) => {
            let s = single()?;
            let &[features] = s.as_slice() else {
                return Err(Error::layer(name, format!("dense expects a flat input, got {s:?}")));
            };
            if d.units == 0 {
                return Err(Error::layer(name, "dense units must be positive"));
            }
            let mut params = vec![param(KERNEL, vec![features, d.units], d.trainable)];
            if d.use_bias {
                params.push(param(BIAS, vec![d.units], d.trainable));
            }
            Ok((vec![d.units], Geom::None, params))
        }
        LayerKind::Concat => {
            if in_shapes.len() < 2 {
                return Err(Error::layer(name, "concat needs at least two inputs"));
            }
            let (h, w, _) = rank3(&in_shapes[0])?;
            let mut channels = 0;
            for s in in_shapes {
                let (sh, sw, sc) = rank3(s)?;
                if (sh, sw) != (h, w) {
                    return Err(Error::shape(name, &[h, w, sc], s));
                }
                channels += sc;
            }
            Ok((vec![h, w, channels], Geom::None, Vec::new()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Conv2dSpec, DenseSpec, Padding};
    use rand::SeedableRng;

    fn small() -> Vec<LayerSpec> {
        vec![
            LayerSpec::new("c1", LayerKind::Conv2d(Conv2dSpec::new(4, 3))),
            LayerSpec::new("p1", LayerKind::MaxPool2d { window: 2, stride: 2 }),
            LayerSpec::new("bn", LayerKind::BatchNorm { momentum: 0.99, epsilon: 1e-3 }),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::new(
                "d",
                LayerKind::Dense(DenseSpec {
                    units: 1,
                    activation: Activation::Sigmoid,
                    use_bias: true,
                    trainable: true,
                }),
            ),
        ]
    }

    #[test]
    fn shapes_are_traced_at_build_time() {
        let net = Network::build(&small(), &[8, 8, 3]).unwrap();
        let shapes = net.layer_shapes();
        assert_eq!(shapes[0].1, vec![8, 8, 4]);
        assert_eq!(shapes[1].1, vec![4, 4, 4]);
        assert_eq!(shapes[3].1, vec![64]);
        assert_eq!(net.output_shape(), &[1]);
        assert_eq!(net.parameter_count(), 3 * 3 * 3 * 4 + 4 + 4 * 4 + 1 + 64 + 1);
    }

    #[test]
    fn mismatches_rejected_when_building() {
        let mut layers = small();
        layers.insert(3, LayerSpec::new("d0", LayerKind::Dense(DenseSpec {
            units: 2,
            activation: Activation::Relu,
            use_bias: true,
            trainable: true,
        })));
        let err = Network::build(&layers, &[8, 8, 3]).unwrap_err();
        assert!(err.to_string().contains("d0"), "{err}");

        let mut layers = small();
        layers[0].kind = LayerKind::Conv2d(Conv2dSpec {
            padding: Padding::Valid,
            kernel_size: 9,
            ..Conv2dSpec::new(4, 9)
        });
        assert!(Network::build(&layers, &[8, 8, 3]).is_err());

        let mut layers = small();
        layers[1].kind = LayerKind::MaxPool2d { window: 1, stride: 1 };
        assert!(Network::build(&layers, &[8, 8, 3]).is_err());

        let layers = vec![LayerSpec::new("x", LayerKind::Dropout { rate: 1.0 })];
        assert!(Network::build(&layers, &[4]).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::build(&small(), &[8, 8, 3]).unwrap();
        let w = net.init_weights(&mut Rng::seed_from_u64(0));
        let x = Tensor::<f32>::zeros(&[2, 8, 8, 2]);
        assert!(matches!(net.predict(&w, &x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn concat_joins_channels() {
        let layers = vec![
            LayerSpec::new("a", LayerKind::Conv2d(Conv2dSpec::new(2, 1))).with_inputs(&["input"]),
            LayerSpec::new("b", LayerKind::Conv2d(Conv2dSpec::new(3, 1))).with_inputs(&["input"]),
            LayerSpec::new("cat", LayerKind::Concat).with_inputs(&["a", "b"]),
        ];
        let net = Network::build(&layers, &[2, 2, 1]).unwrap();
        assert_eq!(net.output_shape(), &[2, 2, 5]);
        let w = net.init_weights(&mut Rng::seed_from_u64(3));
        let x = Tensor::new(vec![1, 2, 2, 1], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let trace = net.forward(&w, &x, Mode::Inference).unwrap();
        let (a, b, cat) = (trace.node_output(0), trace.node_output(1), trace.output());
        for p in 0..4 {
            assert_eq!(&cat.data()[p * 5..p * 5 + 2], &a.data()[p * 2..p * 2 + 2]);
            assert_eq!(&cat.data()[p * 5 + 2..p * 5 + 5], &b.data()[p * 3..p * 3 + 3]);
        }
    }

    #[test]
    fn non_finite_weights_are_named() {
        let net = Network::build(&small(), &[8, 8, 3]).unwrap();
        let mut w = net.init_weights(&mut Rng::seed_from_u64(0));
        w.get_mut("c1/kernel").unwrap().data_mut()[0] = f32::INFINITY;
        let x = Tensor::<f32>::filled(&[1, 8, 8, 3], 1.0);
        match net.predict(&w, &x) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "c1"),
            other => panic!("unexpected {:?}", other.map(|t| t.shape().to_vec())),
        }
    }
}
