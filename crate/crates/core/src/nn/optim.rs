//! RMSprop, the binary cross-entropy loss and a single training step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layer::{sigmoid, Activation, LayerKind};
use super::network::{param_name, Mode, Network, OutputGrad, Trace, MOVING_COUNT, MOVING_MEAN, MOVING_VARIANCE};
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            learning_rate: 1e-4,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// Mean-squared-gradient caches, one per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: RmsProp,
    accumulators: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: RmsProp) -> Self {
        OptimizerState {
            config,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor<T>> {
        self.accumulators.get(name)
    }

    /// `acc = rho*acc + (1-rho)*g^2; w -= lr * g / (sqrt(acc) + eps)` for each
    /// gradient in `grads`. Parameters without a gradient are not touched.
    pub fn apply(&mut self, weights: &mut WeightStore<T>, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let RmsProp {
            learning_rate: lr,
            rho,
            epsilon: eps,
        } = self.config;
        for (name, g) in grads {
            let w = weights.get_mut(name).ok_or_else(|| Error::MissingWeight(name.clone()))?;
            if w.len() != g.len() {
                return Err(Error::shape(name, w.shape(), &[g.len()]));
            }
            let acc = self
                .accumulators
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((wv, av), &gv) in w.data_mut().iter_mut().zip(acc.data_mut()).zip(g) {
                let a = rho * av.to_f64() + (1.0 - rho) * gv * gv;
                *av = T::from_f64(a);
                *wv = T::from_f64(wv.to_f64() - lr * gv / (a.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean binary cross-entropy on a single sigmoid output unit.
    BinaryCrossEntropy,
    /// Mean of `(y - t)^2 / 2`.
    SquaredError,
}

/// Loss value and the gradient to feed into [`Network::backward`].
pub fn loss_and_grad<T: Real>(network: &Network, trace: &Trace<T>, targets: &[f64], loss: Loss) -> Result<(f64, OutputGrad)> {
    let out = trace.output();
    if out.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} targets for {} outputs",
            targets.len(),
            out.len()
        )));
    }
    let n = targets.len() as f64;
    match loss {
        Loss::BinaryCrossEntropy => {
            let sigmoid_head = matches!(
                network.layers().last().map(|l| &l.kind),
                Some(LayerKind::Dense(d)) if d.activation == Activation::Sigmoid
            );
            let logits = trace.final_pre_activation().filter(|_| sigmoid_head).ok_or_else(|| {
                Error::Config("binary cross-entropy needs a dense sigmoid output layer".into())
            })?;
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(logits.len());
            for (&z, &y) in logits.iter().zip(targets) {
                // log(1 + e^z) - y*z, stable for large |z|
                total += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                grad.push((sigmoid(z) - y) / n);
            }
            Ok((total / n, OutputGrad::PreActivation(grad)))
        }
        Loss::SquaredError => {
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(out.len());
            for (v, &y) in out.data().iter().zip(targets) {
                let d = v.to_f64() - y;
                total += 0.5 * d * d;
                grad.push(d / n);
            }
            Ok((total / n, OutputGrad::Output(grad)))
        }
    }
}

/// Folds batch statistics into the running mean and variance.
///
/// The running values are zero-debiased exponential averages: after `t`
/// updates each equals `sum_k m^(t-k) (1-m) b_k / (1 - m^t)`, so the
/// initial values carry no weight once a single batch has been seen.
pub fn apply_batchnorm_updates<T: Real>(weights: &mut WeightStore<T>, trace: &Trace<T>) -> Result<()> {
    for u in &trace.batchnorm_updates {
        let count_name = param_name(&u.layer, MOVING_COUNT);
        let count = weights
            .get_mut(&count_name)
            .ok_or_else(|| Error::MissingWeight(count_name.clone()))?;
        let t = count.data()[0].to_f64().max(0.0).round() + 1.0;
        count.data_mut()[0] = T::from_f64(t);
        let m = u.momentum;
        let before = 1.0 - m.powf(t - 1.0);
        let after = 1.0 - m.powf(t);
        for (param, batch) in [(MOVING_MEAN, &u.batch_mean), (MOVING_VARIANCE, &u.batch_var)] {
            let name = param_name(&u.layer, param);
            let r = weights.get_mut(&name).ok_or_else(|| Error::MissingWeight(name.clone()))?;
            for (r, b) in r.data_mut().iter_mut().zip(batch) {
                *r = T::from_f64((m * before * r.to_f64() + (1.0 - m) * b) / after);
            }
        }
    }
    Ok(())
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Per-sample model outputs of the training forward pass.
    pub predictions: Vec<f64>,
}

/// One RMSprop step on a labelled batch with binary cross-entropy.
///
/// Only trainable parameters move; batchnorm running statistics are updated
/// from the batch; dropout masks come from `rng`.
pub fn train_step(
    network: &Network,
    weights: &mut WeightStore<f32>,
    batch: &Tensor<f32>,
    labels: &[f64],
    opt: &mut OptimizerState<f32>,
    rng: &mut Rng,
) -> Result<StepOutput> {
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config(format!("labels must be 0 or 1, got {bad}")));
    }
    let trace = network.forward(weights, batch, Mode::Train(rng))?;
    let (loss, grad) = loss_and_grad(network, &trace, labels, Loss::BinaryCrossEntropy)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = network.backward(weights, &trace, grad)?;
    opt.apply(weights, &grads)?;
    apply_batchnorm_updates(weights, &trace)?;
    Ok(StepOutput {
        loss,
        predictions: trace.output().to_f64_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Conv2dSpec, DenseSpec, LayerSpec};
    use rand::SeedableRng;

    #[test]
    fn first_step_matches_closed_form() {
        let cfg = RmsProp::default();
        let mut w = WeightStore::<f64>::new();
        w.insert("p/kernel", Tensor::new(vec![1], vec![0.5]).unwrap());
        let mut opt = OptimizerState::new(cfg);
        let g = 0.3;
        let grads = BTreeMap::from([("p/kernel".to_string(), vec![g])]);
        opt.apply(&mut w, &grads).unwrap();
        let expected = 0.5 - cfg.learning_rate * g / (((1.0 - cfg.rho) * g * g).sqrt() + cfg.epsilon);
        assert!((w.get("p/kernel").unwrap().data()[0] - expected).abs() < 1e-15);
        let acc = opt.accumulator("p/kernel").unwrap().data()[0];
        assert!((acc - 0.1 * g * g).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = WeightStore::<f32>::new();
        w.insert("p/kernel", Tensor::new(vec![2], vec![0.25, -4.0]).unwrap());
        let before = w.clone();
        let mut opt = OptimizerState::new(RmsProp::default());
        let grads = BTreeMap::from([("p/kernel".to_string(), vec![0.0, 0.0])]);
        for _ in 0..3 {
            opt.apply(&mut w, &grads).unwrap();
        }
        assert_eq!(w, before);
    }

    fn tiny_net(frozen_conv: bool) -> Network {
        let layers = vec![
            LayerSpec::new(
                "frozen",
                LayerKind::Conv2d(Conv2dSpec {
                    trainable: !frozen_conv,
                    ..Conv2dSpec::new(2, 3)
                }),
            ),
            LayerSpec::new("conv", LayerKind::Conv2d(Conv2dSpec::new(2, 3))),
            LayerSpec::new("bn", LayerKind::BatchNorm { momentum: 0.9, epsilon: 1e-3 }),
            LayerSpec::new("drop", LayerKind::Dropout { rate: 0.3 }),
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::new(
                "out",
                LayerKind::Dense(DenseSpec {
                    units: 1,
                    activation: Activation::Sigmoid,
                    use_bias: true,
                    trainable: true,
                }),
            ),
        ];
        Network::build(&layers, &[6, 6, 3]).unwrap()
    }

    fn batch(rng: &mut Rng) -> (Tensor<f32>, Vec<f64>) {
        use rand::Rng as _;
        let x = Tensor::new(vec![4, 6, 6, 3], (0..4 * 108).map(|_| rng.gen::<f32>()).collect()).unwrap();
        (x, vec![0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn frozen_layer_is_bit_identical_and_others_move() {
        let net = tiny_net(true);
        let mut rng = Rng::seed_from_u64(5);
        let mut w = net.init_weights(&mut rng);
        let frozen = w.get("frozen/kernel").unwrap().clone();
        let before = w.clone();
        let mut opt = OptimizerState::new(RmsProp::default());
        for _ in 0..5 {
            let (x, y) = batch(&mut rng);
            train_step(&net, &mut w, &x, &y, &mut opt, &mut rng).unwrap();
        }
        let after = w.get("frozen/kernel").unwrap();
        assert!(frozen.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(opt.accumulator("frozen/kernel").is_none());
        assert_ne!(w.get("conv/kernel"), before.get("conv/kernel"));
        assert_ne!(w.get("bn/moving_mean"), before.get("bn/moving_mean"));
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let run = || {
            let net = tiny_net(false);
            let mut rng = Rng::seed_from_u64(9);
            let mut w = net.init_weights(&mut rng);
            let mut opt = OptimizerState::new(RmsProp::default());
            for _ in 0..4 {
                let (x, y) = batch(&mut rng);
                train_step(&net, &mut w, &x, &y, &mut opt, &mut rng).unwrap();
            }
            w.to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_binary_labels() {
        let net = tiny_net(false);
        let mut rng = Rng::seed_from_u64(1);
        let mut w = net.init_weights(&mut rng);
        let mut opt = OptimizerState::new(RmsProp::default());
        let (x, _) = batch(&mut rng);
        assert!(train_step(&net, &mut w, &x, &[0.0, 0.5, 1.0, 1.0], &mut opt, &mut rng).is_err());
    }

    #[test]
    fn accumulators_mirror_parameter_shapes() {
        let net = tiny_net(false);
        let mut rng = Rng::seed_from_u64(2);
        let mut w = net.init_weights(&mut rng);
        let mut opt = OptimizerState::new(RmsProp::default());
        let (x, y) = batch(&mut rng);
        train_step(&net, &mut w, &x, &y, &mut opt, &mut rng).unwrap();
        for p in net.trainable_params() {
            let acc = opt.accumulator(&p.name).unwrap();
            assert_eq!(acc.shape(), p.shape.as_slice());
            assert!(acc.data().iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn running_statistics_are_debiased_averages() {
        use crate::nn::network::BatchNormUpdate;
        let net = tiny_net(false);
        let mut rng = Rng::seed_from_u64(4);
        let mut w = net.init_weights(&mut rng).cast::<f64>();
        let (x, _) = batch(&mut rng);
        let mut trace = net.forward(&w, &x.cast::<f64>(), Mode::Inference).unwrap();
        let m = 0.9;
        let batches = [[1.0, -2.0], [3.0, 0.5], [-1.0, 4.0]];
        for (i, b) in batches.iter().enumerate() {
            trace.batchnorm_updates = vec![BatchNormUpdate {
                layer: "bn".into(),
                momentum: m,
                batch_mean: b.to_vec(),
                batch_var: b.iter().map(|v| v * v).collect(),
            }];
            apply_batchnorm_updates(&mut w, &trace).unwrap();
            let t = i + 1;
            let norm: f64 = (0..t).map(|k| m.powi((t - 1 - k) as i32)).sum();
            for c in 0..2 {
                let oracle: f64 = (0..t).map(|k| m.powi((t - 1 - k) as i32) * batches[k][c]).sum::<f64>() / norm;
                let got = w.get("bn/moving_mean").unwrap().data()[c];
                assert!((got - oracle).abs() < 1e-12, "step {t} channel {c}: {got} vs {oracle}");
            }
            assert_eq!(w.get("bn/moving_count").unwrap().data()[0], t as f64);
        }
    }
}
