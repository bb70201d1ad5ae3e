//! Seeded training iterations with early stopping, and trials over them.
//!
//! An iteration is an independent restart: fresh initialization and its own
//! shuffling stream. A trial runs iterations with seeds `base+1 ..= base+n`
//! and keeps the one with the highest best-epoch validation accuracy.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{loss_and_grad, train_step, Loss, Mode, OptimizerState, RmsProp, WeightStore};
use crate::patch::{PatchCorpus, PatchSample};
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_EPOCHS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub optimizer: RmsProp,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            epochs: MAX_EPOCHS,
            batch_size: 32,
            patience: 5,
            optimizer: RmsProp::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::Config(format!("epochs must be in 1..={MAX_EPOCHS}, got {}", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.rho) && o.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid RMSprop settings {o:?}")));
        }
        Ok(())
    }
}

/// Patches stacked into one contiguous `[n, size, size, 3]` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<f64>,
}

impl PatchSet {
    pub fn from_samples(samples: &[PatchSample], size: usize) -> Self {
        let mut pixels = Vec::with_capacity(samples.len() * size * size * 3);
        for s in samples {
            pixels.extend(crate::patch::pixels_to_unit(&s.pixels));
        }
        PatchSet {
            size,
            pixels,
            labels: samples.iter().map(|s| f64::from(s.label)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<f64>) {
        let plen = self.size * self.size * 3;
        let mut data = Vec::with_capacity(indices.len() * plen);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * plen..(i + 1) * plen]);
        }
        let t = Tensor::new(vec![indices.len(), self.size, self.size, 3], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub train: PatchSet,
    pub val: PatchSet,
}

impl TrainingData {
    pub fn from_corpus(corpus: &PatchCorpus) -> Self {
        TrainingData {
            train: PatchSet::from_samples(&corpus.train, corpus.patch_size),
            val: PatchSet::from_samples(&corpus.val, corpus.patch_size),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub elapsed: Duration,
}

/// Stops once validation loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss; true means stop now.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    /// 1-based.
    pub iteration: usize,
    pub seed: u64,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Index into `history` of the first epoch with the highest val accuracy.
    pub best_epoch: usize,
    /// Weights as they were at the end of `best_epoch`.
    pub weights: WeightStore,
    pub duration: Duration,
}

impl TrainRun {
    pub fn best(&self) -> &EpochStats {
        &self.history[self.best_epoch]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbortedRun {
    pub iteration: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Averages {
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrialSummary {
    pub model: String,
    /// Completed runs in iteration order.
    pub runs: Vec<TrainRun>,
    pub aborted: Vec<AbortedRun>,
    /// Means of the per-run best-epoch statistics.
    pub averages: Averages,
    /// Index into `runs`.
    pub best: usize,
}

impl TrialSummary {
    pub fn best_run(&self) -> &TrainRun {
        &self.runs[self.best]
    }
}

/// Mean cross-entropy and accuracy (cutoff 0.5) in inference mode.
pub fn evaluate(model: &Model, weights: &WeightStore, set: &PatchSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Config("cannot evaluate an empty patch set".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk);
        let trace = model.network.forward(weights, &x, Mode::Inference)?;
        let (loss, _) = loss_and_grad(&model.network, &trace, &y, Loss::BinaryCrossEntropy)?;
        loss_sum += loss * chunk.len() as f64;
        correct += count_correct(&trace.output().to_f64_vec(), &y);
    }
    let n = set.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

fn count_correct(predictions: &[f64], labels: &[f64]) -> usize {
    predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p > 0.5) == (**y > 0.5))
        .count()
}

/// Trains one freshly initialized model. A non-finite loss or activation
/// aborts with an error.
pub fn run_iteration<F>(factory: &F, data: &TrainingData, hyper: &HyperParams, iteration: usize, seed: u64) -> Result<TrainRun>
where
    F: Fn(u64) -> Result<(Model, WeightStore)> + ?Sized,
{
    run_iteration_logged(factory, data, hyper, iteration, seed, &mut |_| {})
}

/// [`run_iteration`] with a callback receiving each finished epoch.
pub fn run_iteration_logged<F>(
    factory: &F,
    data: &TrainingData,
    hyper: &HyperParams,
    iteration: usize,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainRun>
where
    F: Fn(u64) -> Result<(Model, WeightStore)> + ?Sized,
{
    hyper.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation sets must both be nonempty".into()));
    }
    let start = Instant::now();
    let (model, mut weights) = factory(seed)?;
    let mut opt = OptimizerState::new(hyper.optimizer);
    let mut dropout_rng = rng::stream(seed, "dropout", 0);
    let mut stopper = EarlyStopping::new(hyper.patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, WeightStore)> = None;
    let mut stopped_early = false;

    for epoch in 1..=hyper.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let (x, y) = data.train.batch(chunk);
            let step = train_step(&model.network, &mut weights, &x, &y, &mut opt, &mut dropout_rng)?;
            loss_sum += step.loss * chunk.len() as f64;
            correct += count_correct(&step.predictions, &y);
        }
        let (val_acc, val_loss) = evaluate(&model, &weights, &data.val, hyper.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        let stats = EpochStats {
            epoch,
            train_acc: correct as f64 / data.train.len() as f64,
            train_loss: loss_sum / data.train.len() as f64,
            val_acc,
            val_loss,
            elapsed: start.elapsed(),
        };
        on_epoch(&stats);
        history.push(stats);
        if best.as_ref().map_or(true, |(_, acc, _)| val_acc > *acc) {
            best = Some((epoch - 1, val_acc, weights.clone()));
        }
        if stopper.observe(val_loss) && epoch < hyper.epochs {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, _, best_weights) = best.expect("at least one epoch ran");
    Ok(TrainRun {
        iteration,
        seed,
        history,
        stopped_early,
        best_epoch,
        weights: best_weights,
        duration: start.elapsed(),
    })
}

/// Index of the first maximum; `None` for an empty slice.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.map_or(true, |b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Summarizes finished and aborted iterations.
pub fn summarize(model: &str, outcomes: Vec<std::result::Result<TrainRun, AbortedRun>>) -> Result<TrialSummary> {
    let total = outcomes.len();
    let mut runs = Vec::new();
    let mut aborted = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(a) => aborted.push(a),
        }
    }
    if runs.is_empty() {
        return Err(Error::AllIterationsAborted(total));
    }
    let n = runs.len() as f64;
    let mean = |f: fn(&EpochStats) -> f64| runs.iter().map(|r| f(r.best())).sum::<f64>() / n;
    let averages = Averages {
        train_acc: mean(|s| s.train_acc),
        train_loss: mean(|s| s.train_loss),
        val_acc: mean(|s| s.val_acc),
        val_loss: mean(|s| s.val_loss),
    };
    let accs: Vec<f64> = runs.iter().map(|r| r.best().val_acc).collect();
    let best = select_best(&accs).expect("nonempty");
    Ok(TrialSummary {
        model: model.to_string(),
        runs,
        aborted,
        averages,
        best,
    })
}

/// Runs iterations `1..=n` with seeds `base_seed + i`, in parallel across
/// iterations. Results do not depend on the thread count.
pub fn run_trial<F>(
    model_name: &str,
    factory: &F,
    data: &TrainingData,
    hyper: &HyperParams,
    n_iterations: usize,
    base_seed: u64,
) -> Result<TrialSummary>
where
    F: Fn(u64) -> Result<(Model, WeightStore)> + Sync,
{
    if n_iterations == 0 {
        return Err(Error::Config("n_iterations must be at least 1".into()));
    }
    hyper.validate()?;
    let outcomes: Vec<_> = (1..=n_iterations)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i as u64;
            run_iteration(factory, data, hyper, i, seed).map_err(|e| AbortedRun {
                iteration: i,
                seed,
                reason: e.to_string(),
            })
        })
        .collect();
    summarize(model_name, outcomes)
}

/// The named layer's parameters from the selected iteration.
pub fn select_donor(trial: &TrialSummary, layer: &str) -> Result<WeightStore> {
    let subset = trial.best_run().weights.layer_subset(layer);
    if subset.is_empty() {
        return Err(Error::Config(format!("no layer `{layer}` in the trained weights")));
    }
    Ok(subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mmv, ModelConfig, DONOR_LAYER};
    use crate::nn::{param_name, save_weights, load_weights};
    use proptest::prelude::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            filters: [4, 4, 8, 8],
            dense_units: 16,
            ..ModelConfig::default()
        }
    }

    /// Two constant-colour classes.
    fn separable(n_per_class: usize, size: usize) -> TrainingData {
        let mk = |offset: usize| {
            let samples: Vec<PatchSample> = (0..2 * n_per_class)
                .map(|i| {
                    let label = (i % 2) as u8;
                    let shade = if label == 1 { 200 } else { 40 } + ((i + offset) % 5) as u8;
                    PatchSample {
                        pixels: vec![shade; size * size * 3],
                        label,
                        image_id: i as u32,
                        row: 0,
                        col: 0,
                    }
                })
                .collect();
            PatchSet::from_samples(&samples, size)
        };
        TrainingData { train: mk(0), val: mk(2) }
    }

    fn factory(seed: u64) -> Result<(Model, WeightStore)> {
        build_mmv(&toy_config(), seed)
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert!(!s.observe(0.5));
        assert!(s.observe(0.6));
        let mut s = EarlyStopping::new(3);
        assert!(!s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(!s.observe(0.9));
        assert!(!s.observe(0.95));
        assert!(!s.observe(0.95));
        assert!(s.observe(0.91));
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        assert_eq!(select_best(&[0.8, 0.93, 0.93]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn separable_task_is_learned_quickly() {
        let data = separable(64, 16);
        let hyper = HyperParams {
            epochs: 5,
            batch_size: 8,
            patience: 5,
            optimizer: RmsProp {
                learning_rate: 1e-3,
                ..RmsProp::default()
            },
        };
        let run = run_iteration(&factory, &data, &hyper, 1, 7).unwrap();
        assert!(run.history.len() <= 5);
        assert_eq!(run.best().val_acc, 1.0, "{:?}", run.history);
        let max = run.history.iter().map(|h| h.val_acc).fold(0.0, f64::max);
        assert_eq!(run.best().val_acc, max);
    }

    #[test]
    fn same_seed_same_history() {
        let data = separable(4, 16);
        let hyper = HyperParams {
            epochs: 2,
            batch_size: 4,
            ..HyperParams::default()
        };
        let strip = |r: &TrainRun| r.history.iter().map(|h| (h.train_loss, h.val_loss, h.val_acc)).collect::<Vec<_>>();
        let a = run_iteration(&factory, &data, &hyper, 1, 3).unwrap();
        let b = run_iteration(&factory, &data, &hyper, 1, 3).unwrap();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn trial_selection_and_donor_export() {
        let data = separable(4, 16);
        let hyper = HyperParams {
            epochs: 2,
            batch_size: 4,
            ..HyperParams::default()
        };
        let t = run_trial("MM-V", &factory, &data, &hyper, 2, 0).unwrap();
        assert_eq!(t.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2]);
        let donor = select_donor(&t, DONOR_LAYER).unwrap();
        let key = param_name(DONOR_LAYER, "kernel");
        assert_eq!(donor.get(&key).unwrap().shape(), &[3, 3, 4, 8]);
        assert!(select_donor(&t, "nope").is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("donor.mmwt");
        save_weights(&donor, &p).unwrap();
        assert_eq!(load_weights(&p).unwrap(), donor);

        let single = run_trial("MM-V", &factory, &data, &hyper, 1, 0).unwrap();
        assert_eq!(single.averages.val_acc, single.runs[0].best().val_acc);
    }

    #[test]
    fn aborted_iterations() {
        let data = separable(2, 16);
        let hyper = HyperParams {
            epochs: 1,
            batch_size: 4,
            ..HyperParams::default()
        };
        let failing = |seed: u64| -> Result<(Model, WeightStore)> {
            let (m, mut w) = factory(seed)?;
            if seed == 1 {
                let k = param_name("V_dense_2", "bias");
                w.get_mut(&k).unwrap().data_mut()[0] = f32::NAN;
            }
            Ok((m, w))
        };
        let t = run_trial("MM-V", &failing, &data, &hyper, 2, 0).unwrap();
        assert_eq!(t.aborted.len(), 1);
        assert_eq!(t.aborted[0].iteration, 1);
        assert_eq!(t.runs.len(), 1);

        let all_fail = |_: u64| -> Result<(Model, WeightStore)> { Err(Error::Config("boom".into())) };
        assert!(matches!(
            run_trial("MM-V", &all_fail, &data, &hyper, 3, 0),
            Err(Error::AllIterationsAborted(3))
        ));
        assert!(HyperParams { epochs: 31, ..HyperParams::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn selection_survives_monotone_rescaling(v in proptest::collection::vec(0.0f64..1.0, 1..20), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let scaled: Vec<f64> = v.iter().map(|x| a * x.powi(3) + b).collect();
            prop_assert_eq!(select_best(&v), select_best(&scaled));
        }

        #[test]
        fn stopping_respects_patience(losses in proptest::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..6) {
            let mut s = EarlyStopping::new(patience);
            for (i, l) in losses.iter().enumerate() {
                if s.observe(*l) {
                    prop_assert!(i + 1 > patience);
                    break;
                }
            }
        }
    }
}
