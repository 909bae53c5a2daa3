//! MSE loss, ADAM, and the training protocol: shuffled mini-batches, a
//! seeded random validation split over days, early stopping that restores
//! the best-validation snapshot.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GriddedField, TargetField};
use crate::nn::{Gradients, Mode, ModelGraph, ParameterStore, Scalar, Shape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 100,
            max_epochs: 1000,
            patience: 30,
            min_delta: 0.0,
            validation_fraction: 0.10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, has_batchnorm: bool) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Input(format!("validation fraction {} outside (0, 1)", self.validation_fraction)));
        }
        if self.batch_size == 0 || (has_batchnorm && self.batch_size < 2) {
            return Err(Error::Input(format!("batch size {} too small", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Input("max epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared error over all batch x location entries and its gradient
/// with respect to the predictions.
pub fn mse_loss<T: Scalar>(pred: &[T], obs: &[T]) -> Result<(f64, Vec<T>)> {
    if pred.len() != obs.len() {
        return Err(Error::Input(format!("prediction has {} values, observation {}", pred.len(), obs.len())));
    }
    if pred.is_empty() {
        return Err(Error::Input("empty loss".into()));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite observation".into()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &o) in pred.iter().zip(obs) {
        let d = p.to_f64_lossy() - o.to_f64_lossy();
        sum += d * d;
        grad.push(T::from_f64_lossy(2.0 * d / n));
    }
    Ok((sum / n, grad))
}

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParameterStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

/// One bias-corrected ADAM update of every trainable tensor.
pub fn adam_step<T: Scalar>(params: &mut ParameterStore<T>, grads: &Gradients<T>, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.values.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::Input("gradient/state layout does not match the parameters".into()));
    }
    for (t, g) in params.tensors.iter().zip(&grads.values) {
        if t.data.len() != g.len() {
            return Err(Error::Input(format!("gradient for {} has the wrong length", t.name)));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {} at element {i}", t.name)));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for ((tensor, g), (m, v)) in params.tensors.iter_mut().zip(&grads.values).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        if !tensor.trainable {
            continue;
        }
        for i in 0..tensor.data.len() {
            let gi = g[i].to_f64_lossy();
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let p = tensor.data[i].to_f64_lossy() - lr * mhat / (vhat.sqrt() + state.eps);
            tensor.data[i] = T::from_f64_lossy(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub train_days: Vec<usize>,
    pub validation_days: Vec<usize>,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|e| e.best)
    }

    /// Tab-separated table, one line per epoch.
    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tbest\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:e}\t{:e}\t{}\n", e.epoch, e.train_loss, e.val_loss, u8::from(e.best)));
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: ModelGraph<f32>,
    pub log: TrainingLog,
}

/// Packs the listed days of a predictor field into a model input batch.
pub fn predictor_batch<T: Scalar>(predictors: &GriddedField, days: &[usize]) -> Tensor<T> {
    let g = predictors.geometry();
    let shape = Shape::grid(predictors.nchannel(), g.nlat(), g.nlon());
    let mut data = Vec::with_capacity(days.len() * shape.numel());
    for &d in days {
        data.extend(predictors.sample(d).iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::from_vec(days.len(), shape, data)
}

fn target_batch(predictand: &TargetField, days: &[usize]) -> Vec<f32> {
    days.iter().flat_map(|&d| predictand.day(d).iter().map(|&v| v as f32)).collect()
}

/// Splits `n` day indices into (train, validation), both sorted.
pub fn split_days(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Consecutive batches of `order`; a trailing single sample is merged into
/// the previous batch when batch-norm needs two samples.
fn batches(order: &[usize], size: usize, min_last: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map(|b| b.len() < min_last).unwrap_or(false) {
        let start = (out.len() - 2) * size;
        out.truncate(out.len() - 2);
        out.push(&order[start..]);
    }
    out
}

/// Eval-mode predictions for the given days, flattened `[day, location]`.
pub fn predict_days<T: Scalar>(model: &ModelGraph<T>, predictors: &GriddedField, days: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in days.chunks(256) {
        let x = predictor_batch::<T>(predictors, chunk);
        let (y, _) = model.forward(&x, Mode::Eval)?;
        out.extend(y.data.iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

/// Downscales every day of `predictors` onto the predictand mask.
pub fn predict<T: Scalar>(model: &ModelGraph<T>, predictors: &GriddedField, mask: &crate::grid::LandMask) -> Result<TargetField> {
    if model.output_shape().numel() != mask.len() {
        return Err(Error::Input(format!(
            "model predicts {} locations, mask has {}",
            model.output_shape().numel(),
            mask.len()
        )));
    }
    let days: Vec<usize> = (0..predictors.ntime()).collect();
    let data = predict_days(model, predictors, &days)?;
    TargetField::new(data, predictors.times().to_vec(), mask.clone())
}

fn eval_loss(model: &ModelGraph<f32>, predictors: &GriddedField, predictand: &TargetField, days: &[usize]) -> Result<f64> {
    let pred = predict_days(model, predictors, days)?;
    let obs: Vec<f64> = days.iter().flat_map(|&d| predictand.day(d).iter().copied()).collect();
    let (loss, _) = mse_loss(&pred, &obs)?;
    Ok(loss)
}

/// Fits `model` on standardized `predictors` and `predictand` and returns
/// the parameters with the lowest validation loss.
pub fn train(mut model: ModelGraph<f32>, predictors: &GriddedField, predictand: &TargetField, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate(model.has_batchnorm())?;
    if predictors.ntime() == 0 || predictand.ntime() == 0 {
        return Err(Error::Input("empty training dataset".into()));
    }
    if predictors.times() != predictand.times() {
        return Err(Error::Input("predictor and predictand time axes differ".into()));
    }
    if predictors.ntime() < 2 {
        return Err(Error::Input("need at least two days to hold out a validation split".into()));
    }
    let g = predictors.geometry();
    let expect = Shape::grid(predictors.nchannel(), g.nlat(), g.nlon());
    if model.input_shape() != expect {
        return Err(Error::Input(format!("model input {} does not match predictors {}", model.input_shape(), expect)));
    }
    if model.output_shape().numel() != predictand.nlocation() {
        return Err(Error::Input("model output size differs from the predictand location count".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_days, val_days) = split_days(predictors.ntime(), config.validation_fraction, &mut rng);
    let min_last = if model.has_batchnorm() { 2 } else { 1 };
    let mut adam = AdamState::new(model.params());
    let mut log = TrainingLog { train_days: train_days.clone(), validation_days: val_days.clone(), ..Default::default() };
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params().clone();
    let mut wait = 0;
    let mut order = train_days.clone();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, chunk) in batches(&order, config.batch_size, min_last).into_iter().enumerate() {
            let x = predictor_batch::<f32>(predictors, chunk);
            let obs = target_batch(predictand, chunk);
            let (y, tape) = model.forward(&x, Mode::Train)?;
            let (loss, grad) = mse_loss(&y.data, &obs)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            weighted += loss * chunk.len() as f64;
            let grads = model.backward_params(&tape, &Tensor::from_vec(y.batch, y.shape, grad))?;
            model.commit_batch_statistics(&tape)?;
            adam_step(model.params_mut(), &grads, &mut adam, config.learning_rate)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        let train_loss = weighted / order.len() as f64;
        let val_loss = eval_loss(&model, predictors, predictand, &val_days)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let improved = val_loss < best_val - config.min_delta;
        if improved {
            best_val = val_loss;
            best_params = model.params().clone();
            wait = 0;
        } else {
            wait += 1;
        }
        log.epochs.push(EpochRecord { epoch, train_loss, val_loss, best: improved });
        if wait >= config.patience.max(1) {
            log.stopped_early = true;
            break;
        }
    }
    model.replace_params(best_params)?;
    Ok(TrainOutcome { model, log })
}
