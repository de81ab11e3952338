//! MSE objective, Adam, and the epoch loop.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::OpCounter;
use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::data::{Window, WindowSet};
use crate::error::{Error, Result};
use crate::model::ForecasterModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total.
    pub max_iters: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    /// Global L2 norm cap on the gradient.
    pub grad_clip: Option<f64>,
    /// Learning-rate multiplier applied after each epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 6,
            max_iters: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: Some(3),
            grad_clip: None,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Mean of squared differences over every element.
pub fn mse_loss<'g>(pred: &Var<'g>, target: &Var<'g>) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", &pred.shape(), &target.shape()));
    }
    let diff = pred.sub(target)?;
    diff.mul(&diff)?.mean()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for p in store.iter_mut() {
        if !p.grad.is_finite() {
            return Err(Error::Contract(format!("gradient for `{}` is missing or non-finite", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::Contract(format!("optimizer state shape mismatch for `{}`", p.name)));
        }
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (((w, g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Forward and backward for one window, accumulating into the store grads.
pub fn accumulate_window(model: &mut ForecasterModel, w: &Window, weight: f64) -> Result<f64> {
    let g = Graph::new();
    let pred = model.forward(&g, &w.input, &mut OpCounter::new())?;
    let loss = mse_loss(&pred, &g.constant(w.target.clone()))?;
    let value = loss.value().item();
    g.backward(loss.scale(weight)?)?;
    g.accumulate_into(&mut model.params);
    Ok(value)
}

/// Zeroes grads, averages the batch loss gradient, and applies Adam.
pub fn train_step(
    model: &mut ForecasterModel,
    batch: &[&Window],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    model.params.zero_grads();
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for w in batch {
        loss += accumulate_window(model, w, weight)? * weight;
    }
    if let Some(c) = cfg.grad_clip {
        clip_gradients(&mut model.params, c);
    }
    adam_step(&mut model.params, state, cfg, lr)?;
    Ok(loss)
}

/// Mean per-window MSE.
pub fn evaluate(model: &ForecasterModel, set: &WindowSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", set.split)));
    }
    let mut total = 0.0;
    for w in &set.windows {
        let pred = model.predict(&w.input)?;
        let sq: f64 = pred
            .data()
            .iter()
            .zip(w.target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        total += sq / pred.numel() as f64;
    }
    Ok(total / set.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub iterations: usize,
    pub best_score: Option<f64>,
    pub adam: AdamState,
}

pub fn train(
    model: &mut ForecasterModel,
    train_set: &WindowSet,
    val_set: Option<&WindowSet>,
    cfg: &TrainConfig,
    best_checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    let adam = AdamState::new(&model.params);
    train_resume(model, adam, train_set, val_set, cfg, best_checkpoint)
}

/// Like [`train`], continuing from an existing optimizer state.
pub fn train_resume(
    model: &mut ForecasterModel,
    mut adam: AdamState,
    train_set: &WindowSet,
    val_set: Option<&WindowSet>,
    cfg: &TrainConfig,
    best_checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        iterations: 0,
        best_score: None,
        adam: adam.clone(),
    };
    if cfg.epochs == 0 || cfg.max_iters == Some(0) {
        return Ok(outcome);
    }
    if train_set.is_empty() {
        return Err(Error::Data("train split has no windows".into()));
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut stale = 0;
    let mut iterations = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train_set.windows[i]).collect();
            let loss = train_step(model, &batch, &mut adam, cfg, lr)?;
            sum += loss;
            batches += 1;
            iterations += 1;
            debug!("epoch {epoch} iter {iterations} loss {loss:.6}");
            if cfg.max_iters.is_some_and(|m| iterations >= m) {
                break;
            }
        }
        let train_mse = sum / batches as f64;
        let val_mse = val_set.map(|v| evaluate(model, v)).transpose()?;
        info!(
            "epoch {epoch}: train_mse={train_mse:.6} val_mse={}",
            val_mse.map_or("n/a".to_string(), |v| format!("{v:.6}"))
        );
        outcome.history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });

        let score = val_mse.unwrap_or(train_mse);
        if outcome.best_score.is_none_or(|b| score < b) {
            outcome.best_score = Some(score);
            stale = 0;
            if let Some(path) = best_checkpoint {
                save_training_checkpoint(path, model, Some(&adam))?;
            }
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                info!("early stop after epoch {epoch}");
                break 'epochs;
            }
        }
        if cfg.max_iters.is_some_and(|m| iterations >= m) {
            break;
        }
        lr *= cfg.lr_decay;
    }
    outcome.iterations = iterations;
    outcome.adam = adam;
    Ok(outcome)
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mse", "val_mse"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_mse.to_string(),
            r.val_mse.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const ADAM_STEP: &str = "adam.step";

/// Model parameters plus, optionally, the optimizer moments.
pub fn save_training_checkpoint(path: &Path, model: &ForecasterModel, adam: Option<&AdamState>) -> Result<()> {
    let mut tensors = checkpoint::store_tensors(&model.params);
    if let Some(a) = adam {
        tensors.push((ADAM_STEP.into(), Tensor::new(&[1], vec![a.step as f64])?));
        for ((_, p), (m, v)) in model.params.iter().zip(a.m.iter().zip(&a.v)) {
            tensors.push((format!("adam.m.{}", p.name), m.clone()));
            tensors.push((format!("adam.v.{}", p.name), v.clone()));
        }
    }
    checkpoint::save(path, &tensors)
}

/// Restores parameters; returns the optimizer state if the file has one.
pub fn load_training_checkpoint(path: &Path, model: &mut ForecasterModel) -> Result<Option<AdamState>> {
    let rest = checkpoint::restore_store(&mut model.params, checkpoint::load(path)?)?;
    let Some((_, step)) = rest.iter().find(|(n, _)| n == ADAM_STEP) else {
        return Ok(None);
    };
    let step = step.data()[0] as u64;
    let lookup = |prefix: &str, name: &str| -> Result<Tensor> {
        let key = format!("{prefix}.{name}");
        rest.iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Data(format!("checkpoint is missing `{key}`")))
    };
    let mut m = Vec::with_capacity(model.params.len());
    let mut v = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        m.push(lookup("adam.m", &p.name)?);
        v.push(lookup("adam.v", &p.name)?);
    }
    Ok(Some(AdamState { step, m, v }))
}
