//! Adam training with early stopping on validation AUC: pretext
//! pretraining, fine-tuning, k-fold runs and subjects-per-class sweeps.

mod checkpoint;
mod experiment;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CheckpointMeta, Phase, FORMAT_VERSION, MAGIC};
pub use experiment::{kfold_on_holdouts, kfold_partition, kfold_run, sweep_subjects_per_class, SweepResult, SweepRun};

use crate::data::{slice_windows, Dataset, PretextSample, WindowedSample};
use crate::error::{Error, Result};
use crate::evaluation::{auc, ScoredSet};
use crate::model::{batch_logits_graph, batch_loss_graph, init_params, reinit_output_layer, ModelConfig, ModelParams};
use crate::seed;
use crate::tensor::{Tape, Tensor};

const SEED_INIT: u64 = 0x494E4954;
const SEED_HEAD: u64 = 0x48454144;
const SEED_SHUFFLE: u64 = 0x53485546;
/// Samples per forward pass when scoring.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitFrom {
    Scratch,
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub init_from: InitFrom,
    /// Redraw the output layer after loading a checkpoint.
    pub reinit_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            init_from: InitFrom::Scratch,
            reinit_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max epochs {}", self.patience, self.max_epochs));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
}

/// One bias-corrected Adam update, parameters visited in name order.
/// Moments are kept in `f32`; the correction factors are computed in `f64`.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        match grads.get(name) {
            Some(g) if g.len() == t.len() => {}
            Some(g) => {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient for {name} has {} values, parameter has {}", g.len(), t.len()),
                ))
            }
            None => return Err(Error::MissingGradient(name.clone())),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (config.learning_rate, config.adam_eps);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = (b1 * *mi as f64 + (1.0 - b1) * gi as f64) as f32;
            *vi = (b2 * *vi as f64 + (1.0 - b2) * (gi as f64) * (gi as f64)) as f32;
            let m_hat = *mi as f64 / c1;
            let v_hat = *vi as f64 / c2;
            *w = (*w as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Result of one early-stopped training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub best_val_auc: f64,
    pub test_auc: f64,
    pub epochs_to_best: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
}

/// Borrowed `(windows, label)` view used by the loops below.
pub type Labeled<'a> = (&'a [Tensor], usize);

fn labeled(samples: &[WindowedSample]) -> Vec<Labeled<'_>> {
    samples.iter().map(|s| (s.windows.as_slice(), s.label)).collect()
}

fn pretext_labeled(samples: &[PretextSample]) -> Vec<Labeled<'_>> {
    samples
        .iter()
        .map(|s| (s.sample.windows.as_slice(), s.direction.label()))
        .collect()
}

pub fn window_dataset(dataset: &Dataset, window_len: usize) -> Result<Vec<WindowedSample>> {
    dataset.records().iter().map(|r| slice_windows(r, window_len)).collect()
}

fn check_samples(samples: &[Labeled<'_>], config: &ModelConfig, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Infeasible(format!("{what} set is empty")));
    }
    for (windows, label) in samples {
        if *label >= config.n_classes {
            return Err(Error::InvalidConfig(format!(
                "{what} label {label} but the model has {} classes",
                config.n_classes
            )));
        }
        if let Some(w) = windows.iter().find(|w| w.dims() != [config.components, config.window_len]) {
            return Err(Error::shape(
                "window",
                format!(
                    "{what} window has dims {:?}, model expects [{}, {}]",
                    w.dims(),
                    config.components,
                    config.window_len
                ),
            ));
        }
    }
    Ok(())
}

/// Indices grouped by window count, each group keeping the given order.
fn group_by_steps(samples: &[Labeled<'_>], order: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        groups.entry(samples[i].0.len()).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Probability of class 1 for every sample.
pub fn predict_scores(params: &ModelParams<f32>, config: &ModelConfig, samples: &[Labeled<'_>]) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; samples.len()];
    let order: Vec<usize> = (0..samples.len()).collect();
    for group in group_by_steps(samples, &order) {
        for chunk in group.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let windows: Vec<&[Tensor]> = chunk.iter().map(|&i| samples[i].0).collect();
            let logits = batch_logits_graph(&mut tape, &p, config, &windows)?;
            for (&i, l) in chunk.iter().zip(logits) {
                let probs = tape.softmax(l);
                scores[i] = tape.value(probs)[1] as f64;
            }
        }
    }
    Ok(scores)
}

pub fn evaluate_auc(params: &ModelParams<f32>, config: &ModelConfig, samples: &[Labeled<'_>]) -> Result<f64> {
    let scores = predict_scores(params, config, samples)?;
    let labels = samples.iter().map(|s| (s.1 == 1) as u8).collect();
    auc(&ScoredSet::new(scores, labels)?)
}

/// Mean loss and gradient of the minibatch `batch` (indices into
/// `samples`). Groups with different window
/// counts run as separate graphs and are weighted by their size.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    samples: &[Labeled<'_>],
    batch: &[usize],
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let n = batch.len() as f32;
    let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut loss = 0.0;
    for group in group_by_steps(samples, batch) {
        let w = group.len() as f32 / n;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let items: Vec<Labeled<'_>> = group.iter().map(|&i| samples[i]).collect();
        let (l, _) = batch_loss_graph(&mut tape, &p, config, &items)?;
        tape.backward(l)?;
        loss += w as f64 * tape.value(l)[0] as f64;
        for (name, var) in p.iter() {
            let g = tape.grad(*var).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (a, &gi) in acc.iter_mut().zip(g) {
                *a += w * gi;
            }
        }
    }
    Ok((loss, grads))
}

/// Minibatch Adam from `init`, scoring the validation set after every epoch
/// and keeping the best parameters (strict improvement). Stops after
/// `patience` epochs without improvement or at `max_epochs`.
pub fn train_loop(
    init: ModelParams<f32>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &[Labeled<'_>],
    val: &[Labeled<'_>],
) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(train, model_config, "training")?;
    check_samples(val, model_config, "validation")?;
    init.check_against(model_config)?;

    let mut params = init;
    let mut adam = AdamState::default();
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
            config.seed,
            &[SEED_SHUFFLE, epoch as u64],
        )));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = batch_gradients(&params, model_config, train, batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut adam, config)?;
        }
        let val_auc = evaluate_auc(&params, model_config, val)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("epoch {epoch}: train loss {train_loss:.5}, val AUC {val_auc:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        if val_auc > best_val_auc {
            best_val_auc = val_auc;
            best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        best_val_auc,
    })
}

fn resolve_init(config: &TrainConfig, model_config: &ModelConfig) -> Result<Option<Checkpoint>> {
    match &config.init_from {
        InitFrom::Scratch => Ok(None),
        InitFrom::Checkpoint(path) => {
            let c = Checkpoint::load(path)?;
            c.ensure_config(model_config)?;
            Ok(Some(c))
        }
    }
}

/// Starting parameters for a run: fresh seed-derived weights, or the
/// checkpoint's with (optionally) a freshly drawn output layer.
pub fn initial_params(
    init: Option<&Checkpoint>,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<ModelParams<f32>> {
    let mut params = match init {
        Some(c) => {
            c.ensure_config(model_config)?;
            c.params.clone()
        }
        None => init_params(model_config, seed::derive(config.seed, &[SEED_INIT]))?,
    };
    if init.is_some() && config.reinit_head {
        reinit_output_layer(&mut params, model_config, seed::derive(config.seed, &[SEED_HEAD]));
    }
    Ok(params)
}

fn checkpoint_from(outcome: &TrainOutcome, phase: Phase, config: &TrainConfig, model_config: &ModelConfig) -> Checkpoint {
    Checkpoint {
        config: model_config.clone(),
        params: outcome.params.clone(),
        meta: CheckpointMeta {
            phase,
            epochs_run: outcome.epochs_run(),
            best_epoch: outcome.best_epoch,
            best_val_auc: outcome.best_val_auc,
            seed: config.seed,
            extra: BTreeMap::new(),
        },
    }
}

/// Trains the classifier on direction labels. Starts from scratch unless
/// `init_from` names a checkpoint (loaded as is, head included).
pub fn pretrain(
    train: &[PretextSample],
    val: &[PretextSample],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(Checkpoint, TrainOutcome)> {
    let init = resolve_init(config, model_config)?;
    let params = match &init {
        Some(c) => c.params.clone(),
        None => init_params(model_config, seed::derive(config.seed, &[SEED_INIT]))?,
    };
    let outcome = train_loop(params, model_config, config, &pretext_labeled(train), &pretext_labeled(val))?;
    Ok((checkpoint_from(&outcome, Phase::Pretext, config, model_config), outcome))
}

/// Fine-tunes on class labels and scores the test set with the best
/// validation parameters. Every layer stays trainable.
pub fn finetune(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(FoldResult, Checkpoint)> {
    let init = resolve_init(config, model_config)?;
    let w = model_config.window_len;
    finetune_windowed(
        init.as_ref(),
        &window_dataset(train, w)?,
        &window_dataset(val, w)?,
        &window_dataset(test, w)?,
        config,
        model_config,
        0,
    )
}

/// [`finetune`] on pre-windowed samples with an already loaded checkpoint
/// (`None` trains from scratch, whatever `config.init_from` says).
pub fn finetune_windowed(
    init: Option<&Checkpoint>,
    train: &[WindowedSample],
    val: &[WindowedSample],
    test: &[WindowedSample],
    config: &TrainConfig,
    model_config: &ModelConfig,
    fold: usize,
) -> Result<(FoldResult, Checkpoint)> {
    let test = labeled(test);
    check_samples(&test, model_config, "test")?;
    let params = initial_params(init, config, model_config)?;
    let outcome = train_loop(params, model_config, config, &labeled(train), &labeled(val))?;
    let test_auc = evaluate_auc(&outcome.params, model_config, &test)?;
    let result = FoldResult {
        fold,
        best_val_auc: outcome.best_val_auc,
        test_auc,
        epochs_to_best: outcome.best_epoch,
        epochs_run: outcome.epochs_run(),
        history: outcome.history.clone(),
    };
    Ok((result, checkpoint_from(&outcome, Phase::Finetune, config, model_config)))
}
