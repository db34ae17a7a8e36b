//! Mini-batch training with a plateau learning-rate scheduler, early stopping,
//! best-validation checkpointing, and per-layer freezing for fine-tuning.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::metrics;
use crate::nn::{adam_step_masked, backward_batch, forward_batch, predict_batch, AdamState, MlpParams};

/// Stream id for the batch-order generator, distinct from parameter initialization.
const SHUFFLE_STREAM: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// Fraction of rows, taken from the end of the (time-ordered) data, held out for validation.
    pub validation_fraction: f64,
    /// Re-initialize the last layer before training instead of warm-starting it.
    #[serde(default)]
    pub reinit_head: bool,
}

impl TrainConfig {
    /// 300 epochs, batch 32, lr 1e-3, halve after 3 stagnant epochs, stop after 5.
    pub fn baseline(seed: u64) -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            initial_lr: 1e-3,
            scheduler_factor: 0.5,
            scheduler_patience: 3,
            early_stop_patience: 5,
            min_lr: 1e-6,
            seed,
            validation_fraction: 0.1,
            reinit_head: false,
        }
    }

    /// Baseline recipe with batch 16 and lr 1e-4.
    pub fn fine_tune(seed: u64) -> Self {
        Self {
            batch_size: 16,
            initial_lr: 1e-4,
            ..Self::baseline(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return fail(format!("scheduler_factor {} not in (0, 1)", self.scheduler_factor));
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return fail("patiences must be >= 1".into());
        }
        if !(self.min_lr > 0.0 && self.initial_lr >= self.min_lr && self.initial_lr.is_finite()) {
            return fail(format!(
                "need 0 < min_lr <= initial_lr, got {} and {}",
                self.min_lr, self.initial_lr
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction {} not in (0, 1)",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

/// Which layers the optimizer may update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(layers: usize) -> Self {
        Self {
            trainable: vec![true; layers],
        }
    }

    pub fn all_frozen(layers: usize) -> Self {
        Self {
            trainable: vec![false; layers],
        }
    }

    /// Every layer frozen except the output layer.
    pub fn head_only(layers: usize) -> Self {
        let mut trainable = vec![false; layers];
        if let Some(last) = trainable.last_mut() {
            *last = true;
        }
        Self { trainable }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Learning rate used during each epoch.
    pub lr_history: Vec<f64>,
    pub train_loss_history: Vec<f64>,
    pub val_loss_history: Vec<f64>,
    pub stopped_early: bool,
    pub train_rows: usize,
    pub validation_rows: usize,
}

/// Reduce-on-plateau: multiply the rate by `factor` once the validation loss
/// has failed to strictly improve on its best value for `patience`
/// consecutive epochs; the count then restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    /// Records one epoch's validation loss and returns the rate for the next epoch.
    pub fn step(&mut self, lr: f64, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stagnant = 0;
            return lr;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            self.stagnant = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Stateless form of [`PlateauScheduler::step`]: `history` holds the earlier
/// validation losses, `val_loss` the newest one.
pub fn scheduler_step(
    current_lr: f64,
    val_loss: f64,
    history: &[f64],
    factor: f64,
    patience: usize,
    min_lr: f64,
) -> f64 {
    let mut sched = PlateauScheduler::new(factor, patience, min_lr);
    for &loss in history {
        // only the improvement/stagnation bookkeeping matters while replaying
        sched.step(current_lr, loss);
    }
    sched.step(current_lr, val_loss).max(min_lr)
}

/// True once the best loss is at least `patience` epochs old.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for (i, &loss) in history.iter().enumerate() {
        if loss < best {
            best = loss;
            best_at = i;
        }
    }
    !history.is_empty() && history.len() - 1 - best_at >= patience
}

fn validation_rows(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Trains `params` on `data` and returns the snapshot with the lowest
/// validation loss. The chronologically last `validation_fraction` of rows is
/// held out; batches are reshuffled every epoch. Layers whose mask entry is
/// `false` come back bit-identical.
pub fn train(
    params: &MlpParams,
    data: &FeatureMatrix,
    config: &TrainConfig,
    mask: &FreezeMask,
) -> Result<(MlpParams, TrainReport)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Config("training data is empty".into()));
    }
    if data.width() != params.input_dim() {
        return Err(Error::Config(format!(
            "data has {} features, network expects {}",
            data.width(),
            params.input_dim()
        )));
    }
    if mask.trainable.len() != params.num_layers() {
        return Err(Error::Config(format!(
            "freeze mask has {} entries for {} layers",
            mask.trainable.len(),
            params.num_layers()
        )));
    }
    if n < config.batch_size || n < 2 {
        return Err(Error::Config(format!(
            "{n} rows is fewer than the batch size {} (or too few to hold out validation rows)",
            config.batch_size
        )));
    }

    let n_val = validation_rows(n, config.validation_fraction);
    let n_train = n - n_val;
    let val_x = data.rows.slice(ndarray::s![n_train.., ..]);
    let val_y = &data.targets[n_train..];

    let mut current = params.clone();
    if config.reinit_head && *mask.trainable.last().unwrap() {
        current.reinit_layer(current.num_layers() - 1, config.seed);
    }
    let mut adam = AdamState::new(&current);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut scheduler = PlateauScheduler::new(config.scheduler_factor, config.scheduler_patience, config.min_lr);

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut lr = config.initial_lr;
    let mut best = (current.clone(), f64::INFINITY, 0usize);
    let mut report = TrainReport {
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        lr_history: Vec::new(),
        train_loss_history: Vec::new(),
        val_loss_history: Vec::new(),
        stopped_early: false,
        train_rows: n_train,
        validation_rows: n_val,
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = data.rows.select(Axis(0), batch);
            let yb: Vec<f64> = batch.iter().map(|&i| data.targets[i]).collect();
            let cache = forward_batch(&current, xb.view())?;
            let (grads, loss) = backward_batch(&current, &cache, &yb, &mask.trainable)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    message: "training loss is not finite".into(),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam_step_masked(&mut current, &grads, &mut adam, lr, &mask.trainable).map_err(|e| {
                Error::NonFiniteLoss {
                    epoch,
                    message: e.to_string(),
                }
            })?;
        }
        let val_loss = metrics::mae(val_y, &predict_batch(&current, val_x)?)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                message: "validation loss is not finite".into(),
            });
        }
        report.lr_history.push(lr);
        report.train_loss_history.push(loss_sum / n_train as f64);
        report.val_loss_history.push(val_loss);
        if val_loss < best.1 {
            best = (current.clone(), val_loss, epoch);
        }
        log::debug!("epoch {epoch}: train {:.6} val {val_loss:.6} lr {lr:e}", loss_sum / n_train as f64);

        if early_stop(&report.val_loss_history, config.early_stop_patience) {
            report.stopped_early = epoch < config.epochs;
            break;
        }
        lr = scheduler.step(lr, val_loss);
    }

    let (best_params, best_loss, best_epoch) = best;
    report.best_epoch = best_epoch;
    report.best_val_loss = best_loss;
    Ok((best_params, report))
}

/// Retrains only the output layer of `pretrained` on `noon_data`.
pub fn fine_tune(
    pretrained: &MlpParams,
    noon_data: &FeatureMatrix,
    config: &TrainConfig,
) -> Result<(MlpParams, TrainReport)> {
    if noon_data.is_empty() {
        return Err(Error::Config("fine-tuning data is empty".into()));
    }
    train(
        pretrained,
        noon_data,
        config,
        &FreezeMask::head_only(pretrained.num_layers()),
    )
}
