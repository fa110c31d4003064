//! Freeze-and-train loop: the encoder stays frozen while adapters and
//! decoder train under AdamW with a per-epoch cosine learning-rate decay,
//! minimizing a weighted BCE + dice loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{make_batches, Sample};
use crate::decoder::{predict_mask, LogitMap};
use crate::error::{TensorError, TrainError};
use crate::metrics::{compute_metrics, ConfusionCounts, MetricsReport};
use crate::model::ModelAssembly;
use crate::nn::NamedParams;
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate (cosine-decayed to zero).
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
    pub loss_bce_weight: f64,
    pub loss_dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr0: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 0,
            loss_bce_weight: 1.0,
            loss_dice_weight: 1.0,
            dice_smooth: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
        }
        // NaN must fail too, so compare in the rejecting direction.
        if self.lr0 <= 0.0 || self.lr0.is_nan() {
            return Err(TrainError::InvalidConfig(format!(
                "initial learning rate {} must be positive",
                self.lr0
            )));
        }
        if self.loss_bce_weight < 0.0 || self.loss_dice_weight < 0.0 {
            return Err(TrainError::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.loss_bce_weight == 0.0 && self.loss_dice_weight == 0.0 {
            return Err(TrainError::InvalidConfig(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Freezes the encoder (blocks, patch and positional embeddings) and marks
/// every adapter and decoder parameter trainable. Idempotent.
pub fn apply_freeze_policy(model: &ModelAssembly) {
    for (_, p) in model.encoder_params() {
        p.set_requires_grad(false);
    }
    for (_, p) in model.adapter_params() {
        p.set_requires_grad(true);
    }
    for (_, p) in model.decoder_params() {
        p.set_requires_grad(true);
    }
}

/// `w_bce·BCE(σ(logits), target) + w_dice·(1 − dice)` with mean-reduced BCE
/// and a smoothed batch-global soft dice coefficient.
pub fn bce_dice_loss(
    logits: &LogitMap,
    target: &Tensor,
    config: &TrainConfig,
) -> Result<Tensor, TensorError> {
    let (b, h, w) = (logits.batch(), logits.height(), logits.width());
    if target.shape() != [b, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "bce_dice_loss",
            lhs: logits.data.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let flat = logits.data.reshape(&[b, h, w])?;
    let bce = flat.bce_with_logits(target)?.mean();

    let p = flat.sigmoid();
    let s = config.dice_smooth;
    let numer = p.mul(target)?.sum().mul_scalar(2.0).add_scalar(s);
    let denom = p.sum().add(&target.sum())?.add_scalar(s);
    let dice = numer.div(&denom)?;
    let dice_loss = dice.mul_scalar(-1.0).add_scalar(1.0);

    bce.mul_scalar(config.loss_bce_weight)
        .add(&dice_loss.mul_scalar(config.loss_dice_weight))
}

/// Per-epoch cosine decay: `lr = lr0 · ½(1 + cos(π · epoch/epochs))`.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> f64 {
    debug_assert!(epoch <= config.epochs);
    let progress = epoch as f64 / config.epochs as f64;
    config.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Decoupled-weight-decay Adam with bias-corrected moments. Moment buffers
/// are indexed by parameter position, so the same parameter list (same
/// order) must be passed to every step.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps_opt,
            weight_decay: config.weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// One update over the trainable parameters; parameters without a grad
    /// (e.g. a buffer that did not participate this step) are skipped except
    /// for decay-free bookkeeping of their moment slot.
    pub fn step(&mut self, params: &NamedParams<f64>, lr: f64) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "optimizer state does not match parameter list"
        );
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for ((_, param), (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            debug_assert!(param.requires_grad(), "frozen parameter passed to optimizer");
            let grad = match param.grad() {
                Some(g) => g,
                None => vec![0.0; param.numel()],
            };
            param.update_values(|values| {
                for i in 0..values.len() {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    values[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps)
                        + self.weight_decay * values[i]);
                }
            });
        }
    }

    pub fn zero_grads(params: &NamedParams<f64>) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,P,REC,F1,OA,MIoU,Landslide-IoU";

    pub fn csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val.csv_row()
            ));
        }
        out
    }

    pub fn final_val(&self) -> Option<&MetricsReport> {
        self.records.last().map(|r| &r.val)
    }
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    pub optimizer: AdamW,
    /// Data-order RNG state at the end of the run, for checkpointing.
    pub rng: ChaCha20Rng,
}

/// Runs the fixed-epoch training budget. The caller must have applied the
/// freeze policy; every step updates exactly the trainable parameters.
/// Fully deterministic for a fixed config and seed.
pub fn train(
    model: &ModelAssembly,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let params = model.trainable_params();
    let mut optimizer = AdamW::new(config);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory::default();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config);
        order.shuffle(&mut rng);
        let shuffled: Vec<Sample> = order
            .iter()
            .map(|&i| Sample {
                id: train_set[i].id.clone(),
                image: train_set[i].image.clone(),
                mask: train_set[i].mask.clone(),
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for batch in make_batches(&shuffled, config.batch_size) {
            let logits = model.forward(&batch.images)?;
            let loss = bce_dice_loss(&logits, &batch.masks, config)?;
            loss_sum += loss.item();
            loss.backward()?;
            optimizer.step(&params, lr);
            AdamW::zero_grads(&params);
            batch_count += 1;
        }

        let val = evaluate(model, val_set, config.batch_size, 0.5)?;
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batch_count as f64,
            val,
        });
    }
    Ok(TrainOutcome {
        history,
        optimizer,
        rng,
    })
}

/// Deterministic metrics of thresholded predictions over a sample set.
pub fn evaluate(
    model: &ModelAssembly,
    samples: &[Sample],
    batch_size: usize,
    threshold: f64,
) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut counts = ConfusionCounts::default();
    for batch in make_batches(samples, batch_size) {
        let logits = model.forward(&batch.images)?;
        let pred = predict_mask(&logits, threshold)?;
        counts.accumulate(&pred, &batch.masks)?;
    }
    Ok(compute_metrics(&counts)?)
}

/// Exact parameter accounting by trainable flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
}

impl ParamReport {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

pub fn count_params(model: &ModelAssembly) -> ParamReport {
    let mut total = 0;
    let mut trainable = 0;
    for (_, p) in model.named_params() {
        total += p.numel();
        if p.requires_grad() {
            trainable += p.numel();
        }
    }
    ParamReport { total, trainable }
}
