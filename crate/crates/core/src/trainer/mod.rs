//! Minibatch training, validation tracking and evaluation.

mod adamw;
mod history;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;

pub use adamw::{AdamW, ADAM_EPS, BETA1, BETA2};
pub use history::{
    history_to_tsv, parse_history, read_history, write_history, EpochRecord, HISTORY_HEADER,
};

use crate::chipdata::{assemble_batch, crop_map, padded_dims, Sample};
use crate::error::{Error, Result};
use crate::metrics::{MapRef, MetricsReport, DEFAULT_THRESHOLD};
use crate::objective::{sigmoid, LossSums, ObjectiveConfig};
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::Scalar;
use crate::segnet::{backward, forward, init_params, ForwardMode, ParameterSet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Accepted for compatibility; training always runs at the parameter
    /// precision.
    pub mixed_precision: bool,
    pub objective: ObjectiveConfig,
    pub unet: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 24,
            epochs: 30,
            seed: 0,
            mixed_precision: false,
            objective: ObjectiveConfig::default(),
            unet: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        self.objective.validate()?;
        self.unet.validate()
    }
}

pub struct TrainOutcome<T> {
    /// Parameters after the epoch with the lowest validation loss.
    pub params: ParameterSet<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Indices grouped by padded size, groups ordered by first appearance.
fn size_groups(order: &[usize], samples: &[Sample], depth: usize) -> Vec<Vec<usize>> {
    let mut slot: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in order {
        let c = &samples[i].chip;
        let key = padded_dims(c.height, c.width, depth);
        let g = *slot.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Batches of at most `batch_size` same-size chips; the last batch of each
/// size group may be partial.
pub fn make_batches(order: &[usize], samples: &[Sample], depth: usize, batch_size: usize) -> Vec<Vec<usize>> {
    size_groups(order, samples, depth)
        .into_iter()
        .flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn check_disjoint(train: &[Sample], val: &[Sample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let ids: HashSet<&str> = train.iter().map(|s| s.chip.chip_id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| ids.contains(s.chip.chip_id.as_str())) {
        return Err(Error::Config(format!(
            "chip {} is in both training and validation sets",
            s.chip.chip_id
        )));
    }
    Ok(())
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch} batch {batch}: {what}")),
        other => other,
    }
}

pub fn train<T: Scalar>(config: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome<T>> {
    train_with_progress(config, train_set, val_set, |_| {})
}

/// Full training run; `progress` sees each record as its epoch finishes.
pub fn train_with_progress<T: Scalar>(
    config: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    check_disjoint(train_set, val_set)?;
    let depth = config.unet.depth;
    let mut params: ParameterSet<T> = init_params(&config.unet, derive_seed(config.seed, &[0]))?;
    let mut opt = AdamW::new(&params, config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParameterSet<T>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let e = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(derive_seed(config.seed, &[1, e])));
        let batches = make_batches(&order, train_set, depth, config.batch_size);
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = assemble_batch::<T>(&refs, depth);
            let seed = derive_seed(config.seed, &[2, e, b as u64]);
            let out = backward(&params, &batch.input, &batch.labels, &batch.valid, &config.objective, seed)
                .map_err(|err| with_context(err, epoch, b + 1))?;
            opt.step(&mut params, &out.grads);
            params.update_running(&out.batch_stats);
            if !params.all_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} batch {}: parameters", b + 1)));
            }
            loss_sum += out.loss.total;
        }
        let train_loss = loss_sum / batches.len() as f64;

        let probs = predict_probs(&params, val_set, config.batch_size)?;
        let val_loss = validation_loss(&probs, val_set, &config.objective)?;
        let report = report_from_probs(&probs, val_set, DEFAULT_THRESHOLD)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            pixel_accuracy: report.pixel_accuracy,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            iou: report.iou,
        };
        progress(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

/// Eval-mode probability maps, cropped to each chip's own size.
pub fn predict_probs<T: Scalar>(params: &ParameterSet<T>, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let depth = params.config().depth;
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); samples.len()];
    for idx in make_batches(&order, samples, depth, batch_size.max(1)) {
        let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = assemble_batch::<T>(&refs, depth);
        let logits = forward(params, &batch.input, ForwardMode::Eval, 0)?;
        for (k, &i) in idx.iter().enumerate() {
            let (h, w) = batch.dims[k];
            let cropped = crop_map(logits.sample(k), logits.w, h, w);
            out[i] = cropped.iter().map(|z| sigmoid(z.as_f64())).collect();
        }
    }
    Ok(out)
}

/// Composite loss pooled over every valid pixel of the split.
pub fn validation_loss(probs: &[Vec<f64>], samples: &[Sample], objective: &ObjectiveConfig) -> Result<f64> {
    let mut sums = LossSums::default();
    for (p, s) in probs.iter().zip(samples) {
        sums.accumulate(p, &s.labels.labels, &s.chip.valid, objective)?;
    }
    Ok(sums.finish(objective)?.total)
}

pub fn report_from_probs(probs: &[Vec<f64>], samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    let maps = probs
        .iter()
        .zip(samples)
        .map(|(p, s)| MapRef::new(p, &s.labels.labels, &s.chip.valid))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::compute(&maps, threshold)
}

/// Eval-mode metrics over all `samples`.
pub fn evaluate<T: Scalar>(params: &ParameterSet<T>, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let probs = predict_probs(params, samples, 24)?;
    report_from_probs(&probs, samples, threshold)
}
