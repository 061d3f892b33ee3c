use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dialog_loss, LossBreakdown};
use super::metrics::TaskMetrics;
use crate::data::EncodedDialog;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{argmax_rows, Darer};
use crate::tensor::{Adam, AdamConfig, ParamGrads, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// dialogs per optimizer step; gradients are summed over the batch
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// stop after this many epochs without a better dev score; 0 disables
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 100,
            seed: 1,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Classes excluded from scoring, per task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IgnoreLabels {
    pub sentiment: Option<usize>,
    pub act: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub sentiment: TaskMetrics,
    pub act: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub dialogs: usize,
    pub utterances: usize,
    /// mean per dialog
    pub loss: LossBreakdown,
    pub sentiment: TaskMetrics,
    pub act: TaskMetrics,
    /// mean of the two tasks' macro F1, the model-selection score
    pub mean_f1: f64,
    /// metrics of every step's distributions, `t = 0..=T`
    pub per_step: Vec<StepMetrics>,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub dialogs: usize,
    /// mean per dialog
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<TaskMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<TaskMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_dev: Evaluation,
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
}

/// SplitMix64 finalizer over a combined key.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(b.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Evaluation-mode metrics and mean losses over `data`.
pub fn evaluate(model: &Darer, data: &[EncodedDialog], ignore: IgnoreLabels) -> Result<Evaluation> {
    let steps = model.config.steps;
    let mut gold_s = Vec::new();
    let mut gold_a = Vec::new();
    let mut pred_s = vec![Vec::new(); steps + 1];
    let mut pred_a = vec![Vec::new(); steps + 1];
    let mut loss = LossBreakdown::default();
    for d in data {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&model.store);
        let out = model.forward_dialog(&mut tape, &mut ctx, &d.tokens, &d.speakers)?;
        let vars = dialog_loss(&mut tape, &out, &d.sentiments, &d.acts, model.config.gamma_s, model.config.gamma_a)?;
        loss.add(&LossBreakdown::read(&tape, &vars));
        gold_s.extend_from_slice(&d.sentiments);
        gold_a.extend_from_slice(&d.acts);
        for t in 0..=steps {
            pred_s[t].extend(argmax_rows(tape.value(out.p_s[t])));
            pred_a[t].extend(argmax_rows(tape.value(out.p_a[t])));
        }
    }
    let labels = |k: usize, prefix: &str| -> Vec<String> { (0..k).map(|c| format!("{prefix}{c}")).collect() };
    let s_labels = labels(model.config.num_sentiments, "s");
    let a_labels = labels(model.config.num_acts, "a");
    let per_step: Vec<StepMetrics> = (0..=steps)
        .map(|t| StepMetrics {
            step: t,
            sentiment: TaskMetrics::compute(&gold_s, &pred_s[t], &s_labels, ignore.sentiment),
            act: TaskMetrics::compute(&gold_a, &pred_a[t], &a_labels, ignore.act),
        })
        .collect();
    let last = per_step.last().expect("at least one step").clone();
    Ok(Evaluation {
        dialogs: data.len(),
        utterances: gold_s.len(),
        loss: loss.scaled(1.0 / data.len().max(1) as f64),
        mean_f1: (last.sentiment.macro_f1 + last.act.macro_f1) / 2.0,
        sentiment: last.sentiment,
        act: last.act,
        per_step,
    })
}

/// Trains `model` in place and leaves it at the best-on-dev parameters.
///
/// Each epoch visits the training dialogs in a seeded shuffled order. A
/// dialog's dropout stream is seeded from `(seed, epoch, position)`, so runs
/// are reproducible. `log` receives every history record as it is produced.
pub fn train<F>(
    model: &mut Darer,
    train: &[EncodedDialog],
    dev: &[EncodedDialog],
    cfg: &TrainConfig,
    ignore: IgnoreLabels,
    mut log: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty train split".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("empty dev split".into()));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    )?;
    let (gamma_s, gamma_a) = (model.config.gamma_s, model.config.gamma_a);
    let dropout = model.config.dropout;
    let mut history = Vec::new();
    let mut best: Option<(usize, Evaluation, Vec<Tensor>)> = None;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX)));
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = ParamGrads::zeros_like(&model.store);
            for (k, &i) in batch.iter().enumerate() {
                let d = &train[i];
                let position = (b * cfg.batch_size + k) as u64;
                let rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, position));
                let mut tape = Tape::new();
                let mut ctx = Ctx::train(&model.store, dropout, rng);
                let out = model.forward_dialog(&mut tape, &mut ctx, &d.tokens, &d.speakers)?;
                let vars = dialog_loss(&mut tape, &out, &d.sentiments, &d.acts, gamma_s, gamma_a)?;
                let breakdown = LossBreakdown::read(&tape, &vars);
                if !breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        dialog: d.id.clone(),
                    });
                }
                breakdown.check(gamma_s, gamma_a)?;
                epoch_loss.add(&breakdown);
                tape.backward(vars.total)?.accumulate_into(&mut acc);
            }
            if !acc.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    dialog: train[batch[0]].id.clone(),
                });
            }
            adam.step(&mut model.store, &acc);
        }
        let train_record = EpochRecord {
            epoch,
            split: "train".into(),
            dialogs: train.len(),
            loss: epoch_loss.scaled(1.0 / train.len() as f64),
            sentiment: None,
            act: None,
            mean_f1: None,
            best: None,
        };
        log(&train_record)?;
        history.push(train_record);

        let eval = evaluate(model, dev, ignore)?;
        let improved = best.as_ref().map_or(true, |(_, b, _)| eval.mean_f1 > b.mean_f1);
        let dev_record = EpochRecord {
            epoch,
            split: "dev".into(),
            dialogs: dev.len(),
            loss: eval.loss,
            sentiment: Some(eval.sentiment.clone()),
            act: Some(eval.act.clone()),
            mean_f1: Some(eval.mean_f1),
            best: Some(improved),
        };
        log(&dev_record)?;
        history.push(dev_record);
        if improved {
            let snapshot = model.store.iter().map(|(_, _, t)| t.clone()).collect();
            best = Some((epoch, eval, snapshot));
        } else if cfg.patience > 0 {
            let best_epoch = best.as_ref().map_or(0, |b| b.0);
            if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_dev, snapshot) = best.expect("at least one epoch ran");
    let ids: Vec<_> = model.store.ids().collect();
    for (id, value) in ids.into_iter().zip(snapshot) {
        *model.store.get_mut(id) = value;
    }
    Ok(TrainOutcome {
        best_epoch,
        best_dev,
        history,
        epochs_run,
    })
}
