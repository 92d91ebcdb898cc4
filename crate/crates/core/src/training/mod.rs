//! Joint optimization: `L = L_label + λ·L_length`, AdamW, a tri-stage
//! learning-rate schedule and fresh text noise every epoch.

pub mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::harness::evaluate;
use crate::io::mix_seed;
use crate::model::{Model, ModelConfig};
use crate::noising::{apply_meta, ConfusionDictionary, NoiseSpec};
use crate::tensor::Graph;
use crate::vocab::Vocab;

pub use optim::{AdamW, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub label_smoothing_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.2504,
            label_smoothing_eps: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be a finite value ≥ 0"));
        }
        if !(0.0..0.5).contains(&self.label_smoothing_eps) {
            return Err(Error::config("loss.label_smoothing_eps", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, a hold at the peak, then exponential decay to
/// `floor_lr`. Stage lengths are in epochs and multiplied by `stage_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub warmup_epochs: usize,
    pub hold_epochs: usize,
    pub decay_epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub stage_scale: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            warmup_epochs: 10,
            hold_epochs: 40,
            decay_epochs: 95,
            peak_lr: 0.00085,
            floor_lr: 0.0000085,
            stage_scale: 1.0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("schedule.peak_lr", "must be a finite value ≥ 0"));
        }
        if !(0.0..=self.peak_lr).contains(&self.floor_lr) {
            return Err(Error::config("schedule.floor_lr", "must lie in [0, peak_lr]"));
        }
        if self.floor_lr == 0.0 && self.peak_lr > 0.0 && self.decay_epochs > 0 {
            return Err(Error::config("schedule.floor_lr", "exponential decay needs a positive floor"));
        }
        if !(self.stage_scale > 0.0 && self.stage_scale.is_finite()) {
            return Err(Error::config("schedule.stage_scale", "must be positive"));
        }
        Ok(())
    }

    /// Scheduled length in epochs.
    pub fn total_epochs(&self) -> f64 {
        (self.warmup_epochs + self.hold_epochs + self.decay_epochs) as f64 * self.stage_scale
    }
}

/// Learning rate at a (possibly fractional) epoch.
pub fn lr_at(epoch: f64, s: &ScheduleSpec) -> f64 {
    let w = s.warmup_epochs as f64 * s.stage_scale;
    let h = s.hold_epochs as f64 * s.stage_scale;
    let d = s.decay_epochs as f64 * s.stage_scale;
    if epoch < w {
        s.peak_lr * epoch.max(0.0) / w
    } else if epoch < w + h {
        s.peak_lr
    } else if epoch < w + h + d {
        s.peak_lr * (s.floor_lr / s.peak_lr).powf((epoch - w - h) / d)
    } else {
        s.floor_lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub loss: LossWeights,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once evaluation EM reaches this value.
    pub stop_at_em: Option<f64>,
    /// Evaluate on at most this many held-out examples per epoch.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            noise: NoiseSpec::default(),
            loss: LossWeights::default(),
            schedule: ScheduleSpec::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 145,
            seed: 0,
            stop_at_em: None,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.noise.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_em: f64,
    pub em_error: f64,
    pub em_clean: f64,
    /// Examples whose CTC target was unreachable in the teacher-forced length.
    pub skipped: usize,
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,lr,train_loss,eval_em,em_on_error_split,em_on_clean_split\n");
    for m in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.lr, m.train_loss, m.eval_em, m.em_error, m.em_clean
        );
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best evaluation EM (the last epoch
    /// when there is no evaluation set).
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochMetrics>,
    pub skipped_labels: usize,
}

/// Vocabulary over every word and parse token in `examples` plus the words of `dict`.
pub fn build_vocab(examples: &[Example], dict: &ConfusionDictionary) -> Vocab {
    let mut words: Vec<&str> = Vec::new();
    for ex in examples {
        words.extend(ex.gold_words.iter().map(String::as_str));
        words.extend(ex.hyp_words.iter().map(String::as_str));
        words.extend(ex.parse.iter().map(String::as_str));
    }
    for (s, r, _) in dict.entries() {
        words.push(s);
        words.push(r);
    }
    Vocab::build(words)
}

/// Trains a model from scratch.
///
/// Each epoch shuffles the training set, re-noises every hypothesis with a
/// generator seeded by `(seed, epoch, example index)`, and takes one
/// optimizer step per batch on the mean joint loss. `eval` (if non-empty) is
/// scored after every epoch with untouched hypotheses.
pub fn train(
    cfg: &TrainConfig,
    vocab: Vocab,
    train_set: &[Example],
    eval_set: &[Example],
    dict: &ConfusionDictionary,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let eval_set = match cfg.eval_limit {
        Some(n) => &eval_set[..n.min(eval_set.len())],
        None => eval_set,
    };
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamStore)> = None;
    let mut skipped_labels = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        let mut skipped = 0;
        let epoch_lr = lr_at(epoch as f64, &cfg.schedule);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = mix_seed(cfg.seed, &[epoch as u64, b as u64]);
            model.params_mut().zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &train_set[i];
                let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.noise.seed, &[cfg.seed, epoch as u64, i as u64]));
                let hyp = apply_meta(&ex.hyp_words, &cfg.noise, dict, &mut noise_rng);
                let g = Graph::training(mix_seed(cfg.seed, &[epoch as u64, i as u64, 1]));
                let terms = model.loss(&g, model.params(), &hyp, &ex.gold_words, &ex.parse, &cfg.loss)?;
                let value = terms.total.item();
                let diverged = |loss| Error::Divergence {
                    epoch,
                    batch_seed,
                    loss,
                };
                if !value.is_finite() {
                    return Err(diverged(value));
                }
                if terms.label_skipped {
                    skipped += 1;
                }
                let grads = match g.backward(terms.total) {
                    Ok(gr) => gr,
                    Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                    Err(e) => return Err(e),
                };
                drop(g);
                loss_sum += value;
                model.params_mut().accumulate(&grads, scale);
            }
            let lr = lr_at(epoch as f64 + b as f64 / batches as f64, &cfg.schedule);
            if !opt.step(model.params_mut(), lr) {
                return Err(Error::Divergence {
                    epoch,
                    batch_seed,
                    loss: f64::NAN,
                });
            }
        }
        if skipped > 0 {
            log::warn!("epoch {epoch}: {skipped} CTC targets unreachable at the teacher-forced length");
        }
        skipped_labels += skipped;

        let report = if eval_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, eval_set)?)
        };
        let m = EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / train_set.len() as f64,
            eval_em: report.as_ref().map_or(f64::NAN, |r| r.em_total),
            em_error: report.as_ref().map_or(f64::NAN, |r| r.em_asr_error),
            em_clean: report.as_ref().map_or(f64::NAN, |r| r.em_no_asr_error),
            skipped,
        };
        log::info!(
            "epoch {epoch}: lr {:.3e} loss {:.4} em {:.4}",
            m.lr,
            m.train_loss,
            m.eval_em
        );
        history.push(m);
        if let Some(r) = &report {
            if best.as_ref().is_none_or(|b| r.em_total > b.0) {
                best = Some((r.em_total, epoch, model.params().clone()));
            }
            if cfg.stop_at_em.is_some_and(|t| r.em_total >= t) {
                break;
            }
        }
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        model.set_params(params)?;
    }
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        skipped_labels,
    })
}
