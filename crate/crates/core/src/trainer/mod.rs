//! Mini-batch training with Adam, early stopping and evaluation.

mod adam;
mod metrics;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{eval_auc, eval_user_aucs, eval_uauc, eval_wuauc, interest_recall_at_k};

use crate::error::{Error, Result};
use crate::model::{mean_abs_cosine, Example, Model, Scored};
use crate::numerics::ParamStore;
use crate::synthdata::{Dataset, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub int_r_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lambda: 0.1, learning_rate: 0.001, batch_size: 256, epochs: 10, patience: 3, seed: 0, int_r_k: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.int_r_k == 0 {
            return Err(Error::InvalidArgument("batch_size, epochs and int_r_k must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Metrics of one split. Metrics that are undefined on the split (a single
/// class, no probe trace) are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub wuauc: Option<f64>,
    pub k: usize,
    /// Mean Int.R@k over all impressions.
    pub int_r: Option<f64>,
    pub int_r_pos: Option<f64>,
    pub int_r_neg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub ortho_term: f64,
    pub val_auc: Option<f64>,
    pub val_uauc: Option<f64>,
    pub val_wuauc: Option<f64>,
    pub int_r_at_50: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,ortho_term,val_auc,val_uauc,val_wuauc,int_r_at_50";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.ortho_term,
            opt(self.val_auc),
            opt(self.val_uauc),
            opt(self.val_wuauc),
            opt(self.int_r_at_50)
        )
    }
}

pub fn write_log_csv(log: &[EpochLog], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for e in log {
        writeln!(w, "{}", e.csv_row())?;
    }
    Ok(())
}

/// A failed run together with the last parameters that were finite.
pub struct TrainFailure {
    pub error: Error,
    pub model: Model<f32>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub skipped_steps: u64,
}

/// Pairs each impression with its behavior history.
pub fn examples<'a>(ds: &'a Dataset, split: &'a [TrainingExample]) -> Result<Vec<Example<'a>>> {
    split
        .iter()
        .map(|e| {
            Ok(Example { user: e.user_id, history: ds.history(e)?, target: e.target_item, label: e.label })
        })
        .collect()
}

/// Scores `split` and computes every metric; Int.R@k uses the first-layer
/// SIDs of the behaviors.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, split: &[TrainingExample], k: usize) -> Result<EvalReport> {
    let ex = examples(ds, split)?;
    let scored = model.score(&ex)?;
    report(model, &ex, &scored, k)
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn report(model: &Model<f32>, ex: &[Example<'_>], scored: &[Scored<f32>], k: usize) -> Result<EvalReport> {
    let scores: Vec<f64> = scored.iter().map(|s| s.p as f64).collect();
    let labels: Vec<u8> = ex.iter().map(|e| e.label).collect();
    let users: Vec<u64> = ex.iter().map(|e| e.user).collect();
    let auc = undefined_to_none(eval_auc(&scores, &labels))?;
    let (uauc, wuauc) = match eval_user_aucs(&scores, &labels, &users) {
        Ok((u, w)) => (Some(u), Some(w)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };

    let feats = model.features();
    let recalls = ex
        .par_iter()
        .zip(scored)
        .filter_map(|(e, s)| s.trace.as_ref().map(|t| (e, t)))
        .map(|(e, t)| {
            let sids = e.history.iter().map(|&i| feats.sid(i)).collect::<Result<Vec<_>>>()?;
            let r = interest_recall_at_k(&t.global_scores, &sids, feats.sid(e.target)?, k)?;
            Ok((e.label, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |want: Option<u8>| -> Vec<f64> {
        recalls.iter().filter(|(l, _)| want.is_none_or(|w| *l == w)).map(|&(_, r)| r).collect()
    };
    Ok(EvalReport {
        n: ex.len(),
        auc,
        uauc,
        wuauc,
        k,
        int_r: mean(&pick(None)),
        int_r_pos: mean(&pick(Some(1))),
        int_r_neg: mean(&pick(Some(0))),
    })
}

/// Mean absolute pairwise cosine between the compressed anchors, averaged
/// over the first `max_users` users with a history.
pub fn mean_anchor_cosine(model: &Model<f32>, ds: &Dataset, max_users: usize) -> Result<f64> {
    let vals = ds
        .users
        .iter()
        .filter(|u| !u.items.is_empty())
        .take(max_users)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|u| Ok(mean_abs_cosine(&model.anchors(u.user_id, &u.items)?)))
        .collect::<Result<Vec<f64>>>()?;
    mean(&vals).ok_or(Error::Empty("users with a history"))
}

/// Training impressions in batch order for one epoch: users shuffled, each
/// user's impressions kept together so their sequence pass is shared.
fn epoch_order(train: &[TrainingExample], seed: u64, epoch: usize) -> Vec<usize> {
    let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, e) in train.iter().enumerate() {
        by_user.entry(e.user_id).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_user.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    groups.shuffle(&mut rng);
    groups.concat()
}

/// Trains `model` on `ds.train`, validating on `ds.val` after each epoch.
/// The parameters of the best validation-AUC epoch are kept. A non-finite
/// loss stops training with [`Error::Diverged`]; use [`train_with`] to keep
/// the last good parameters in that case.
pub fn train(model: Model<f32>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, ds, cfg, |_| {}).map_err(|f| f.error)
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: Model<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    if let Err(e) = cfg.validate() {
        return Err(TrainFailure { error: e, model });
    }
    if ds.train.is_empty() {
        return Err(TrainFailure { error: Error::Empty("training split"), model });
    }
    let train_ex = match examples(ds, &ds.train) {
        Ok(v) => v,
        Err(e) => return Err(TrainFailure { error: e, model }),
    };
    let val_ex = match examples(ds, &ds.val) {
        Ok(v) => v,
        Err(e) => return Err(TrainFailure { error: e, model }),
    };
    let adam = AdamConfig { lr: cfg.learning_rate, ..Default::default() };
    let mut state = AdamState::new(model.params());
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(&ds.train, cfg.seed, epoch);
        let (mut loss_sum, mut ortho_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| train_ex[i]).collect();
            let step = model.joint_loss(&batch, cfg.lambda).and_then(|(stats, grads)| {
                if !stats.loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                let before = model.params().clone();
                adam_step(model.params_mut(), &grads, &mut state, &adam)?;
                if !model.params().all_finite() {
                    *model.params_mut() = before;
                    return Err(Error::Diverged { epoch });
                }
                Ok(stats)
            });
            match step {
                Ok(stats) => {
                    loss_sum += stats.loss * batch.len() as f64;
                    ortho_sum += stats.ortho * batch.len() as f64;
                }
                Err(e) => return Err(TrainFailure { error: e, model }),
            }
        }
        let n = order.len() as f64;
        let val = if val_ex.is_empty() {
            EvalReport::default()
        } else {
            match model.score(&val_ex).and_then(|s| report(&model, &val_ex, &s, cfg.int_r_k)) {
                Ok(r) => r,
                Err(e) => return Err(TrainFailure { error: e, model }),
            }
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            ortho_term: ortho_sum / n,
            val_auc: val.auc,
            val_uauc: val.uauc,
            val_wuauc: val.wuauc,
            int_r_at_50: val.int_r,
        };
        on_epoch(&entry);
        log.push(entry);

        // Without a usable validation AUC every epoch counts as an improvement.
        let score = val.auc.unwrap_or(f64::INFINITY);
        match &best {
            Some((b, _, _)) if score <= *b && score.is_finite() => since_best += 1,
            _ => {
                best = Some((score, epoch, model.params().clone()));
                since_best = 0;
            }
        }
        if since_best >= cfg.patience && cfg.patience > 0 {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome { model, log, best_epoch, skipped_steps: state.skipped })
}
