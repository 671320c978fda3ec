//! Full-batch semi-supervised training with Adam and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{argmax_rows, f1_scores_with_classes};
use crate::model::{GraphInput, Model, ModelError};
use crate::tensor::{adam_step, Matrix, ParamStore, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class {class} has {count} labeled nodes; at least 3 are needed")]
    ClassTooSmall { class: usize, count: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_ratio: f64,
    /// Defaults to half of the remainder.
    #[serde(default)]
    pub val_ratio: Option<f64>,
    #[serde(default)]
    pub test_ratio: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_ratio: f64, seed: u64) -> Self {
        Self {
            train_ratio,
            val_ratio: None,
            test_ratio: None,
            seed,
        }
    }

    /// `(train, val, test)` ratios after filling in defaults.
    pub fn resolved(&self) -> Result<(f64, f64, f64), TrainError> {
        let tr = self.train_ratio;
        let rest = 1.0 - tr;
        let (va, te) = match (self.val_ratio, self.test_ratio) {
            (None, None) => (rest / 2.0, rest / 2.0),
            (Some(v), None) => (v, rest - v),
            (None, Some(t)) => (rest - t, t),
            (Some(v), Some(t)) => (v, t),
        };
        let ok = |r: f64| r > 0.0 && r < 1.0;
        if !(ok(tr) && ok(va) && ok(te)) || tr + va + te > 1.0 + 1e-12 {
            return Err(TrainError::InvalidSplit(format!(
                "ratios ({tr}, {va}, {te}) must be in (0, 1) and sum to at most 1"
            )));
        }
        Ok((tr, va, te))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified, seed-deterministic split of the labeled nodes.
///
/// Each class contributes at least one node to every part.
pub fn make_splits(labels: &[Option<usize>], spec: &SplitSpec) -> Result<Splits, TrainError> {
    let (tr, va, te) = spec.resolved()?;
    let num_classes = labels.iter().flatten().max().map_or(0, |c| c + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            by_class[*c].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Splits::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        if n < 3 {
            return Err(TrainError::ClassTooSmall { class, count: n });
        }
        members.shuffle(&mut rng);
        let used = ((tr + va + te) * n as f64).round().clamp(3.0, n as f64) as usize;
        let n_train = ((tr * n as f64).round() as usize).clamp(1, used - 2);
        let rest = used - n_train;
        let n_val = ((va / (va + te) * rest as f64).round() as usize).clamp(1, rest - 1);
        out.train.extend_from_slice(&members[..n_train]);
        out.val.extend_from_slice(&members[n_train..n_train + n_val]);
        out.test.extend_from_slice(&members[n_train + n_val..used]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            lr: 0.001,
            patience: 10,
            min_delta: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.min_delta.is_nan() || self.min_delta < 0.0 {
            return bad("eps must be positive and min_delta non-negative");
        }
        Ok(())
    }
}

/// Patience counter over validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    left: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            left: patience,
        }
    }

    /// Records one validation loss. An improvement is a decrease by more than `min_delta`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = self.best_epoch.is_none() || val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.left = self.patience;
        } else {
            self.left = self.left.saturating_sub(1);
        }
        StopDecision {
            improved,
            stop: self.left == 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn patience_left(&self) -> usize {
        self.left
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean cross-entropy of `logits` rows `idx` against `labels`.
pub fn cross_entropy(logits: &Matrix, idx: &[usize], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / idx.len() as f64
}

fn labels_dense(labels: &[Option<usize>], splits: &Splits) -> Result<Vec<usize>, TrainError> {
    let mut dense = vec![0; labels.len()];
    for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        dense[i] = labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| TrainError::InvalidSplit(format!("node {i} in a split has no label")))?;
    }
    Ok(dense)
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    input: &GraphInput,
    labels: &[Option<usize>],
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(TrainError::InvalidSplit("train and val must be non-empty".into()));
    }
    if labels.len() != input.num_nodes() {
        return Err(TrainError::InvalidSplit(format!(
            "{} labels for {} nodes",
            labels.len(),
            input.num_nodes()
        )));
    }
    let dense = labels_dense(labels, splits)?;
    let num_classes = model.config().num_classes;
    let targets: Vec<(usize, usize)> = splits.train.iter().map(|&i| (i, dense[i])).collect();
    let val_truth: Vec<usize> = splits.val.iter().map(|&i| dense[i]).collect();
    let use_dropout = model.config().dropout > 0.0;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x5eed_d409);

    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best: ParamStore = model.params().clone();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let non_finite = |e: TensorError| TrainError::NonFiniteLoss {
            epoch,
            detail: e.to_string(),
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let bi = input.bind(&mut tape);
        let out = model
            .forward(
                &mut tape,
                &bound,
                input,
                &bi,
                use_dropout.then_some(&mut dropout_rng),
            )
            .map_err(|e| match e {
                ModelError::Tensor(te @ TensorError::NonFinite { .. }) => non_finite(te),
                other => other.into(),
            })?;
        let loss = tape
            .cross_entropy_logits(out.logits, targets.clone())
            .map_err(non_finite)?;
        let train_loss = tape.value(loss).get(0, 0);
        if !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                detail: format!("train loss {train_loss}"),
            });
        }

        // validation uses the parameters that produced this epoch's forward pass
        let (val_logits, beta) = if use_dropout {
            let inf = model.infer(input)?;
            (inf.logits, inf.beta)
        } else {
            (
                tape.value(out.logits).clone(),
                out.beta.map(|b| tape.value(b).data().to_vec()),
            )
        };
        let val_loss = cross_entropy(&val_logits, &splits.val, &dense);
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        let preds = argmax_rows(&val_logits);
        let val_pred: Vec<usize> = splits.val.iter().map(|&i| preds[i]).collect();
        let (val_macro_f1, _) = f1_scores_with_classes(&val_pred, &val_truth, num_classes)
            .expect("equal lengths by construction");

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_macro_f1,
            beta,
        };
        on_epoch(&record);
        history.push(record);

        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = model.params().clone();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }

        tape.backward(loss).map_err(non_finite)?;
        model.collect_grads(&tape, &bound);
        let t = epoch as u64;
        adam_step(
            model.params_mut().as_mut_slice(),
            cfg.lr,
            (cfg.beta1, cfg.beta2),
            cfg.eps,
            t,
        )
        .map_err(non_finite)?;
    }

    model.params_mut().copy_values_from(&best);
    Ok(TrainOutcome {
        epochs_run: history.len(),
        best_epoch: stopper.best_epoch().unwrap_or(1),
        best_val_loss: stopper.best(),
        history,
        stopped_early,
    })
}
