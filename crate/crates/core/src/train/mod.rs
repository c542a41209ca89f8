//! Training loop, evaluation, cross-validation, checkpoints and analysis.

mod analysis;
mod checkpoint;
mod cv;
pub mod metrics;

pub use analysis::{anomaly_sensitivity, inspect, AnomalyReport, GroupStats, StepRecord};
pub use checkpoint::{blob_path, load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION};
pub use cv::{cross_validate, fold_seed, CvReport, FoldResult};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, AutodiffError, ParamStore, Tape, Tensor};
use crate::data::{window_all, Batch, DataError, QuestionVocab, StudentSequence};
use crate::disambiguator::{Mode, MsdConfig};
use crate::model::{Ablation, KeenKt, ModelConfig, ModelError};
use crate::predictor::{bce_loss, total_loss, BceReduction};
use metrics::{acc, auc, MetricError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("training diverged at epoch {epoch}, step {step}: non-finite value in `{op}`")]
    Divergence { epoch: usize, step: usize, op: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("question index {index} outside the {n_questions}-question vocabulary")]
    Vocabulary { index: usize, n_questions: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no labeled anomalies in the given sequences")]
    NoAnomalies,
    #[error("student `{0}` not found")]
    UnknownStudent(String),
    #[error("{0}")]
    Unsupported(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Hidden width of the feed-forward, denoiser and predictor layers.
    pub hidden: usize,
    pub n_blocks: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Weight of the denoising term.
    pub lambda1: f64,
    /// Weight of the contrastive term.
    pub lambda2: f64,
    pub tau: f64,
    pub gamma: f64,
    pub noise_level: f64,
    pub max_seq_len: usize,
    pub seed: u64,
    pub folds: usize,
    /// Share of training students held out for early stopping.
    pub val_fraction: f64,
    pub bce_reduction: BceReduction,
    pub ablation: Ablation,
    /// Also compute the auxiliary losses during evaluation, with fixed noise.
    pub aux_in_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            hidden: 256,
            n_blocks: 2,
            batch_size: 128,
            lr: 1e-3,
            max_epochs: 200,
            patience: 10,
            lambda1: 0.15,
            lambda2: 0.04,
            tau: 0.07,
            gamma: 0.4,
            noise_level: 0.20,
            max_seq_len: 200,
            seed: 0,
            folds: 5,
            val_fraction: 0.1,
            bce_reduction: BceReduction::Mean,
            ablation: Ablation::default(),
            aux_in_eval: false,
        }
    }
}

fn config_error(field: &'static str, message: impl Into<String>) -> TrainError {
    TrainError::Config {
        field,
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let counts = [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("n_blocks", self.n_blocks),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("folds", self.folds),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(config_error(field, "must be >= 1"));
            }
        }
        if self.max_seq_len < 2 {
            return Err(config_error("max_seq_len", "must be >= 2"));
        }
        if self.patience > self.max_epochs {
            return Err(config_error("patience", "must not exceed max_epochs"));
        }
        let positive = [("lr", self.lr), ("tau", self.tau)];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(field, format!("must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("gamma", self.gamma),
            ("noise_level", self.noise_level),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_error(field, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_error("val_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn msd_config(&self) -> MsdConfig {
        MsdConfig {
            tau: self.tau,
            noise_level: self.noise_level,
            n_blocks: self.n_blocks,
            hidden: self.hidden,
        }
    }

    pub fn model_config(&self, n_questions: usize) -> ModelConfig {
        ModelConfig {
            n_questions,
            dim: self.dim,
            hidden: self.hidden,
            gamma: self.gamma,
            msd: self.msd_config(),
            ablation: self.ablation,
            aux_in_eval: self.aux_in_eval,
        }
    }
}

/// A model together with everything needed to use it on new data.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocab: QuestionVocab,
    pub model: KeenKt,
    pub store: ParamStore,
}

impl TrainedModel {
    /// Fresh, seeded initialization.
    pub fn init(config: &TrainConfig, vocab: &QuestionVocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = KeenKt::new(&mut store, config.model_config(vocab.len()), &mut rng);
        Self {
            config: config.clone(),
            vocab: vocab.clone(),
            model,
            store,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of each loss term; absent terms are `None`.
    pub bce: f64,
    pub mse: Option<f64>,
    pub nce: Option<f64>,
    pub total: f64,
    /// `None` when the validation labels are single-class.
    pub val_auc: Option<f64>,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub best_val_acc: f64,
    pub stopped_early: bool,
}

/// Patience-based early stopping on a higher-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records `metric` for `epoch`; returns whether it is a new best.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Flattened predictions at every scored position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Per-batch auxiliary losses, present only with `aux_in_eval`.
    pub aux_mse: Vec<f64>,
    pub aux_nce: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: Option<f64>,
    pub acc: f64,
    pub n_predictions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_nce: Option<f64>,
}

fn batch_mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Predictions {
    pub fn metrics(&self) -> Result<EvalMetrics, TrainError> {
        let auc = match auc(&self.scores, &self.labels) {
            Ok(v) => Some(v),
            Err(MetricError::UndefinedAuc) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(EvalMetrics {
            auc,
            acc: acc(&self.scores, &self.labels, 0.5)?,
            n_predictions: self.scores.len(),
            aux_mse: batch_mean(&self.aux_mse),
            aux_nce: batch_mean(&self.aux_nce),
        })
    }
}

fn check_vocab(seqs: &[StudentSequence], n_questions: usize) -> Result<(), TrainError> {
    for s in seqs {
        if let Some(&index) = s.questions.iter().find(|&&q| q >= n_questions) {
            return Err(TrainError::Vocabulary { index, n_questions });
        }
    }
    Ok(())
}

/// Runs the model in evaluation mode over windowed `seqs`.
pub fn predict(trained: &TrainedModel, seqs: &[StudentSequence]) -> Result<Predictions, TrainError> {
    check_vocab(seqs, trained.vocab.len())?;
    let windows = window_all(seqs, trained.config.max_seq_len);
    let mut out = Predictions::default();
    // fixed noise keeps optional evaluation-time auxiliary losses deterministic
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(trained.config.batch_size) {
        let refs: Vec<&StudentSequence> = chunk.iter().collect();
        let batch = Batch::from_sequences(&refs);
        let mut tape = Tape::new();
        let fwd = trained.model.forward(&mut tape, &trained.store, &batch, Mode::Eval, &mut rng)?;
        if let Some(v) = fwd.aux_mse {
            out.aux_mse.push(tape.value(v).item());
        }
        if let Some(v) = fwd.aux_nce {
            out.aux_nce.push(tape.value(v).item());
        }
        let y = tape.value(fwd.y_hat).data();
        for (i, m) in batch.target_mask().into_iter().enumerate() {
            if m {
                out.scores.push(y[i]);
                out.labels.push(batch.responses[i]);
            }
        }
    }
    Ok(out)
}

pub fn evaluate(trained: &TrainedModel, seqs: &[StudentSequence]) -> Result<EvalMetrics, TrainError> {
    predict(trained, seqs)?.metrics()
}

fn divergence(e: ModelError, epoch: usize, step: usize) -> TrainError {
    match e {
        ModelError::Autodiff(AutodiffError::NonFinite { op }) => TrainError::Divergence { epoch, step, op },
        other => TrainError::Model(other),
    }
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: Vec<Tensor>) {
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
}

/// Trains with Adam on the multi-task loss, keeping the parameters of the
/// best validation epoch.
pub fn train(
    cfg: &TrainConfig,
    vocab: &QuestionVocab,
    train_seqs: &[StudentSequence],
    val_seqs: &[StudentSequence],
) -> Result<(TrainedModel, TrainReport), TrainError> {
    train_with_progress(cfg, vocab, train_seqs, val_seqs, |_| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    vocab: &QuestionVocab,
    train_seqs: &[StudentSequence],
    val_seqs: &[StudentSequence],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainReport), TrainError> {
    cfg.validate()?;
    let windows = window_all(train_seqs, cfg.max_seq_len);
    if windows.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_seqs.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    check_vocab(&windows, vocab.len())?;
    check_vocab(val_seqs, vocab.len())?;

    let mut trained = TrainedModel::init(cfg, vocab);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &trained.store,
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = snapshot(&trained.store);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut bce_sum, mut mse_sum, mut nce_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut n_batches, mut n_mse, mut n_nce) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let refs: Vec<&StudentSequence> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = Batch::from_sequences(&refs);
            let mut tape = Tape::new();
            let fail = |e: ModelError| divergence(e, epoch, step);
            let fwd = trained
                .model
                .forward(&mut tape, &trained.store, &batch, Mode::Train, &mut noise_rng)
                .map_err(fail)?;
            let bce = bce_loss(&mut tape, fwd.y_hat, &batch.responses, &batch.target_mask(), cfg.bce_reduction)
                .map_err(|e| fail(e.into()))?;
            let total = total_loss(&mut tape, bce, fwd.aux_mse, fwd.aux_nce, cfg.lambda1, cfg.lambda2)
                .map_err(|e| fail(e.into()))?;
            bce_sum += tape.value(bce).item();
            if let Some(m) = fwd.aux_mse {
                mse_sum += tape.value(m).item();
                n_mse += 1;
            }
            if let Some(n) = fwd.aux_nce {
                nce_sum += tape.value(n).item();
                n_nce += 1;
            }
            total_sum += tape.value(total).item();
            n_batches += 1;
            let grads = tape.backward(total)?;
            grads.accumulate_into(&mut trained.store)?;
            adam.step(&mut trained.store)?;
        }
        let val = evaluate(&trained, val_seqs)?;
        let record = EpochRecord {
            epoch,
            bce: bce_sum / n_batches as f64,
            mse: (n_mse > 0).then(|| mse_sum / n_mse as f64),
            nce: (n_nce > 0).then(|| nce_sum / n_nce as f64),
            total: total_sum / n_batches as f64,
            val_auc: val.auc,
            val_acc: val.acc,
        };
        on_epoch(&record);
        // AUC selects the model; single-class validation falls back to accuracy
        if stopper.update(epoch, val.auc.unwrap_or(val.acc)) {
            best = snapshot(&trained.store);
        }
        epochs.push(record);
        if stopper.should_stop() {
            break;
        }
    }
    let stopped_early = stopper.should_stop();
    restore(&mut trained.store, best);
    let best_record = &epochs[stopper.best_epoch() - 1];
    let report = TrainReport {
        best_epoch: stopper.best_epoch(),
        best_val_auc: best_record.val_auc,
        best_val_acc: best_record.val_acc,
        stopped_early,
        epochs,
    };
    Ok((trained, report))
}

/// Splits students into (train, validation) by a seeded shuffle; at least
/// one student lands on each side.
pub fn holdout_split(
    seqs: &[StudentSequence],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<StudentSequence>, Vec<StudentSequence>), TrainError> {
    let mut seen = std::collections::HashSet::new();
    let mut students: Vec<&str> = seqs
        .iter()
        .map(|s| s.student_id.as_str())
        .filter(|id| seen.insert(*id))
        .collect();
    if students.len() < 2 {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    students.shuffle(&mut rng);
    let n_val = ((students.len() as f64 * fraction).round() as usize).clamp(1, students.len() - 1);
    let val_ids: std::collections::HashSet<&str> = students[..n_val].iter().copied().collect();
    let (val, train): (Vec<_>, Vec<_>) = seqs.iter().cloned().partition(|s| val_ids.contains(s.student_id.as_str()));
    Ok((train, val))
}
