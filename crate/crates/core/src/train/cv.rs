//! Student-level k-fold cross-validation.

use serde::{Deserialize, Serialize};

use super::metrics::{summarize, Summary};
use super::{evaluate, holdout_split, train, EvalMetrics, TrainConfig, TrainError, TrainReport};
use crate::data::{split_folds, Dataset, StudentSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub test: EvalMetrics,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub auc: Summary,
    pub acc: Summary,
}

/// Seed of fold `fold`, a splitmix64 step away from the global seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    let mut z = seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run_fold(
    cfg: &TrainConfig,
    dataset: &Dataset,
    assignment: &crate::data::FoldSplit,
    fold: usize,
) -> Result<FoldResult, TrainError> {
    let seed = fold_seed(cfg.seed, fold);
    let (test, rest): (Vec<StudentSequence>, Vec<StudentSequence>) = dataset
        .sequences
        .iter()
        .cloned()
        .partition(|s| assignment.fold_of(&s.student_id) == Some(fold));
    let (train_seqs, val_seqs) = holdout_split(&rest, cfg.val_fraction, seed)?;
    let fold_cfg = TrainConfig { seed, ..cfg.clone() };
    let (trained, report) = train(&fold_cfg, &dataset.vocab, &train_seqs, &val_seqs)?;
    let test = evaluate(&trained, &test)?;
    Ok(FoldResult {
        fold,
        seed,
        test,
        report,
    })
}

/// Trains on k−1 folds and scores the held-out fold, for every fold. Folds
/// run on up to `workers` threads; results do not depend on the count.
pub fn cross_validate(cfg: &TrainConfig, dataset: &Dataset, workers: usize) -> Result<CvReport, TrainError> {
    cfg.validate()?;
    let assignment = split_folds(&dataset.student_ids(), cfg.folds, cfg.seed)?;
    let workers = workers.clamp(1, cfg.folds);
    let mut results: Vec<Option<Result<FoldResult, TrainError>>> = (0..cfg.folds).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, slots) in results.chunks_mut(cfg.folds.div_ceil(workers)).enumerate() {
            let assignment = &assignment;
            let base = w * cfg.folds.div_ceil(workers);
            scope.spawn(move || {
                for (i, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(run_fold(cfg, dataset, assignment, base + i));
                }
            });
        }
    });
    let folds = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let aucs = folds
        .iter()
        .map(|f| f.test.auc.ok_or(TrainError::Metric(super::metrics::MetricError::UndefinedAuc)))
        .collect::<Result<Vec<_>, _>>()?;
    let accs: Vec<f64> = folds.iter().map(|f| f.test.acc).collect();
    Ok(CvReport {
        auc: summarize(&aucs),
        acc: summarize(&accs),
        folds,
    })
}
