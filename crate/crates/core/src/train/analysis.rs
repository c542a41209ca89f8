//! Post-training analysis: anomaly sensitivity and per-step state dumps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainError, TrainedModel};
use crate::autodiff::Tape;
use crate::data::{window_all, Anomaly, Batch, StudentSequence};
use crate::disambiguator::Mode;

/// Offsets (in steps) of the prediction trajectory reported around anomalies.
pub const TRAJECTORY_SPAN: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    /// Mean L1 norm of the predictor-facing variance.
    pub mean_sigma_l1: f64,
    pub mean_kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    /// Labeled steps with a following position, i.e. the steps scored here.
    pub total_steps: usize,
    pub clean: GroupStats,
    pub slip: GroupStats,
    pub guess: GroupStats,
    /// Mean predicted probability at offsets `-2..=2` around each slip / guess.
    pub slip_trajectory: BTreeMap<i64, f64>,
    pub guess_trajectory: BTreeMap<i64, f64>,
}

#[derive(Default)]
struct Acc {
    count: usize,
    sigma: f64,
    kappa: f64,
}

impl Acc {
    fn stats(&self) -> GroupStats {
        let n = self.count.max(1) as f64;
        GroupStats {
            count: self.count,
            mean_sigma_l1: self.sigma / n,
            mean_kappa: self.kappa / n,
        }
    }
}

fn mean_by_offset(sums: BTreeMap<i64, (f64, usize)>) -> BTreeMap<i64, f64> {
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Compares the variance and confidence the model carries right after an
/// anomalous response with those after clean responses.
///
/// The state after observing step `t` is read at position `t + 1`, the first
/// position whose keys include interaction `t`; the last step of each window
/// has no such position and is skipped.
pub fn anomaly_sensitivity(
    trained: &TrainedModel,
    seqs: &[StudentSequence],
) -> Result<AnomalyReport, TrainError> {
    let has_anomaly = seqs
        .iter()
        .flat_map(|s| &s.anomalies)
        .any(|a| matches!(a, Some(Anomaly::Slip | Anomaly::Guess)));
    if !has_anomaly {
        return Err(TrainError::NoAnomalies);
    }
    super::check_vocab(seqs, trained.vocab.len())?;
    let windows = window_all(seqs, trained.config.max_seq_len);
    let dim = trained.config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut clean, mut slip, mut guess) = (Acc::default(), Acc::default(), Acc::default());
    let mut slip_traj: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    let mut guess_traj: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for chunk in windows.chunks(trained.config.batch_size) {
        let refs: Vec<&StudentSequence> = chunk.iter().collect();
        let batch = Batch::from_sequences(&refs);
        let mut tape = Tape::new();
        let fwd = trained.model.forward(&mut tape, &trained.store, &batch, Mode::Eval, &mut rng)?;
        let sigma = tape.value(fwd.sigma).data();
        let kappa = tape.value(fwd.kappa).data();
        let y_hat = tape.value(fwd.y_hat).data();
        for (b, seq) in chunk.iter().enumerate() {
            let row = b * batch.len;
            for t in 0..seq.len().saturating_sub(1) {
                let Some(label) = seq.anomalies[t] else { continue };
                let pos = row + t + 1;
                let l1: f64 = sigma[pos * dim..(pos + 1) * dim].iter().map(|v| v.abs()).sum();
                let (group, traj) = match label {
                    Anomaly::None => (&mut clean, None),
                    Anomaly::Slip => (&mut slip, Some(&mut slip_traj)),
                    Anomaly::Guess => (&mut guess, Some(&mut guess_traj)),
                };
                group.count += 1;
                group.sigma += l1;
                group.kappa += kappa[pos];
                if let Some(traj) = traj {
                    for k in -TRAJECTORY_SPAN..=TRAJECTORY_SPAN {
                        let s = t as i64 + k;
                        // position 0 carries no prediction
                        if s >= 1 && (s as usize) < seq.len() {
                            let e = traj.entry(k).or_insert((0.0, 0));
                            e.0 += y_hat[row + s as usize];
                            e.1 += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(AnomalyReport {
        total_steps: clean.count + slip.count + guess.count,
        clean: clean.stats(),
        slip: slip.stats(),
        guess: guess.stats(),
        slip_trajectory: mean_by_offset(slip_traj),
        guess_trajectory: mean_by_offset(guess_traj),
    })
}

/// Encoder state and prediction at one step of one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub question_id: String,
    pub correct: u8,
    /// Constrained NIG parameters of the interaction embedding.
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    /// Moments fed to the attention stack.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub kappa: f64,
    pub y_hat: f64,
}

/// Per-step dump of the first `steps` interactions of `student` (all when
/// `None`). Sequences longer than the model's window are cut to one window.
pub fn inspect(
    trained: &TrainedModel,
    seqs: &[StudentSequence],
    student: &str,
    steps: Option<usize>,
) -> Result<Vec<StepRecord>, TrainError> {
    if trained.config.ablation.nig {
        return Err(TrainError::Unsupported(
            "inspect needs the distributional encoder; the model was trained with the nig ablation".into(),
        ));
    }
    let seq = seqs
        .iter()
        .find(|s| s.student_id == student)
        .ok_or_else(|| TrainError::UnknownStudent(student.into()))?;
    super::check_vocab(std::slice::from_ref(seq), trained.vocab.len())?;
    let len = seq
        .len()
        .min(trained.config.max_seq_len)
        .min(steps.unwrap_or(usize::MAX));
    let seq = seq.slice(0, len);
    let batch = Batch::from_sequences(&[&seq]);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = trained.model.forward(&mut tape, &trained.store, &batch, Mode::Eval, &mut rng)?;
    let streams = fwd.streams.expect("distributional encoder produces streams");
    let dim = trained.config.dim;
    let row = |v, t: usize| tape.value(v).data()[t * dim..(t + 1) * dim].to_vec();
    Ok((0..len)
        .map(|t| StepRecord {
            step: t,
            question_id: trained.vocab.id_of(seq.questions[t]).to_string(),
            correct: seq.responses[t],
            mu: row(streams.x_params.mu, t),
            alpha: row(streams.x_params.alpha, t),
            beta: row(streams.x_params.beta, t),
            delta: row(streams.x_params.delta, t),
            mean: row(streams.x_mean, t),
            var: row(streams.x_var, t),
            kappa: tape.value(fwd.kappa).data()[t],
            y_hat: tape.value(fwd.y_hat).data()[t],
        })
        .collect())
}
