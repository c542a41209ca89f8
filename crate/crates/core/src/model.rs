//! The full model: encoder → disambiguator → confidence-aware predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::Batch;
use crate::disambiguator::{AttentionKind, AuxTerms, Disambiguator, Mode, MsdConfig, Paths};
use crate::nig::{constrain_params, moments};
use crate::encoder::{encode, encode_deterministic, EncoderError, EncoderTables, MomentStreams};
use crate::predictor::{blend, confidence, score, PredictorWeights};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop the contrastive term.
    pub cl: bool,
    /// Drop the denoising term.
    pub diff: bool,
    /// Deterministic embeddings, dot-product attention, no confidence shrinkage.
    pub nig: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_questions: usize,
    pub dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub msd: MsdConfig,
    pub ablation: Ablation,
    /// Build the auxiliary terms in evaluation mode too.
    pub aux_in_eval: bool,
}

#[derive(Debug, Clone)]
pub struct KeenKt {
    pub cfg: ModelConfig,
    pub tables: EncoderTables,
    pub msd: Disambiguator,
    pub predictor: PredictorWeights,
}

/// Forward results, prediction tensors shaped `(batch, len)`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub y_hat: Var,
    pub p: Var,
    pub kappa: Var,
    /// `(batch, len, dim)` predictor-facing variance.
    pub sigma: Var,
    pub aux_mse: Option<Var>,
    pub aux_nce: Option<Var>,
    /// Encoder streams; absent under the NIG ablation.
    pub streams: Option<MomentStreams>,
}

/// Pre-activation of the predictor-facing variance at which `kappa = 1/2`.
///
/// `kappa = exp(-gamma * sum softplus(v))` over `dim` entries, so an
/// unshifted variance half starts `kappa` near `exp(-gamma * dim)` and the
/// prediction loss barely reaches the shared layers.
pub fn neutral_sigma_pre_activation(dim: usize, gamma: f64) -> Option<f64> {
    if gamma <= 0.0 || dim == 0 {
        return None;
    }
    let per_dim = std::f64::consts::LN_2 / (gamma * dim as f64);
    Some(per_dim.exp_m1().ln())
}

/// Output bias that moves the variance half of `h` from the encoder variance
/// at the table-init centre to [`neutral_sigma_pre_activation`].
pub fn neutral_sigma_bias(dim: usize, gamma: f64) -> Option<f64> {
    let target = neutral_sigma_pre_activation(dim, gamma)?;
    let centre = constrain_params(&[0.0], &[0.0], &[0.0], &[0.0]).and_then(|p| moments(&p));
    Some(target - centre.expect("zero raw parameters are valid").var[0])
}

fn fill(store: &mut ParamStore, id: ParamId, range: std::ops::RangeFrom<usize>, value: f64) {
    let p = store.get_mut(id).expect("registered by the model");
    p.value.data_mut()[range].fill(value);
}

impl KeenKt {
    /// Registers every parameter in a fixed order, so a model rebuilt from
    /// the same config lines up with a saved store.
    ///
    /// Residual branches start as the identity: feed-forward output weights
    /// and the variance-path value projection are zero, so a fresh `h` is the
    /// question stream plus output biases. Without the NIG ablation the
    /// variance half is then shifted to the neutral confidence point, and the
    /// denoiser's output bias starts at the same point so the reconstruction
    /// loss does not immediately pull the variance back up.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ModelConfig, rng: &mut R) -> Self {
        let tables = EncoderTables::new(store, cfg.n_questions, cfg.dim, rng);
        let msd = Disambiguator::new(store, cfg.dim, cfg.msd, rng);
        let predictor = PredictorWeights::new(store, cfg.dim, cfg.hidden, rng);
        let model = Self {
            cfg,
            tables,
            msd,
            predictor,
        };
        for block in &model.msd.blocks {
            fill(store, block.ffn.second.weight, 0.., 0.0);
            fill(store, block.wv_sigma, 0.., 0.0);
        }
        if !cfg.ablation.nig {
            if let (Some(bias), Some(target)) = (
                neutral_sigma_bias(cfg.dim, cfg.gamma),
                neutral_sigma_pre_activation(cfg.dim, cfg.gamma),
            ) {
                let last = model.msd.blocks.last().expect("at least one block");
                fill(store, last.ffn.second.bias, cfg.dim.., bias);
                fill(store, model.msd.denoiser.second.bias, cfg.dim.., target);
            }
        }
        model
    }

    pub fn attention_kind(&self) -> AttentionKind {
        if self.cfg.ablation.nig {
            AttentionKind::DotProduct
        } else {
            AttentionKind::Nig
        }
    }

    /// Auxiliary terms active in `mode`; evaluation builds them only when
    /// `aux_in_eval` is set.
    pub fn aux_terms(&self, mode: Mode) -> AuxTerms {
        let active = mode == Mode::Train || self.cfg.aux_in_eval;
        AuxTerms {
            denoise: active && !self.cfg.ablation.diff,
            contrastive: active && !self.cfg.ablation.cl,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput, ModelError> {
        let shape = (batch.batch, batch.len);
        let (questions, interactions, streams) = if self.cfg.ablation.nig {
            let (q_mean, q_var, x_mean, x_var) =
                encode_deterministic(tape, store, &self.tables, &batch.questions, &batch.responses, shape)?;
            (
                Paths { mean: q_mean, var: q_var },
                Paths { mean: x_mean, var: x_var },
                None,
            )
        } else {
            let s = encode(tape, store, &self.tables, &batch.questions, &batch.responses, shape)?;
            (
                Paths { mean: s.q_mean, var: s.q_var },
                Paths { mean: s.x_mean, var: s.x_var },
                Some(s),
            )
        };
        let out = self.msd.forward(
            tape,
            store,
            questions,
            interactions,
            &batch.valid,
            self.attention_kind(),
            self.aux_terms(mode),
            rng,
        )?;
        let (_, p) = score(tape, store, &self.predictor, out.h, questions.mean)?;
        let kappa = if self.cfg.ablation.nig {
            tape.constant(Tensor::full(&[batch.batch, batch.len], 1.0))?
        } else {
            confidence(tape, out.sigma_out, self.cfg.gamma)?
        };
        let y_hat = blend(tape, p, kappa)?;
        Ok(ForwardOutput {
            y_hat,
            p,
            kappa,
            sigma: out.sigma_out,
            aux_mse: out.aux_mse,
            aux_nce: out.aux_nce,
            streams,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StudentSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            n_questions: 5,
            dim: 4,
            hidden: 8,
            gamma: 0.4,
            msd: MsdConfig {
                hidden: 8,
                n_blocks: 2,
                ..Default::default()
            },
            ablation,
            aux_in_eval: false,
        }
    }

    fn batch() -> Batch {
        let seq = |qs: Vec<usize>, rs: Vec<u8>| StudentSequence {
            student_id: "s".into(),
            concepts: vec![None; qs.len()],
            timestamps: vec![None; qs.len()],
            anomalies: vec![None; qs.len()],
            questions: qs,
            responses: rs,
        };
        let a = seq(vec![0, 1, 2, 3], vec![1, 0, 1, 1]);
        let b = seq(vec![4, 4, 0], vec![0, 1, 1]);
        Batch::from_sequences(&[&a, &b])
    }

    fn run(ablation: Ablation, mode: Mode) -> (Tape, ForwardOutput) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = KeenKt::new(&mut store, cfg(ablation), &mut rng);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &batch(), mode, &mut rng).unwrap();
        (tape, out)
    }

    #[test]
    fn shapes_and_ranges() {
        let (tape, out) = run(Ablation::default(), Mode::Train);
        assert_eq!(tape.shape(out.y_hat), &[2, 4]);
        assert_eq!(tape.shape(out.sigma), &[2, 4, 4]);
        let kappa = tape.value(out.kappa).data();
        let p = tape.value(out.p).data();
        for ((&y, &k), &p) in tape.value(out.y_hat).data().iter().zip(kappa).zip(p) {
            assert!(k > 0.0 && k <= 1.0);
            assert!((y - 0.5).abs() <= k * (p - 0.5).abs() + 1e-15);
        }
        assert!(out.aux_mse.is_some() && out.aux_nce.is_some());
        assert!(out.streams.is_some());
    }

    #[test]
    fn neutral_bias_targets_half_confidence() {
        let b = neutral_sigma_bias(4, 0.4).unwrap();
        // encoder variance at zero raw parameters: alpha^(-1/2), alpha = ln 2 + 1e-7
        let base = (std::f64::consts::LN_2 + 1e-7).powf(-0.5);
        // softplus(base + b) summed over 4 dims equals ln 2 / gamma
        let v = (b + base).exp().ln_1p();
        assert!((v * 4.0 * 0.4 - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(neutral_sigma_bias(4, 0.0), None);
    }

    #[test]
    fn fresh_model_starts_near_half_confidence() {
        let (tape, out) = run(Ablation::default(), Mode::Eval);
        for &k in tape.value(out.kappa).data() {
            assert!((k - 0.5).abs() < 0.05, "kappa {k}");
        }
    }

    #[test]
    fn aux_in_eval_builds_aux_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = KeenKt::new(&mut store, ModelConfig { aux_in_eval: true, ..cfg(Ablation::default()) }, &mut rng);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &batch(), Mode::Eval, &mut rng).unwrap();
        assert!(out.aux_mse.is_some() && out.aux_nce.is_some());
    }

    #[test]
    fn eval_builds_no_aux_terms() {
        let (_, out) = run(Ablation::default(), Mode::Eval);
        assert!(out.aux_mse.is_none() && out.aux_nce.is_none());
    }

    #[test]
    fn ablations_drop_their_terms() {
        let (_, out) = run(Ablation { cl: true, ..Default::default() }, Mode::Train);
        assert!(out.aux_nce.is_none() && out.aux_mse.is_some());
        let (_, out) = run(Ablation { diff: true, ..Default::default() }, Mode::Train);
        assert!(out.aux_mse.is_none() && out.aux_nce.is_some());
        let (tape, out) = run(Ablation { nig: true, ..Default::default() }, Mode::Eval);
        assert!(out.streams.is_none());
        assert!(tape.value(out.kappa).data().iter().all(|&k| k == 1.0));
        for (y, p) in tape.value(out.y_hat).data().iter().zip(tape.value(out.p).data()) {
            assert!((y - p).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_is_deterministic_and_causal() {
        let (t1, o1) = run(Ablation::default(), Mode::Eval);
        let (t2, o2) = run(Ablation::default(), Mode::Eval);
        assert_eq!(t1.value(o1.y_hat).data(), t2.value(o2.y_hat).data());

        // changing the last response must not move any prediction
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let model = KeenKt::new(&mut store, cfg(Ablation::default()), &mut rng);
        let mut b = batch();
        let mut tape = Tape::new();
        let base = model.forward(&mut tape, &store, &b, Mode::Eval, &mut rng).unwrap();
        let base = tape.value(base.y_hat).data().to_vec();
        b.responses[3] = 0;
        let mut tape = Tape::new();
        let changed = model.forward(&mut tape, &store, &b, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(changed.y_hat).data(), &base[..]);
        // the response at step 1 is visible from step 2 on
        b.responses[1] = 1;
        let mut tape = Tape::new();
        let changed = model.forward(&mut tape, &store, &b, Mode::Eval, &mut rng).unwrap();
        let y = tape.value(changed.y_hat).data();
        assert_eq!(&y[..2], &base[..2]);
        assert_ne!(y[2], base[2]);
    }
}
