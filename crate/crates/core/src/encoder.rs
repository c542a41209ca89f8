//! Behavioral knowledge encoder: embeds questions and (question, response)
//! interactions as NIG parameters and converts them to moment streams.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::nig::{constrain_on_tape, moments_on_tape, MomentVars, NigVars};

/// Standard deviation of the raw embedding initialization.
pub const INIT_STD: f64 = 0.02;

pub const CHANNELS: [&str; 4] = ["mu", "alpha", "beta", "delta"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("question id {q} out of range for {n_questions} questions")]
    QuestionOutOfRange { q: usize, n_questions: usize },
    #[error("response must be 0 or 1, got {0}")]
    InvalidResponse(u8),
    #[error("questions ({0}) and responses ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Interaction id of answering question `q` with response `r`: `q + r * n_questions`.
pub fn interaction_index(q: usize, r: u8, n_questions: usize) -> Result<usize, EncoderError> {
    if q >= n_questions {
        return Err(EncoderError::QuestionOutOfRange { q, n_questions });
    }
    if r > 1 {
        return Err(EncoderError::InvalidResponse(r));
    }
    Ok(q + r as usize * n_questions)
}

/// Raw embedding tables, one per stream and NIG channel.
#[derive(Debug, Clone)]
pub struct EncoderTables {
    pub n_questions: usize,
    pub dim: usize,
    /// `[mu, alpha, beta, delta]` tables of shape `(n_questions, dim)`.
    pub question: [ParamId; 4],
    /// `[mu, alpha, beta, delta]` tables of shape `(2 * n_questions, dim)`.
    pub interaction: [ParamId; 4],
}

impl EncoderTables {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_questions: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let question = CHANNELS.map(|c| {
            store.register_normal(format!("encoder.question.{c}"), &[n_questions, dim], INIT_STD, rng)
        });
        let interaction = CHANNELS.map(|c| {
            store.register_normal(
                format!("encoder.interaction.{c}"),
                &[2 * n_questions, dim],
                INIT_STD,
                rng,
            )
        });
        Self {
            n_questions,
            dim,
            question,
            interaction,
        }
    }
}

/// Encoder output, each stream shaped `(batch, len, dim)`.
#[derive(Debug, Clone, Copy)]
pub struct MomentStreams {
    pub q_mean: Var,
    pub q_var: Var,
    pub x_mean: Var,
    pub x_var: Var,
    /// Constrained interaction-stream parameters, kept for inspection.
    pub x_params: NigVars,
    pub q_params: NigVars,
}

fn lookup_stream(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &[ParamId; 4],
    ids: &[usize],
    prefix: &[usize],
) -> Result<(NigVars, MomentVars), AutodiffError> {
    let mut raw = [None; 4];
    for (slot, &id) in raw.iter_mut().zip(tables) {
        let table = tape.param(store, id)?;
        *slot = Some(tape.gather_rows(table, ids, prefix)?);
    }
    let [m, a, b, d] = raw.map(Option::unwrap);
    let params = constrain_on_tape(tape, m, a, b, d)?;
    let moments = moments_on_tape(tape, &params)?;
    Ok((params, moments))
}

fn check_inputs(
    tables: &EncoderTables,
    questions: &[usize],
    responses: &[u8],
) -> Result<Vec<usize>, EncoderError> {
    if questions.len() != responses.len() {
        return Err(EncoderError::LengthMismatch(questions.len(), responses.len()));
    }
    questions
        .iter()
        .zip(responses)
        .map(|(&q, &r)| interaction_index(q, r, tables.n_questions))
        .collect()
}

/// Encodes a `(batch, len)` grid of interactions into NIG moment streams.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EncoderTables,
    questions: &[usize],
    responses: &[u8],
    shape: (usize, usize),
) -> Result<MomentStreams, EncoderError> {
    let interactions = check_inputs(tables, questions, responses)?;
    let prefix = [shape.0, shape.1];
    let (q_params, q) = lookup_stream(tape, store, &tables.question, questions, &prefix)?;
    let (x_params, x) = lookup_stream(tape, store, &tables.interaction, &interactions, &prefix)?;
    Ok(MomentStreams {
        q_mean: q.mean,
        q_var: q.var,
        x_mean: x.mean,
        x_var: x.var,
        x_params,
        q_params,
    })
}

/// Deterministic point embeddings: the `mu` tables only, variance streams
/// fixed at zero. Used by the NIG ablation.
pub fn encode_deterministic(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EncoderTables,
    questions: &[usize],
    responses: &[u8],
    shape: (usize, usize),
) -> Result<(Var, Var, Var, Var), EncoderError> {
    let interactions = check_inputs(tables, questions, responses)?;
    let prefix = [shape.0, shape.1];
    let qt = tape.param(store, tables.question[0])?;
    let q_mean = tape.gather_rows(qt, questions, &prefix)?;
    let xt = tape.param(store, tables.interaction[0])?;
    let x_mean = tape.gather_rows(xt, &interactions, &prefix)?;
    let zeros = crate::autodiff::Tensor::zeros(&[shape.0, shape.1, tables.dim]);
    let q_var = tape.constant(zeros.clone())?;
    let x_var = tape.constant(zeros)?;
    Ok((q_mean, q_var, x_mean, x_var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(nq: usize, d: usize) -> (ParamStore, EncoderTables) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let tables = EncoderTables::new(&mut store, nq, d, &mut rng);
        (store, tables)
    }

    #[test]
    fn interaction_index_rule() {
        assert_eq!(interaction_index(5, 0, 100).unwrap(), 5);
        assert_eq!(interaction_index(5, 1, 100).unwrap(), 105);
        assert_eq!(interaction_index(99, 1, 100).unwrap(), 199);
        assert!(matches!(
            interaction_index(100, 0, 100),
            Err(EncoderError::QuestionOutOfRange { .. })
        ));
        assert_eq!(interaction_index(1, 2, 100), Err(EncoderError::InvalidResponse(2)));
    }

    #[test]
    fn tables_have_expected_vocabularies() {
        let (store, tables) = setup(7, 4);
        for id in tables.question {
            assert_eq!(store.get(id).unwrap().value.shape(), &[7, 4]);
        }
        for id in tables.interaction {
            assert_eq!(store.get(id).unwrap().value.shape(), &[14, 4]);
        }
        assert_eq!(store.len(), 8);
    }

    #[test]
    fn shapes_positivity_and_constraints() {
        let (store, tables) = setup(6, 5);
        let qs = [0, 1, 2, 3, 4, 5, 5, 4];
        let rs = [1, 0, 1, 1, 0, 0, 1, 0];
        let mut tape = Tape::new();
        let s = encode(&mut tape, &store, &tables, &qs, &rs, (2, 4)).unwrap();
        for v in [s.q_mean, s.q_var, s.x_mean, s.x_var] {
            assert_eq!(tape.shape(v), &[2, 4, 5]);
        }
        assert!(tape.value(s.q_var).data().iter().all(|&v| v > 0.0));
        assert!(tape.value(s.x_var).data().iter().all(|&v| v > 0.0));
        let a = tape.value(s.x_params.alpha).data();
        let b = tape.value(s.x_params.beta).data();
        assert!(a.iter().zip(b).all(|(a, b)| b.abs() < *a));
    }

    #[test]
    fn identical_prefixes_give_identical_moments_and_repeat_calls_are_bit_identical() {
        let (store, tables) = setup(4, 3);
        let qs = [1, 2, 3, 1, 2, 0];
        let rs = [1, 0, 1, 1, 0, 0];
        let run = || {
            let mut tape = Tape::new();
            let s = encode(&mut tape, &store, &tables, &qs, &rs, (2, 3)).unwrap();
            (tape.value(s.x_mean).clone(), tape.value(s.x_var).clone())
        };
        let (m1, v1) = run();
        let (m2, v2) = run();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
        // students share (1,1),(2,0) as their first two interactions
        let d = 3;
        assert_eq!(&m1.data()[..2 * d], &m1.data()[3 * d..5 * d]);
        assert_eq!(&v1.data()[..2 * d], &v1.data()[3 * d..5 * d]);
    }

    #[test]
    fn out_of_range_question_is_rejected() {
        let (store, tables) = setup(4, 3);
        let mut tape = Tape::new();
        assert!(matches!(
            encode(&mut tape, &store, &tables, &[4], &[0], (1, 1)),
            Err(EncoderError::QuestionOutOfRange { .. })
        ));
    }

    #[test]
    fn every_table_receives_gradient() {
        let (mut store, tables) = setup(5, 3);
        let qs = [0, 1, 2, 3, 4, 0];
        let rs = [0, 1, 0, 1, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let s = encode(&mut tape, &store, &tables, &qs, &rs, (2, 3)).unwrap();
        let mut total = None;
        for v in [s.q_mean, s.q_var, s.x_mean, s.x_var] {
            let w: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = tape
                .constant(crate::autodiff::Tensor::new(vec![2, 3, 3], w).unwrap())
                .unwrap();
            let p = tape.mul(v, w).unwrap();
            let p = tape.sum(p).unwrap();
            total = Some(match total {
                None => p,
                Some(t) => tape.add(t, p).unwrap(),
            });
        }
        let g = tape.backward(total.unwrap()).unwrap();
        g.accumulate_into(&mut store).unwrap();
        for (_, p) in store.iter() {
            assert!(
                p.grad.data().iter().any(|&v| v != 0.0),
                "{} received no gradient",
                p.name
            );
        }
    }
}
