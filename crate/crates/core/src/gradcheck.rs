//! Finite-difference verification of every differentiable op and of the
//! full training objective.
//!
//! Each case registers its inputs as parameters, builds a scalar on a fresh
//! tape, and compares the backward pass with central differences at several
//! random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, StudentSequence};
use crate::disambiguator::{
    causal_mask, diffusion_denoise_loss, nig_attention, nig_contrastive_loss, AttentionBlock, AttentionKind,
    Mlp, Mode, MsdConfig, Paths,
};
use crate::model::{Ablation, KeenKt, ModelConfig, ModelError};
use crate::nig::{constrain_on_tape, moments_on_tape};
use crate::predictor::{bce_loss, blend, confidence, total_loss, BceReduction};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-4;
pub const POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build = dyn Fn(&mut Tape, &ParamStore, &[ParamId]) -> Result<Var, ModelError>;
type Setup = dyn Fn(&mut ChaCha8Rng) -> (ParamStore, Vec<ParamId>);

struct Case {
    name: &'static str,
    setup: Box<Setup>,
    build: Box<Build>,
}

/// Input sampler: uniform in `[lo, hi)`, optionally with a random sign so
/// magnitudes stay away from kinks at zero.
#[derive(Clone, Copy)]
enum Range {
    Uniform(f64, f64),
    Signed(f64, f64),
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], range: Range) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match range {
            Range::Uniform(lo, hi) => rng.random_range(lo..hi),
            Range::Signed(lo, hi) => {
                let m = rng.random_range(lo..hi);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn inputs(specs: Vec<(Vec<usize>, Range)>) -> Box<Setup> {
    Box::new(move |rng| {
        let mut store = ParamStore::new();
        let ids = specs
            .iter()
            .enumerate()
            .map(|(i, (shape, range))| store.register(format!("x{i}"), sample(rng, shape, *range)))
            .collect();
        (store, ids)
    })
}

/// Reduces `y` to a scalar through fixed pseudo-random weights, so every
/// output coordinate gets a distinct upstream gradient.
fn project_scalar(tape: &mut Tape, y: Var) -> Result<Var, AutodiffError> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.5).collect();
    let w = tape.constant(Tensor::new(shape, w)?)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn unary(name: &'static str, range: Range, f: fn(&mut Tape, Var) -> Result<Var, AutodiffError>) -> Case {
    Case {
        name,
        setup: inputs(vec![(vec![3, 4], range)]),
        build: Box::new(move |tape, store, ids| {
            let x = tape.param(store, ids[0])?;
            let y = f(tape, x)?;
            Ok(project_scalar(tape, y)?)
        }),
    }
}

fn binary(
    name: &'static str,
    shapes: [Vec<usize>; 2],
    ranges: [Range; 2],
    f: fn(&mut Tape, Var, Var) -> Result<Var, AutodiffError>,
) -> Case {
    let [sa, sb] = shapes;
    Case {
        name,
        setup: inputs(vec![(sa, ranges[0]), (sb, ranges[1])]),
        build: Box::new(move |tape, store, ids| {
            let a = tape.param(store, ids[0])?;
            let b = tape.param(store, ids[1])?;
            let y = f(tape, a, b)?;
            Ok(project_scalar(tape, y)?)
        }),
    }
}

const ANY: Range = Range::Uniform(-1.0, 1.0);
const POS: Range = Range::Uniform(0.2, 2.0);
const AWAY: Range = Range::Signed(0.1, 1.0);

fn op_cases() -> Vec<Case> {
    vec![
        unary("softplus", ANY, |t, x| t.softplus(x)),
        unary("tanh", ANY, |t, x| t.tanh(x)),
        unary("elu", AWAY, |t, x| t.elu(x)),
        unary("sqrt", POS, |t, x| t.sqrt(x)),
        unary("exp", ANY, |t, x| t.exp(x)),
        unary("log", POS, |t, x| t.log(x)),
        unary("sigmoid", ANY, |t, x| t.sigmoid(x)),
        unary("relu", AWAY, |t, x| t.relu(x)),
        unary("square", ANY, |t, x| t.square(x)),
        unary("powf(-1)", POS, |t, x| t.powf(x, -1.0)),
        unary("powf(0.75)", POS, |t, x| t.powf(x, 0.75)),
        unary("scalar_mul", ANY, |t, x| t.scalar_mul(x, -1.7)),
        unary("add_scalar", ANY, |t, x| t.add_scalar(x, 0.3)),
        unary("transpose_last2", ANY, |t, x| t.transpose_last2(x)),
        unary("slice_last", ANY, |t, x| t.slice_last(x, 1, 2)),
        unary("reshape", ANY, |t, x| t.reshape(x, &[2, 6])),
        unary("sum", ANY, |t, x| t.sum(x)),
        unary("mean", ANY, |t, x| t.mean(x)),
        unary("sum_axis", ANY, |t, x| t.sum_axis(x, 0)),
        unary("l1_norm_last", AWAY, |t, x| t.l1_norm_last(x)),
        unary("masked_softmax", ANY, |t, x| {
            let mask = [true, true, false, true].repeat(3);
            t.masked_softmax(x, &mask)
        }),
        binary("add", [vec![3, 4], vec![3, 4]], [ANY, ANY], |t, a, b| t.add(a, b)),
        binary("add (broadcast)", [vec![3, 4], vec![4]], [ANY, ANY], |t, a, b| t.add(a, b)),
        binary("sub", [vec![3, 4], vec![3, 4]], [ANY, ANY], |t, a, b| t.sub(a, b)),
        binary("mul", [vec![3, 4], vec![3, 4]], [ANY, ANY], |t, a, b| t.mul(a, b)),
        binary("mul (scalar broadcast)", [vec![3, 4], vec![]], [ANY, ANY], |t, a, b| t.mul(a, b)),
        binary("div", [vec![3, 4], vec![3, 4]], [ANY, POS], |t, a, b| t.div(a, b)),
        binary("matmul", [vec![2, 3, 4], vec![4, 5]], [ANY, ANY], |t, a, b| t.matmul(a, b)),
        binary("matmul (batched)", [vec![2, 3, 4], vec![2, 4, 3]], [ANY, ANY], |t, a, b| t.matmul(a, b)),
        binary("concat_last", [vec![2, 3], vec![2, 2]], [ANY, ANY], |t, a, b| t.concat_last(a, b)),
        binary("pairwise_sq_dist", [vec![2, 3, 4], vec![2, 5, 4]], [ANY, ANY], |t, a, b| {
            t.pairwise_sq_dist(a, b)
        }),
        Case {
            name: "gather_rows",
            setup: inputs(vec![(vec![5, 3], ANY)]),
            build: Box::new(|tape, store, ids| {
                let table = tape.param(store, ids[0])?;
                let y = tape.gather_rows(table, &[4, 0, 4, 2, 1, 4], &[2, 3])?;
                Ok(project_scalar(tape, y)?)
            }),
        },
        Case {
            name: "shift_time",
            setup: inputs(vec![(vec![2, 4, 3], ANY)]),
            build: Box::new(|tape, store, ids| {
                let x = tape.param(store, ids[0])?;
                let y = tape.shift_time(x, 0.5)?;
                Ok(project_scalar(tape, y)?)
            }),
        },
    ]
}

fn nig_cases() -> Vec<Case> {
    vec![
        Case {
            name: "nig constrain + moments",
            setup: inputs(vec![(vec![2, 3], ANY); 4]),
            build: Box::new(|tape, store, ids| {
                let raw: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect::<Result<_, _>>()?;
                let p = constrain_on_tape(tape, raw[0], raw[1], raw[2], raw[3])?;
                let m = moments_on_tape(tape, &p)?;
                let both = tape.concat_last(m.mean, m.var)?;
                Ok(project_scalar(tape, both)?)
            }),
        },
        Case {
            name: "nig attention",
            setup: Box::new(|rng| {
                let mut store = ParamStore::new();
                AttentionBlock::new(&mut store, "blk", 3, 4, rng);
                for (i, range) in [ANY, POS, ANY, POS].into_iter().enumerate() {
                    store.register(format!("x{i}"), sample(rng, &[2, 4, 3], range));
                }
                let ids = store.iter().map(|(id, _)| id).collect();
                (store, ids)
            }),
            build: Box::new(|tape, store, ids| {
                // same registration order as the store under test
                let block = AttentionBlock::new(&mut ParamStore::new(), "blk", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
                let n = ids.len();
                let v: Vec<Var> = ids[n - 4..].iter().map(|&id| tape.param(store, id)).collect::<Result<_, _>>()?;
                let query = Paths { mean: v[0], var: v[1] };
                let keys = Paths { mean: v[2], var: v[3] };
                let mask = causal_mask(2, 4);
                let out = nig_attention(tape, store, &block, query, keys, &mask, 0.5, AttentionKind::Nig)?;
                Ok(project_scalar(tape, out.attended)?)
            }),
        },
        Case {
            name: "denoising loss",
            setup: Box::new(|rng| {
                let mut store = ParamStore::new();
                Mlp::new(&mut store, "den", 4, 5, rng);
                store.register("h", sample(rng, &[2, 3, 4], ANY));
                let ids = store.iter().map(|(id, _)| id).collect();
                (store, ids)
            }),
            build: Box::new(|tape, store, ids| {
                let den = Mlp::new(&mut ParamStore::new(), "den", 4, 5, &mut ChaCha8Rng::seed_from_u64(0));
                let h = tape.param(store, ids[4])?;
                let valid = [true, true, false, true, true, true];
                // identical noise on every evaluation
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let (loss, _) = diffusion_denoise_loss(tape, store, &den, h, &valid, 0.2, &mut rng)?;
                Ok(loss)
            }),
        },
        Case {
            name: "contrastive loss",
            setup: inputs(vec![
                (vec![3, 4], ANY),
                (vec![3, 4], POS),
                (vec![3, 4], ANY),
                (vec![3, 4], POS),
            ]),
            build: Box::new(|tape, store, ids| {
                let v: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect::<Result<_, _>>()?;
                let anchor = Paths { mean: v[0], var: v[1] };
                let positive = Paths { mean: v[2], var: v[3] };
                Ok(nig_contrastive_loss(tape, anchor, positive, 0.5)?)
            }),
        },
        Case {
            name: "confidence + blend + bce",
            setup: inputs(vec![(vec![2, 3], Range::Uniform(0.1, 0.9)), (vec![2, 3, 4], POS)]),
            build: Box::new(|tape, store, ids| {
                let p = tape.param(store, ids[0])?;
                let sigma = tape.param(store, ids[1])?;
                let kappa = confidence(tape, sigma, 0.4)?;
                let y = blend(tape, p, kappa)?;
                let labels = [1, 0, 1, 0, 0, 1];
                let mask = [true, true, true, false, true, true];
                Ok(bce_loss(tape, y, &labels, &mask, BceReduction::Mean)?)
            }),
        },
    ]
}

fn tiny_batch() -> Batch {
    let seq = |qs: Vec<usize>, rs: Vec<u8>| StudentSequence {
        student_id: String::new(),
        concepts: vec![None; qs.len()],
        timestamps: vec![None; qs.len()],
        anomalies: vec![None; qs.len()],
        questions: qs,
        responses: rs,
    };
    let a = seq(vec![0, 1, 2, 1], vec![1, 0, 1, 1]);
    let b = seq(vec![3, 3, 0], vec![0, 1, 0]);
    let c = seq(vec![2, 0, 3, 1], vec![1, 1, 0, 0]);
    Batch::from_sequences(&[&a, &b, &c])
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_questions: 4,
        dim: 2,
        hidden: 3,
        gamma: 0.4,
        msd: MsdConfig {
            tau: 0.5,
            noise_level: 0.2,
            n_blocks: 2,
            hidden: 3,
        },
        ablation: Ablation::default(),
        aux_in_eval: false,
    }
}

/// The complete training objective on a tiny model, with fixed-seed noise.
fn total_objective_case() -> Case {
    Case {
        name: "total objective (tiny model)",
        setup: Box::new(|rng| {
            let mut store = ParamStore::new();
            let _ = KeenKt::new(&mut store, tiny_model_config(), rng);
            // move every parameter off its structured initial value
            for p in store.iter_mut() {
                for v in p.value.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let ids = store.iter().map(|(id, _)| id).collect();
            (store, ids)
        }),
        build: Box::new(|tape, store, _| {
            let mut init_rng = ChaCha8Rng::seed_from_u64(0);
            let mut scratch = ParamStore::new();
            // same registration order as the store under test
            let model = KeenKt::new(&mut scratch, tiny_model_config(), &mut init_rng);
            let batch = tiny_batch();
            let mut noise = ChaCha8Rng::seed_from_u64(7);
            let out = model.forward(tape, store, &batch, Mode::Train, &mut noise)?;
            let bce = bce_loss(tape, out.y_hat, &batch.responses, &batch.target_mask(), BceReduction::Mean)?;
            Ok(total_loss(tape, bce, out.aux_mse, out.aux_nce, 0.15, 0.04)?)
        }),
    }
}

fn evaluate(case: &Case, store: &ParamStore, ids: &[ParamId]) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let y = (case.build)(&mut tape, store, ids)?;
    Ok(tape.value(y).item())
}

fn check_case(case: &Case, seed: u64) -> Result<GradcheckRow, ModelError> {
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(point as u64));
        let (mut store, ids) = (case.setup)(&mut rng);
        let mut tape = Tape::new();
        let y = (case.build)(&mut tape, &store, &ids)?;
        let grads = tape.backward(y)?;
        grads.accumulate_into(&mut store)?;
        for &id in &ids {
            let n = store.get(id)?.value.numel();
            for i in 0..n {
                let analytic = store.get(id)?.grad.data()[i];
                let original = store.get(id)?.value.data()[i];
                store.get_mut(id)?.value.data_mut()[i] = original + STEP;
                let plus = evaluate(case, &store, &ids)?;
                store.get_mut(id)?.value.data_mut()[i] = original - STEP;
                let minus = evaluate(case, &store, &ids)?;
                store.get_mut(id)?.value.data_mut()[i] = original;
                let numeric = (plus - minus) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic, numeric));
                coordinates += 1;
            }
        }
    }
    Ok(GradcheckRow {
        name: case.name.to_string(),
        points: POINTS,
        coordinates,
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

/// Runs every case at [`POINTS`] random points derived from `seed`.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport, ModelError> {
    let mut cases = op_cases();
    cases.extend(nig_cases());
    cases.push(total_objective_case());
    let rows = cases
        .iter()
        .map(|c| check_case(c, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        rows,
    })
}
