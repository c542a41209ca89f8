//! Confidence-aware predictor and the multi-task objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::disambiguator::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BceReduction {
    /// Divide by the number of valid positions.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
pub struct PredictorWeights {
    /// `[h_t || question embedding] -> hidden`.
    pub first: Linear,
    /// `hidden -> 1`.
    pub second: Linear,
}

impl PredictorWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, "predictor.w1", 3 * dim, hidden, rng),
            second: Linear::new(store, "predictor.w2", hidden, 1, rng),
        }
    }
}

/// Raw score `s` and probability `sigmoid(s)`, both `(batch, len)`.
pub fn score(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &PredictorWeights,
    h: Var,
    question_emb: Var,
) -> Result<(Var, Var), AutodiffError> {
    let x = tape.concat_last(h, question_emb)?;
    let hidden = weights.first.forward(tape, store, x)?;
    let hidden = tape.relu(hidden)?;
    let s = weights.second.forward(tape, store, hidden)?;
    let shape = tape.shape(s).to_vec();
    let s = tape.reshape(s, &shape[..shape.len() - 1])?;
    let p = tape.sigmoid(s)?;
    Ok((s, p))
}

/// `exp(-gamma * ||sigma||_1)` over the last axis.
pub fn confidence(tape: &mut Tape, sigma: Var, gamma: f64) -> Result<Var, AutodiffError> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(AutodiffError::Domain {
            op: "confidence".into(),
            detail: format!("gamma must be >= 0, got {gamma}"),
        });
    }
    let l1 = tape.l1_norm_last(sigma)?;
    let scaled = tape.scalar_mul(l1, -gamma)?;
    tape.exp(scaled)
}

/// `kappa * p + (1 - kappa) * 0.5`.
pub fn blend(tape: &mut Tape, p: Var, kappa: Var) -> Result<Var, AutodiffError> {
    let centered = tape.add_scalar(p, -0.5)?;
    let shrunk = tape.mul(centered, kappa)?;
    tape.add_scalar(shrunk, 0.5)
}

/// Binary cross-entropy over positions where `mask` is true.
pub fn bce_loss(
    tape: &mut Tape,
    y_hat: Var,
    labels: &[u8],
    mask: &[bool],
    reduction: BceReduction,
) -> Result<Var, AutodiffError> {
    let shape = tape.shape(y_hat).to_vec();
    let n = tape.value(y_hat).numel();
    if labels.len() != n || mask.len() != n {
        return Err(AutodiffError::Shape(format!(
            "bce: {} labels and {} mask entries for {n} predictions",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(AutodiffError::Shape("bce: no valid positions".into()));
    }
    let pos: Vec<f64> = labels
        .iter()
        .zip(mask)
        .map(|(&r, &m)| if m && r == 1 { 1.0 } else { 0.0 })
        .collect();
    let neg: Vec<f64> = labels
        .iter()
        .zip(mask)
        .map(|(&r, &m)| if m && r == 0 { 1.0 } else { 0.0 })
        .collect();
    let pos = tape.constant(Tensor::new(shape.clone(), pos)?)?;
    let neg = tape.constant(Tensor::new(shape, neg)?)?;
    let log_p = tape.log(y_hat)?;
    let one_minus = tape.scalar_mul(y_hat, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(log_p, pos)?;
    let b = tape.mul(log_q, neg)?;
    let ll = tape.add(a, b)?;
    let total = tape.sum(ll)?;
    let scale = match reduction {
        BceReduction::Mean => -1.0 / count as f64,
        BceReduction::Sum => -1.0,
    };
    tape.scalar_mul(total, scale)
}

/// `bce + lambda1 * mse + lambda2 * nce`; absent terms count as zero.
pub fn total_loss(
    tape: &mut Tape,
    bce: Var,
    mse: Option<Var>,
    nce: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var, AutodiffError> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(AutodiffError::Domain {
            op: "total-loss".into(),
            detail: format!("loss weights must be >= 0, got {lambda1} and {lambda2}"),
        });
    }
    let mut total = bce;
    for (term, weight) in [(mse, lambda1), (nce, lambda2)] {
        if let Some(t) = term {
            if weight > 0.0 {
                let w = tape.scalar_mul(t, weight)?;
                total = tape.add(total, w)?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_score_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = PredictorWeights::new(&mut store, 2, 3, &mut rng);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let h = c(&mut tape, &[1, 2, 4], &[0.3; 8]);
        let q = c(&mut tape, &[1, 2, 2], &[-0.2; 4]);
        let (s, p) = score(&mut tape, &store, &w, h, q).unwrap();
        assert_eq!(tape.shape(s), &[1, 2]);
        assert_eq!(tape.value(s).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_of_ln3_is_three_quarters() {
        let mut tape = Tape::new();
        let s = c(&mut tape, &[1], &[3f64.ln()]);
        let p = tape.sigmoid(s).unwrap();
        assert!((tape.value(p).item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn random_weights_give_open_unit_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = PredictorWeights::new(&mut store, 3, 5, &mut rng);
        let mut tape = Tape::new();
        let h = tape
            .constant(Tensor::new(vec![2, 4, 6], (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap())
            .unwrap();
        let q = tape
            .constant(Tensor::new(vec![2, 4, 3], (0..24).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap())
            .unwrap();
        let (_, p) = score(&mut tape, &store, &w, h, q).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn confidence_cases() {
        let mut tape = Tape::new();
        let zero = c(&mut tape, &[1, 3], &[0.0; 3]);
        let k = confidence(&mut tape, zero, 0.4).unwrap();
        assert_eq!(tape.value(k).data(), &[1.0]);

        let sigma = c(&mut tape, &[1, 3], &[0.2, 1.5, 3.0]);
        let k = confidence(&mut tape, sigma, 0.0).unwrap();
        assert_eq!(tape.value(k).data(), &[1.0]);

        // gamma * ||sigma||_1 = ln 2
        let ln2 = std::f64::consts::LN_2;
        let sigma = c(&mut tape, &[2], &[ln2 / 2.0, ln2 / 2.0]);
        let k = confidence(&mut tape, sigma, 1.0).unwrap();
        assert!((tape.value(k).item() - 0.5).abs() < 1e-9);

        assert!(confidence(&mut tape, sigma, -0.1).is_err());
    }

    #[test]
    fn blend_cases() {
        let mut tape = Tape::new();
        let p = c(&mut tape, &[3], &[0.8, 0.3, 0.9]);
        let k = c(&mut tape, &[3], &[0.5, 1.0, 1e-12]);
        let y = blend(&mut tape, p, k).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] - 0.65).abs() < 1e-9);
        assert!((y[1] - 0.3).abs() < 1e-15);
        assert!((y[2] - 0.5).abs() < 1e-11);
    }

    #[test]
    fn blend_derivative_wrt_p_is_kappa() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(0.8)).unwrap();
        let k = tape.constant(Tensor::scalar(0.37)).unwrap();
        let y = blend(&mut tape, p, k).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.wrt(p).unwrap().item() - 0.37).abs() < 1e-15);
    }

    #[test]
    fn bce_cases() {
        let mut tape = Tape::new();
        let y = c(&mut tape, &[4], &[0.5; 4]);
        let l = bce_loss(&mut tape, y, &[1, 0, 1, 1], &[true; 4], BceReduction::Mean).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let y = c(&mut tape, &[2], &[1.0 - 1e-12, 1e-12]);
        let l = bce_loss(&mut tape, y, &[1, 0], &[true; 2], BceReduction::Mean).unwrap();
        assert!(tape.value(l).item() < 1e-11);

        let y = c(&mut tape, &[2], &[0.9, 0.2]);
        let l = bce_loss(&mut tape, y, &[1, 0], &[true; 2], BceReduction::Mean).unwrap();
        let expected = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-15);
        assert!((tape.value(l).item() - 0.164252).abs() < 1e-6);

        let l = bce_loss(&mut tape, y, &[1, 0], &[true; 2], BceReduction::Sum).unwrap();
        assert!((tape.value(l).item() - 2.0 * expected).abs() < 1e-15);
    }

    #[test]
    fn padding_contributes_nothing_to_bce() {
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::new(vec![3], vec![0.9, 0.2, 0.01]).unwrap()).unwrap();
        let l = bce_loss(&mut tape, y, &[1, 0, 1], &[true, true, false], BceReduction::Mean).unwrap();
        assert!((tape.value(l).item() - 0.164252).abs() < 1e-6);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(y).unwrap().data()[2], 0.0);
    }

    #[test]
    fn total_loss_cases() {
        let mut tape = Tape::new();
        let bce = c(&mut tape, &[], &[1.0]);
        let mse = c(&mut tape, &[], &[2.0]);
        let nce = c(&mut tape, &[], &[3.0]);
        let t = total_loss(&mut tape, bce, Some(mse), Some(nce), 0.15, 0.04).unwrap();
        assert!((tape.value(t).item() - 1.42).abs() < 1e-12);
        let t = total_loss(&mut tape, bce, Some(mse), Some(nce), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
        assert!(total_loss(&mut tape, bce, None, None, -0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn confidence_decreases_and_bounds_hold(
            p in 1e-6f64..(1.0 - 1e-6),
            a in prop::collection::vec(0.0f64..3.0, 4),
            extra in 1e-3f64..2.0,
            // keeps kappa >= 1e-6 so the bound is resolvable next to 0.5
            gamma in 1e-3f64..0.9,
        ) {
            let mut tape = Tape::new();
            let s1 = c(&mut tape, &[4], &a);
            let mut b = a.clone();
            b[0] += extra;
            let s2 = c(&mut tape, &[4], &b);
            let k1 = confidence(&mut tape, s1, gamma).unwrap();
            let k2 = confidence(&mut tape, s2, gamma).unwrap();
            prop_assert!(tape.value(k2).item() < tape.value(k1).item());
            let pv = c(&mut tape, &[], &[p]);
            let y = blend(&mut tape, pv, k1).unwrap();
            let (y, k) = (tape.value(y).item(), tape.value(k1).item());
            prop_assert!(k > 0.0 && k <= 1.0);
            prop_assert!((y - 0.5).abs() <= k * (p - 0.5).abs() + 1e-15);
            prop_assert!((y - 0.5).abs() < k / 2.0);
        }

        #[test]
        fn total_never_below_bce(b in 0.0f64..5.0, m in 0.0f64..5.0, n in 0.0f64..5.0,
                                 l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
            let mut tape = Tape::new();
            let bv = c(&mut tape, &[], &[b]);
            let mv = c(&mut tape, &[], &[m]);
            let nv = c(&mut tape, &[], &[n]);
            let t = total_loss(&mut tape, bv, Some(mv), Some(nv), l1, l2).unwrap();
            prop_assert!(tape.value(t).item() >= b);
        }
    }
}
