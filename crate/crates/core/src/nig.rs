//! Normal-Inverse-Gaussian parameterization, moments, distance and a
//! Monte-Carlo sampler.
//!
//! The training-path variance is `sqrt(delta) * alpha / (alpha^2 - beta^2)^0.75`.
//! This is not the textbook NIG variance `delta * alpha^2 / (alpha^2 - beta^2)^1.5`,
//! which is kept as [`textbook_variance`] and is what [`sample_nig`] reproduces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StandardUniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, AutodiffError, Tape, Var};

/// Added to `softplus(raw_alpha)` so that `alpha > 0`.
pub const ALPHA_EPS: f64 = 1e-7;
/// Keeps `|beta|` strictly below `alpha`.
pub const BETA_SCALE: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NigError {
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid NIG parameters: {0}")]
    InvalidParams(String),
    #[error("negative variance input")]
    NegativeVariance,
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NigParams {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<(), NigError> {
        let n = self.mu.len();
        if self.alpha.len() != n || self.beta.len() != n || self.delta.len() != n {
            return Err(NigError::LengthMismatch(format!(
                "mu {n}, alpha {}, beta {}, delta {}",
                self.alpha.len(),
                self.beta.len(),
                self.delta.len()
            )));
        }
        for i in 0..n {
            let (m, a, b, d) = (self.mu[i], self.alpha[i], self.beta[i], self.delta[i]);
            if ![m, a, b, d].iter().all(|v| v.is_finite()) {
                return Err(NigError::NonFinite("NigParams"));
            }
            if a <= 0.0 || d <= 0.0 || b.abs() >= a {
                return Err(NigError::InvalidParams(format!(
                    "dimension {i}: alpha={a}, beta={b}, delta={d}"
                )));
            }
        }
        Ok(())
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Maps unconstrained vectors onto valid NIG parameters.
pub fn constrain_params(
    raw_mu: &[f64],
    raw_alpha: &[f64],
    raw_beta: &[f64],
    raw_delta: &[f64],
) -> Result<NigParams, NigError> {
    let n = raw_mu.len();
    if raw_alpha.len() != n || raw_beta.len() != n || raw_delta.len() != n {
        return Err(NigError::LengthMismatch("raw channel lengths differ".into()));
    }
    let all = [raw_mu, raw_alpha, raw_beta, raw_delta];
    if all.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(NigError::NonFinite("constrain_params"));
    }
    let alpha: Vec<f64> = raw_alpha.iter().map(|&x| softplus(x) + ALPHA_EPS).collect();
    let beta = raw_beta
        .iter()
        .zip(&alpha)
        .map(|(&x, &a)| x.tanh() * a * BETA_SCALE)
        .collect();
    let delta = raw_delta.iter().map(|&x| elu(x) + 1.0).collect();
    Ok(NigParams {
        mu: raw_mu.to_vec(),
        alpha,
        beta,
        delta,
    })
}

fn gamma_sq(alpha: f64, beta: f64) -> Result<f64, NigError> {
    let g2 = alpha * alpha - beta * beta;
    if g2 > 0.0 {
        Ok(g2)
    } else {
        Err(NigError::InvalidParams(format!(
            "alpha^2 - beta^2 = {g2} is not positive"
        )))
    }
}

/// Mean and (training-path) variance of each coordinate.
pub fn moments(p: &NigParams) -> Result<NigMoments, NigError> {
    p.validate()?;
    let mut mean = Vec::with_capacity(p.dim());
    let mut var = Vec::with_capacity(p.dim());
    for i in 0..p.dim() {
        let g2 = gamma_sq(p.alpha[i], p.beta[i])?;
        let g = g2.sqrt();
        mean.push(p.mu[i] + p.delta[i] * p.beta[i] / g);
        var.push(p.delta[i].sqrt() * p.alpha[i] / g.powf(1.5));
    }
    Ok(NigMoments { mean, var })
}

/// Textbook NIG variance `delta * alpha^2 / gamma^3`.
pub fn textbook_variance(p: &NigParams) -> Result<Vec<f64>, NigError> {
    p.validate()?;
    (0..p.dim())
        .map(|i| {
            let g2 = gamma_sq(p.alpha[i], p.beta[i])?;
            Ok(p.delta[i] * p.alpha[i] * p.alpha[i] / (g2 * g2.sqrt()))
        })
        .collect()
}

/// `||mu_i - mu_j||^2 + ||sqrt(var_i) - sqrt(var_j)||^2`.
pub fn nig_distance(
    mu_i: &[f64],
    var_i: &[f64],
    mu_j: &[f64],
    var_j: &[f64],
) -> Result<f64, NigError> {
    let n = mu_i.len();
    if var_i.len() != n || mu_j.len() != n || var_j.len() != n {
        return Err(NigError::LengthMismatch("distance operands differ".into()));
    }
    if var_i.iter().chain(var_j).any(|&v| v < 0.0) {
        return Err(NigError::NegativeVariance);
    }
    let mean_part: f64 = mu_i.iter().zip(mu_j).map(|(a, b)| (a - b) * (a - b)).sum();
    let scale_part: f64 = var_i
        .iter()
        .zip(var_j)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok(mean_part + scale_part)
}

/// `1 / (1 + dist)`.
pub fn similarity(dist: f64) -> Result<f64, NigError> {
    if dist < 0.0 || dist.is_nan() {
        return Err(NigError::NegativeDistance(dist));
    }
    Ok(1.0 / (1.0 + dist))
}

/// Inverse-Gaussian draw by the Michael–Schucany–Haas transform.
fn sample_inverse_gaussian(mean: f64, shape: f64, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let y = z * z;
    let x = mean + mean * mean * y / (2.0 * shape)
        - mean / (2.0 * shape) * (4.0 * mean * shape * y + mean * mean * y * y).sqrt();
    let u: f64 = StandardUniform.sample(rng);
    if u <= mean / (mean + x) {
        x
    } else {
        mean * mean / x
    }
}

/// Draws `n` samples per coordinate as a normal variance-mean mixture:
/// `V ~ IG(delta / gamma, delta^2)`, `X | V ~ N(mu + beta V, V)`.
///
/// Verification oracle only.
pub fn sample_nig(p: &NigParams, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, NigError> {
    p.validate()?;
    if n == 0 {
        return Err(NigError::InvalidParams("sample count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p.dim())
        .map(|i| {
            let g = gamma_sq(p.alpha[i], p.beta[i])?.sqrt();
            let ig_mean = p.delta[i] / g;
            let ig_shape = p.delta[i] * p.delta[i];
            Ok((0..n)
                .map(|_| {
                    let v = sample_inverse_gaussian(ig_mean, ig_shape, &mut rng);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p.mu[i] + p.beta[i] * v + v.sqrt() * z
                })
                .collect())
        })
        .collect()
}

/// Constrained parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NigVars {
    pub mu: Var,
    pub alpha: Var,
    pub beta: Var,
    pub delta: Var,
}

/// Moment streams recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MomentVars {
    pub mean: Var,
    pub var: Var,
}

pub fn constrain_on_tape(
    tape: &mut Tape,
    raw_mu: Var,
    raw_alpha: Var,
    raw_beta: Var,
    raw_delta: Var,
) -> Result<NigVars, AutodiffError> {
    let alpha = tape.softplus(raw_alpha)?;
    let alpha = tape.add_scalar(alpha, ALPHA_EPS)?;
    let beta = tape.tanh(raw_beta)?;
    let beta = tape.mul(beta, alpha)?;
    let beta = tape.scalar_mul(beta, BETA_SCALE)?;
    let delta = tape.elu(raw_delta)?;
    let delta = tape.add_scalar(delta, 1.0)?;
    Ok(NigVars {
        mu: raw_mu,
        alpha,
        beta,
        delta,
    })
}

pub fn moments_on_tape(tape: &mut Tape, p: &NigVars) -> Result<MomentVars, AutodiffError> {
    let a2 = tape.square(p.alpha)?;
    let b2 = tape.square(p.beta)?;
    let g2 = tape.sub(a2, b2)?;
    let g = tape.sqrt(g2)?;
    let shift = tape.mul(p.delta, p.beta)?;
    let shift = tape.div(shift, g)?;
    let mean = tape.add(p.mu, shift)?;
    let sd = tape.sqrt(p.delta)?;
    let num = tape.mul(sd, p.alpha)?;
    let den = tape.powf(g2, 0.75)?;
    let var = tape.div(num, den)?;
    Ok(MomentVars { mean, var })
}
