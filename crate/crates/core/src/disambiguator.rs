//! Mastery state disambiguator: NIG-distance attention over the encoder's
//! moment streams, plus the denoising and contrastive auxiliary losses.
//!
//! Query position `t` carries the question asked at `t`; key slot `t` carries
//! the interaction at `t - 1` (slot 0 is a fixed start state), so the causal
//! mask `j <= t` lets the output at `t` see interactions strictly before `t`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

/// Moments of the start-of-sequence key slot.
pub const START_MEAN: f64 = 0.0;
pub const START_VAR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsdConfig {
    pub tau: f64,
    pub noise_level: f64,
    pub n_blocks: usize,
    pub hidden: usize,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            noise_level: 0.20,
            n_blocks: 2,
            hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Similarity `1 / (1 + Dist)` over projected mean and variance paths.
    Nig,
    /// Scaled dot product over the mean path.
    DotProduct,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register_normal(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
            rng,
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Two-layer ReLU network `width -> hidden -> width`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), width, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, store, h)
    }
}

/// Projection matrices of one attention block plus its feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq_mu: ParamId,
    pub wk_mu: ParamId,
    pub wv_mu: ParamId,
    pub wq_sigma: ParamId,
    pub wk_sigma: ParamId,
    pub wv_sigma: ParamId,
    pub ffn: Mlp,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut proj = |p: &str| store.register_normal(format!("{name}.{p}"), &[dim, dim], std, rng);
        let (wq_mu, wk_mu, wv_mu) = (proj("wq_mu"), proj("wk_mu"), proj("wv_mu"));
        let (wq_sigma, wk_sigma, wv_sigma) = (proj("wq_sigma"), proj("wk_sigma"), proj("wv_sigma"));
        let ffn = Mlp::new(store, &format!("{name}.ffn"), 2 * dim, hidden, rng);
        Self {
            wq_mu,
            wk_mu,
            wv_mu,
            wq_sigma,
            wk_sigma,
            wv_sigma,
            ffn,
        }
    }
}

/// A pair of `(batch, len, dim)` streams.
#[derive(Debug, Clone, Copy)]
pub struct Paths {
    pub mean: Var,
    pub var: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[V_mu || V_sigma]` weighted by the attention rows, `(batch, len, 2 dim)`.
    pub attended: Var,
    /// `(batch, len_q, len_k)` attention weights.
    pub weights: Var,
}

/// `mask[b, i, j] = j <= i`.
pub fn causal_mask(batch: usize, len: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(batch * len * len);
    for _ in 0..batch {
        for i in 0..len {
            mask.extend((0..len).map(|j| j <= i));
        }
    }
    mask
}

fn project(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId) -> Result<Var, AutodiffError> {
    let w = tape.param(store, w)?;
    tape.matmul(x, w)
}

/// Distance-based (or dot-product) attention of `query` over `keys`.
pub fn nig_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlock,
    query: Paths,
    keys: Paths,
    mask: &[bool],
    tau: f64,
    kind: AttentionKind,
) -> Result<AttentionOutput, AutodiffError> {
    let q_mu = project(tape, store, query.mean, block.wq_mu)?;
    let k_mu = project(tape, store, keys.mean, block.wk_mu)?;
    let v_mu = project(tape, store, keys.mean, block.wv_mu)?;
    let v_sigma = project(tape, store, keys.var, block.wv_sigma)?;

    let logits = match kind {
        AttentionKind::Nig => {
            let q_sigma = project(tape, store, query.var, block.wq_sigma)?;
            let k_sigma = project(tape, store, keys.var, block.wk_sigma)?;
            let q_sd = tape.softplus(q_sigma)?;
            let q_sd = tape.sqrt(q_sd)?;
            let k_sd = tape.softplus(k_sigma)?;
            let k_sd = tape.sqrt(k_sd)?;
            let d_mu = tape.pairwise_sq_dist(q_mu, k_mu)?;
            let d_sd = tape.pairwise_sq_dist(q_sd, k_sd)?;
            let dist = tape.add(d_mu, d_sd)?;
            let shifted = tape.add_scalar(dist, 1.0)?;
            let sim = tape.powf(shifted, -1.0)?;
            tape.scalar_mul(sim, 1.0 / tau)?
        }
        AttentionKind::DotProduct => {
            let dim = *tape.shape(q_mu).last().unwrap();
            let kt = tape.transpose_last2(k_mu)?;
            let scores = tape.matmul(q_mu, kt)?;
            tape.scalar_mul(scores, 1.0 / (dim as f64).sqrt())?
        }
    };
    let weights = tape.masked_softmax(logits, mask)?;
    let values = tape.concat_last(v_mu, v_sigma)?;
    let attended = tape.matmul(weights, values)?;
    Ok(AttentionOutput { attended, weights })
}

/// Mean squared reconstruction error of `denoiser(h + eps)` against `h`,
/// averaged over valid `(batch, len)` positions.
pub fn diffusion_denoise_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &Mlp,
    h: Var,
    valid: &[bool],
    noise_level: f64,
    rng: &mut R,
) -> Result<(Var, Var), AutodiffError> {
    let noisy = add_noise(tape, h, noise_level, rng)?;
    let loss = reconstruction_loss(tape, store, denoiser, noisy, h, valid)?;
    Ok((loss, noisy))
}

fn reconstruction_loss(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &Mlp,
    noisy: Var,
    clean: Var,
    valid: &[bool],
) -> Result<Var, AutodiffError> {
    let recon = denoiser.forward(tape, store, noisy)?;
    let diff = tape.sub(recon, clean)?;
    let sq = tape.square(diff)?;
    masked_mean(tape, sq, valid)
}

fn add_noise<R: Rng + ?Sized>(
    tape: &mut Tape,
    h: Var,
    noise_level: f64,
    rng: &mut R,
) -> Result<Var, AutodiffError> {
    if noise_level < 0.0 {
        return Err(AutodiffError::Domain {
            op: "noise".into(),
            detail: format!("noise level must be >= 0, got {noise_level}"),
        });
    }
    if noise_level == 0.0 {
        return Ok(h);
    }
    let shape = tape.shape(h).to_vec();
    let normal = Normal::new(0.0, noise_level).expect("positive noise level");
    let n: usize = shape.iter().product();
    let eps = Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())?;
    let eps = tape.constant(eps)?;
    tape.add(h, eps)
}

/// Row mask broadcast over the last axis.
fn expand_mask(valid: &[bool], width: usize) -> Vec<f64> {
    valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width))
        .collect()
}

/// Mean over entries whose `(batch, len)` position is valid.
fn masked_mean(tape: &mut Tape, x: Var, valid: &[bool]) -> Result<Var, AutodiffError> {
    let shape = tape.shape(x).to_vec();
    let width = *shape.last().unwrap();
    if valid.len() * width != tape.value(x).numel() {
        return Err(AutodiffError::Shape(format!(
            "validity mask of {} rows for shape {shape:?}",
            valid.len()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(AutodiffError::Shape("no valid positions".into()));
    }
    let m = tape.constant(Tensor::new(shape, expand_mask(valid, width))?)?;
    let masked = tape.mul(x, m)?;
    let total = tape.sum(masked)?;
    tape.scalar_mul(total, 1.0 / (count * width) as f64)
}

/// Masked mean over the time axis of `(batch, len, width)` -> `(batch, width)`.
fn pool_time(tape: &mut Tape, x: Var, valid: &[bool]) -> Result<Var, AutodiffError> {
    let shape = tape.shape(x).to_vec();
    let (batch, len, width) = (shape[0], shape[1], shape[2]);
    let m = tape.constant(Tensor::new(shape, expand_mask(valid, width))?)?;
    let masked = tape.mul(x, m)?;
    let summed = tape.sum_axis(masked, 1)?;
    let mut inv = Vec::with_capacity(batch * width);
    for b in 0..batch {
        let n = valid[b * len..(b + 1) * len].iter().filter(|&&v| v).count().max(1);
        inv.extend(std::iter::repeat_n(1.0 / n as f64, width));
    }
    let inv = tape.constant(Tensor::new(vec![batch, width], inv)?)?;
    tape.mul(summed, inv)
}

/// Per-sequence pooled `(mean, var)` of an `h`-shaped view.
pub fn pool_view(
    tape: &mut Tape,
    view: Var,
    dim: usize,
    valid: &[bool],
) -> Result<Paths, AutodiffError> {
    let mean = tape.slice_last(view, 0, dim)?;
    let var = tape.slice_last(view, dim, dim)?;
    let var = tape.softplus(var)?;
    Ok(Paths {
        mean: pool_time(tape, mean, valid)?,
        var: pool_time(tape, var, valid)?,
    })
}

/// In-batch contrastive loss with similarity `1 / (1 + Dist)`: row `i` scores
/// anchor `i` against every positive, the matching positive is the target.
pub fn nig_contrastive_loss(
    tape: &mut Tape,
    anchor: Paths,
    positive: Paths,
    tau: f64,
) -> Result<Var, AutodiffError> {
    let batch = tape.shape(anchor.mean)[0];
    if batch < 2 {
        return Err(AutodiffError::Shape(format!(
            "contrastive loss needs a batch of at least 2, got {batch}"
        )));
    }
    let a_sd = tape.sqrt(anchor.var)?;
    let p_sd = tape.sqrt(positive.var)?;
    let d_mu = tape.pairwise_sq_dist(anchor.mean, positive.mean)?;
    let d_sd = tape.pairwise_sq_dist(a_sd, p_sd)?;
    let dist = tape.add(d_mu, d_sd)?;
    let shifted = tape.add_scalar(dist, 1.0)?;
    let sim = tape.powf(shifted, -1.0)?;
    let logits = tape.scalar_mul(sim, 1.0 / tau)?;
    let probs = tape.masked_softmax(logits, &vec![true; batch * batch])?;
    let eye = tape.constant(Tensor::eye(batch))?;
    let diag = tape.mul(probs, eye)?;
    let target = tape.sum_axis(diag, 1)?;
    let logp = tape.log(target)?;
    let mean = tape.mean(logp)?;
    tape.scalar_mul(mean, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct MsdOutput {
    /// `(batch, len, 2 dim)` attended states.
    pub h: Var,
    /// `softplus` of the variance half of `h`, `(batch, len, dim)`.
    pub sigma_out: Var,
    pub aux_mse: Option<Var>,
    pub aux_nce: Option<Var>,
    /// Attention weights of every block.
    pub attention: Vec<Var>,
}

/// Which auxiliary terms to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuxTerms {
    pub denoise: bool,
    pub contrastive: bool,
}

#[derive(Debug, Clone)]
pub struct Disambiguator {
    pub cfg: MsdConfig,
    pub dim: usize,
    pub blocks: Vec<AttentionBlock>,
    pub denoiser: Mlp,
}

impl Disambiguator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, cfg: MsdConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.n_blocks)
            .map(|b| AttentionBlock::new(store, &format!("msd.block{b}"), dim, cfg.hidden, rng))
            .collect();
        let denoiser = Mlp::new(store, "msd.denoiser", 2 * dim, cfg.hidden, rng);
        Self {
            cfg,
            dim,
            blocks,
            denoiser,
        }
    }

    /// Runs the attention stack. `questions` are the query streams, `interactions`
    /// the unshifted interaction streams; `valid` marks non-padding positions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        questions: Paths,
        interactions: Paths,
        valid: &[bool],
        kind: AttentionKind,
        aux: AuxTerms,
        rng: &mut R,
    ) -> Result<MsdOutput, AutodiffError> {
        let shape = tape.shape(questions.mean).to_vec();
        let (batch, len) = (shape[0], shape[1]);
        let mask = causal_mask(batch, len);
        let start_var = if kind == AttentionKind::Nig { START_VAR } else { 0.0 };
        let mut keys = Paths {
            mean: tape.shift_time(interactions.mean, START_MEAN)?,
            var: tape.shift_time(interactions.var, start_var)?,
        };
        let mut query = questions;
        let mut attention = Vec::with_capacity(self.blocks.len());
        let mut h = None;
        for block in &self.blocks {
            let out = nig_attention(tape, store, block, query, keys, &mask, self.cfg.tau, kind)?;
            attention.push(out.weights);
            let residual = tape.concat_last(query.mean, query.var)?;
            let x = tape.add(residual, out.attended)?;
            let ff = block.ffn.forward(tape, store, x)?;
            let y = tape.add(x, ff)?;
            query = Paths {
                mean: tape.slice_last(y, 0, self.dim)?,
                var: tape.slice_last(y, self.dim, self.dim)?,
            };
            keys = query;
            h = Some(y);
        }
        let h = h.expect("at least one block");
        let sigma_half = tape.slice_last(h, self.dim, self.dim)?;
        let sigma_out = tape.softplus(sigma_half)?;

        let mut aux_mse = None;
        let mut aux_nce = None;
        if aux.denoise || aux.contrastive {
            let noisy = add_noise(tape, h, self.cfg.noise_level, rng)?;
            if aux.denoise {
                aux_mse = Some(reconstruction_loss(tape, store, &self.denoiser, noisy, h, valid)?);
            }
            if aux.contrastive && batch >= 2 {
                let anchor = pool_view(tape, noisy, self.dim, valid)?;
                let second = add_noise(tape, h, self.cfg.noise_level, rng)?;
                let positive = pool_view(tape, second, self.dim, valid)?;
                aux_nce = Some(nig_contrastive_loss(tape, anchor, positive, self.cfg.tau)?);
            }
        }
        Ok(MsdOutput {
            h,
            sigma_out,
            aux_mse,
            aux_nce,
            attention,
        })
    }
}
