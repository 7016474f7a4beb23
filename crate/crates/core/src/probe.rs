//! Trainable information probe over a frozen encoder.
//!
//! Stage 1 caches the frozen model's tap-layer grids and pooled
//! representations for every sample, plus per-channel whitening
//! statistics. Stage 2 attaches three small heads and trains them jointly
//! over episodes while the backbone stays bit-identical:
//!
//! - a mask network (two 1x1 convs, sigmoid output) reads the whitened
//!   stage-1 grid and produces a per-location, per-channel attenuation
//!   `alpha` in (0,1); masked locals `x' = x * alpha` drive the task loss
//!   through the frozen post-tap layers,
//! - the contrastive critic scores whitened unmasked locals against
//!   whitened stage-1 representations, so the total-information estimate
//!   is independent of the mask,
//! - the Gaussian bottleneck head is fit by maximum likelihood to predict
//!   a whitened projection of the stage-1 representation from each
//!   (whitened, unmasked) local. The conditional for a masked local
//!   interpolates between that fit and the standard-normal prior by the
//!   surviving signal fraction: `mu' = abar*mu`,
//!   `var' = abar^2*var + (1 - abar^2)` with `abar` the location's mean
//!   mask. Plain multiplication alone cannot carry an information cost
//!   (a refit conditional absorbs any uniform rescaling); the
//!   interpolation pins both limits exactly: alpha = 1 keeps the fitted
//!   conditional, alpha = 0 is the prior and zero KL.
//!
//! The optimization target is `max -l + alpha*nce - beta*kl` (the code
//! minimizes its negation plus the head-fitting likelihood term); the KL
//! pressure is routed to the mask, the likelihood fit to the heads, the
//! contrastive term to the critic.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::estimators::{
    infonce_lower_bound, infonce_on_tape, BottleneckConfig, BottleneckHead, Critic, CriticConfig,
};
use crate::maps::{InfoMap, MapKind};
use crate::nn::{write_file, ByteReader, EncoderConfig, FrozenEncoder};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::protonet::{episode_loss_from_reprs, ProtonetConfig};
use crate::tape::Var;
use crate::{Tape, Tensor};

/// Forced-saturation modes for tests and the mask-limit checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Learned,
    PinOne,
    PinZero,
}

/// Two stacked 1x1 convolutions with a relu between, squashed to (0,1).
#[derive(Debug, Clone)]
pub struct MaskNetwork {
    local_dim: usize,
    hidden: usize,
    pub mode: MaskMode,
    /// `w1 [hidden,C,1,1], b1, w2 [C,hidden,1,1], b2`.
    params: Vec<Tensor>,
}

impl MaskNetwork {
    pub fn new(local_dim: usize, hidden: usize, seed: u64) -> MaskNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 * a - a).with_requires_grad(true)
        };
        let params = vec![
            uniform(vec![hidden, local_dim, 1, 1], local_dim),
            Tensor::zeros(vec![hidden]).with_requires_grad(true),
            uniform(vec![local_dim, hidden, 1, 1], hidden),
            // Positive bias opens the mask at the start of training.
            Tensor::full(vec![local_dim], 2.0).with_requires_grad(true),
        ];
        MaskNetwork { local_dim, hidden, mode: MaskMode::Learned, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.input(p.clone().with_requires_grad(false)) })
            .collect()
    }

    /// Per-location, per-channel mask with the same shape as `locals`.
    /// Pinned modes return exact 0 or 1 grids.
    pub fn alpha_on_tape(&self, tape: &mut Tape, vars: &[Var], locals: Var) -> Result<Var> {
        let shape = tape.shape(locals).to_vec();
        match self.mode {
            MaskMode::PinOne => Ok(tape.input(Tensor::full(shape, 1.0))),
            MaskMode::PinZero => Ok(tape.input(Tensor::zeros(shape))),
            MaskMode::Learned => {
                let h = tape.conv2d(locals, vars[0], 1, 0)?;
                let b1 = tape.reshape(vars[1], vec![1, self.hidden, 1, 1])?;
                let h = tape.add(h, b1)?;
                let h = tape.relu(h)?;
                let a = tape.conv2d(h, vars[2], 1, 0)?;
                let b2 = tape.reshape(vars[3], vec![1, self.local_dim, 1, 1])?;
                let a = tape.add(a, b2)?;
                tape.sigmoid(a)
            }
        }
    }

    /// Plain-value mask for `[K, C, h, w]` locals.
    pub fn alpha(&self, locals: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.input(locals.clone());
        let a = self.alpha_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(a).clone())
    }
}

/// Elementwise occlusion `x' = x * alpha`.
pub fn apply_mask(locals: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if locals.shape() != alpha.shape() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} against locals {:?}",
            alpha.shape(),
            locals.shape()
        )));
    }
    let data = locals.data().iter().zip(alpha.data()).map(|(&x, &a)| x * a).collect();
    Tensor::new(locals.shape().to_vec(), data)
}

// ── stage-1 feature cache ───────────────────────────────────────────────

/// Frozen-model outputs keyed by dataset sample index.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    /// `[C_tap, h, w]` per sample.
    pub locals: Vec<Tensor>,
    /// `[repr_dim]` per sample.
    pub reprs: Vec<Tensor>,
    pub c_tap: usize,
    pub h: usize,
    pub w: usize,
    pub repr_dim: usize,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    /// Total cached reals: `K * (C_tap*h*w + repr_dim)`.
    pub fn total_reals(&self) -> usize {
        self.len() * (self.c_tap * self.h * self.w + self.repr_dim)
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("sample {bad} missing from stage-1 cache of {}", self.len())));
        }
        Ok(())
    }

    /// `[K, C_tap, h, w]` batch of cached grids.
    pub fn stack_locals(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let mut data = Vec::with_capacity(ids.len() * self.c_tap * self.h * self.w);
        for &id in ids {
            data.extend_from_slice(self.locals[id].data());
        }
        Tensor::new(vec![ids.len(), self.c_tap, self.h, self.w], data)
    }

    /// `[K, repr_dim]` batch of cached representations.
    pub fn stack_reprs(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let mut data = Vec::with_capacity(ids.len() * self.repr_dim);
        for &id in ids {
            data.extend_from_slice(self.reprs[id].data());
        }
        Tensor::new(vec![ids.len(), self.repr_dim], data)
    }
}

/// Run the frozen encoder over the whole dataset and cache tap grids and
/// representations. No gradients are retained.
pub fn stage1_collect(frozen: &FrozenEncoder, dataset: &Dataset) -> Result<FeatureCache> {
    let cfg = frozen.config();
    let (h, w) = cfg.tap_grid();
    let c_tap = cfg.tap_channels();
    let mut cache = FeatureCache {
        locals: Vec::with_capacity(dataset.len()),
        reprs: Vec::with_capacity(dataset.len()),
        c_tap,
        h,
        w,
        repr_dim: cfg.repr_dim,
    };
    let chunk = 32;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + chunk).min(dataset.len());
        let ids: Vec<usize> = (start..end).collect();
        let images = dataset.stack_images(&ids);
        let out = frozen.encoder_forward(&images)?;
        let per_local = c_tap * h * w;
        for (row, _) in ids.iter().enumerate() {
            let l = out.local_features.data()[row * per_local..(row + 1) * per_local].to_vec();
            cache.locals.push(Tensor::new(vec![c_tap, h, w], l)?);
            let r = out.representation.data()[row * cfg.repr_dim..(row + 1) * cfg.repr_dim].to_vec();
            cache.reprs.push(Tensor::new(vec![cfg.repr_dim], r)?);
        }
        start = end;
    }
    Ok(cache)
}

// ── probe state ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub score_dim: usize,
    pub bottleneck_dim: usize,
    pub critic_hidden: usize,
    pub mask_hidden: usize,
    pub alpha_weight: f64,
    pub beta_weight: f64,
    pub episodes: usize,
    pub lr: f64,
    /// Weight of the head-fitting likelihood term.
    pub nll_weight: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            score_dim: 64,
            bottleneck_dim: 32,
            critic_hidden: 128,
            mask_hidden: 32,
            alpha_weight: 1.0,
            beta_weight: 0.01,
            episodes: 1000,
            lr: 1e-3,
            nll_weight: 1.0,
        }
    }
}

/// Learnable parameters of the critic, bottleneck and mask, plus the
/// objective weights and the frozen target transform for the head fit.
#[derive(Debug, Clone)]
pub struct ProbeState {
    pub critic: Critic,
    pub bottleneck: BottleneckHead,
    pub mask: MaskNetwork,
    pub alpha_weight: f64,
    pub beta_weight: f64,
    pub nll_weight: f64,
    pub trained: bool,
    seed: u64,
    c_tap: usize,
    tap_h: usize,
    tap_w: usize,
    repr_dim: usize,
    /// Whitening statistics of the stage-1 representations.
    target_mean: Vec<f64>,
    target_scale: Vec<f64>,
    /// Per-channel whitening statistics of the stage-1 local features.
    local_mean: Vec<f64>,
    local_scale: Vec<f64>,
    /// Target transform `[repr_dim, d_b]`: head-fit targets are
    /// `(z - mean) @ target_proj`. `fit_stats` sets it to the whitened
    /// top-`d_b` principal components of the cached representations, so
    /// the target marginal is decorrelated, close to the standard-normal
    /// variational prior, and free of near-degenerate directions whose
    /// amplified noise would masquerade as information.
    target_proj: Tensor,
}

impl ProbeState {
    pub fn new(enc_cfg: &EncoderConfig, cfg: &ProbeConfig, seed: u64) -> Result<ProbeState> {
        if cfg.alpha_weight < 0.0 || cfg.beta_weight < 0.0 {
            return Err(Error::Config("alpha_weight and beta_weight must be non-negative".into()));
        }
        if cfg.bottleneck_dim == 0 || cfg.bottleneck_dim > enc_cfg.repr_dim {
            return Err(Error::Config(format!(
                "bottleneck_dim {} must lie in 1..={}",
                cfg.bottleneck_dim, enc_cfg.repr_dim
            )));
        }
        let (tap_h, tap_w) = enc_cfg.tap_grid();
        let c_tap = enc_cfg.tap_channels();
        let critic = Critic::new(
            CriticConfig {
                local_dim: c_tap,
                repr_dim: enc_cfg.repr_dim,
                hidden: cfg.critic_hidden,
                score_dim: cfg.score_dim,
            },
            seed ^ 0x637269746963,
        );
        let bottleneck = BottleneckHead::new(
            BottleneckConfig { local_dim: c_tap, bottleneck_dim: cfg.bottleneck_dim },
            seed ^ 0x686561647320,
        );
        let mask = MaskNetwork::new(c_tap, cfg.mask_hidden, seed ^ 0x6d61736b);
        let target_proj = orthonormal_projection(enc_cfg.repr_dim, cfg.bottleneck_dim, seed ^ 0x70726f6a)?;
        Ok(ProbeState {
            critic,
            bottleneck,
            mask,
            alpha_weight: cfg.alpha_weight,
            beta_weight: cfg.beta_weight,
            nll_weight: cfg.nll_weight,
            trained: false,
            seed,
            c_tap,
            tap_h,
            tap_w,
            repr_dim: enc_cfg.repr_dim,
            target_mean: vec![0.0; enc_cfg.repr_dim],
            target_scale: vec![1.0; enc_cfg.repr_dim],
            local_mean: vec![0.0; c_tap],
            local_scale: vec![1.0; c_tap],
            target_proj,
        })
    }

    pub fn tap_dims(&self) -> (usize, usize, usize) {
        (self.c_tap, self.tap_h, self.tap_w)
    }

    /// Freeze whitening statistics from the stage-1 cache: per-dimension
    /// for representations, per-channel over all positions for locals.
    pub fn fit_stats(&mut self, cache: &FeatureCache) -> Result<()> {
        if cache.is_empty() {
            return Err(Error::Contract("cannot fit whitening statistics on an empty cache".into()));
        }
        let d = self.repr_dim;
        let n = cache.len() as f64;
        let mut mean = vec![0.0f64; d];
        for r in &cache.reprs {
            for (m, &v) in mean.iter_mut().zip(r.data()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        // Full covariance: decorrelating the targets keeps any shared
        // dominant direction of the representation from being "predicted"
        // by every location with tiny residual variance, which would blow
        // the per-location KL up.
        let mut cov = vec![0.0f64; d * d];
        for r in &cache.reprs {
            for i in 0..d {
                let ci = r.data()[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += ci * (r.data()[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= n;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        self.target_scale = (0..d).map(|i| cov[i * d + i].sqrt().max(1e-6)).collect();
        let (evals, q) = jacobi_eigen(&cov, d);
        // Top principal directions, each scaled to unit variance. Only
        // genuinely stochastic directions qualify: a direction with
        // near-zero variance whitens into amplified numerical noise whose
        // tiny fit residuals masquerade as many nats, so the bottleneck
        // width clamps to the representation's effective rank.
        let d_b_max = self.target_proj.shape()[1];
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| evals[b].total_cmp(&evals[a]));
        let lmax = evals[order[0]].max(1e-12);
        let strong = order.iter().take_while(|&&k| evals[k] >= lmax * 1e-6).count();
        let d_b = d_b_max.min(strong).max(1);
        if d_b != self.bottleneck.config().bottleneck_dim {
            self.bottleneck = BottleneckHead::new(
                BottleneckConfig { local_dim: self.c_tap, bottleneck_dim: d_b },
                self.seed ^ 0x686561647320,
            );
        }
        let mut transform = vec![0.0f64; d * d_b];
        for (jb, &k) in order.iter().take(d_b).enumerate() {
            let scale = 1.0 / evals[k].sqrt();
            for i in 0..d {
                transform[i * d_b + jb] = q[i * d + k] * scale;
            }
        }
        self.target_mean = mean;
        self.target_proj = Tensor::new(vec![d, d_b], transform)?;

        let plane = self.tap_h * self.tap_w;
        let total = (cache.len() * plane) as f64;
        let mut lmean = vec![0.0f64; self.c_tap];
        for l in &cache.locals {
            for c in 0..self.c_tap {
                for &v in &l.data()[c * plane..(c + 1) * plane] {
                    lmean[c] += v;
                }
            }
        }
        for m in lmean.iter_mut() {
            *m /= total;
        }
        let mut lvar = vec![0.0f64; self.c_tap];
        for l in &cache.locals {
            for c in 0..self.c_tap {
                for &v in &l.data()[c * plane..(c + 1) * plane] {
                    lvar[c] += (v - lmean[c]) * (v - lmean[c]);
                }
            }
        }
        self.local_mean = lmean;
        self.local_scale = lvar.iter().map(|v| (v / total).sqrt().max(1e-6)).collect();
        Ok(())
    }

    /// `(x - mean)/sigma` per channel, as constants on the tape.
    fn whiten_locals_on_tape(&self, tape: &mut Tape, locals: Var) -> Result<Var> {
        let mu = tape.input(Tensor::new(vec![1, self.c_tap, 1, 1], self.local_mean.clone())?);
        let sd = tape.input(Tensor::new(vec![1, self.c_tap, 1, 1], self.local_scale.clone())?);
        let centered = tape.sub(locals, mu)?;
        tape.div(centered, sd)
    }

    /// Plain per-channel whitening of a `[K, C, h, w]` batch.
    pub fn whiten_locals(&self, locals: &Tensor) -> Result<Tensor> {
        let s = locals.shape().to_vec();
        if s.len() != 4 || s[1] != self.c_tap {
            return Err(Error::Dimension(format!("whiten_locals on {s:?}")));
        }
        let plane = s[2] * s[3];
        let mut out = locals.data().to_vec();
        for k in 0..s[0] {
            for c in 0..self.c_tap {
                let base = (k * self.c_tap + c) * plane;
                for v in &mut out[base..base + plane] {
                    *v = (*v - self.local_mean[c]) / self.local_scale[c];
                }
            }
        }
        Tensor::new(s, out)
    }

    /// Plain per-dimension whitening of a `[K, repr_dim]` batch.
    pub fn whiten_reprs(&self, reprs: &Tensor) -> Result<Tensor> {
        let s = reprs.shape().to_vec();
        if s.len() != 2 || s[1] != self.repr_dim {
            return Err(Error::Dimension(format!("whiten_reprs on {s:?}")));
        }
        let mut out = reprs.data().to_vec();
        for k in 0..s[0] {
            for j in 0..self.repr_dim {
                let v = &mut out[k * self.repr_dim + j];
                *v = (*v - self.target_mean[j]) / self.target_scale[j];
            }
        }
        Tensor::new(s, out)
    }

    /// Head-fit targets `[K, d_b]`: centered representations through the
    /// decorrelating transform.
    pub fn targets_for(&self, reprs: &Tensor) -> Result<Tensor> {
        let s = reprs.shape();
        if s.len() != 2 || s[1] != self.repr_dim {
            return Err(Error::Dimension(format!("targets for representations {s:?}")));
        }
        let k = s[0];
        let d_b = self.target_proj.shape()[1];
        let mut out = vec![0.0f64; k * d_b];
        let proj = self.target_proj.data();
        for row in 0..k {
            for (j, o) in out[row * d_b..(row + 1) * d_b].iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..self.repr_dim {
                    let z = reprs.data()[row * self.repr_dim + i] - self.target_mean[i];
                    acc += z * proj[i * d_b + j];
                }
                *o = acc;
            }
        }
        Tensor::new(vec![k, d_b], out)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, Q)` with eigenvectors in the columns of row-major `Q`.
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for r in p + 1..n {
                off += a[p * n + r] * a[p * n + r];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n - 1 {
            for r in p + 1..n {
                let apr = a[p * n + r];
                if apr.abs() < 1e-30 {
                    continue;
                }
                let theta = (a[r * n + r] - a[p * n + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akr = a[k * n + r];
                    a[k * n + p] = c * akp - s * akr;
                    a[k * n + r] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let ark = a[r * n + k];
                    a[p * n + k] = c * apk - s * ark;
                    a[r * n + k] = s * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkr;
                    q[k * n + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    let evals = (0..n).map(|i| a[i * n + i]).collect();
    (evals, q)
}

fn orthonormal_projection(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let mut data = vec![0.0f64; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &v) in b.iter().enumerate() {
            data[i * cols + j] = v;
        }
    }
    Tensor::new(vec![rows, cols], data)
}

// ── objective ───────────────────────────────────────────────────────────

/// Component values of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts {
    /// The maximization target `-l + alpha*nce - beta*kl`.
    pub total: f64,
    pub task_loss: f64,
    pub nce_bound: f64,
    pub kl_mean: f64,
    pub fit_nll: f64,
    pub mean_alpha: f64,
    pub accuracy: f64,
}

struct TapeObjective {
    minimize: Var,
    parts: ObjectiveParts,
}

/// KL of the bottleneck's conditional for masked locals against N(0, I):
/// the fitted per-location Gaussian interpolated toward the prior by the
/// location's mean mask `abar`. Exactly the fitted KL at `abar = 1`,
/// exactly zero at `abar = 0`. Returns `(mean, per-location grid)`.
fn masked_kl_on_tape(
    tape: &mut Tape,
    bottleneck: &BottleneckHead,
    head_vars: &[Var],
    x_std: Var,
    alpha: Var,
) -> Result<(Var, Var)> {
    let (mu_raw, logvar_raw) = bottleneck.heads_on_tape(tape, head_vars, x_std)?;
    let var_raw = tape.exp(logvar_raw)?;
    let abar = tape.mean_axis(alpha, 1)?;
    let gs = tape.shape(abar).to_vec();
    let abar = tape.reshape(abar, vec![gs[0], 1, gs[1], gs[2]])?;
    let mu_eff = tape.mul(mu_raw, abar)?;
    let a2 = tape.mul(abar, abar)?;
    let kept = tape.mul(var_raw, a2)?;
    let neg_a2 = tape.neg(a2)?;
    let floor = tape.add_scalar(neg_a2, 1.0)?;
    let var_eff = tape.add(kept, floor)?;
    let log_var_eff = tape.log(var_eff)?;
    let mu2 = tape.mul(mu_eff, mu_eff)?;
    let s = tape.add(mu2, var_eff)?;
    let s = tape.sub(s, log_var_eff)?;
    let s = tape.add_scalar(s, -1.0)?;
    let per_dim = tape.mul_scalar(s, 0.5)?;
    let grid = tape.sum_axis(per_dim, 1)?;
    let mean = tape.mean_all(grid)?;
    Ok((mean, grid))
}

fn objective_on_tape(
    tape: &mut Tape,
    frozen: &FrozenEncoder,
    state: &ProbeState,
    cache: &FeatureCache,
    episode: &Episode,
    critic_vars: &[Var],
    bottleneck_vars: &[Var],
    mask_vars: &[Var],
) -> Result<TapeObjective> {
    let ids = episode.all_ids();
    cache.check_ids(&ids)?;
    let n = state.tap_h * state.tap_w;
    let enc_vars = frozen.register(tape);
    let reprs_plain = cache.stack_reprs(&ids)?;
    let locals = tape.input(cache.stack_locals(&ids)?);
    let x_std = state.whiten_locals_on_tape(tape, locals)?;

    // Masked path: x' through the frozen remainder to z', then the task
    // loss.
    let alpha = state.mask.alpha_on_tape(tape, mask_vars, x_std)?;
    let x_masked = tape.mul(locals, alpha)?;
    let (_, z_masked) = frozen.forward_from_tap(tape, &enc_vars, x_masked)?;
    let (task_loss, accuracy) = episode_loss_from_reprs(tape, z_masked, episode)?;

    // Contrastive bound between (whitened) unmasked locals and stage-1
    // representations; trains only the critic.
    let rows = tape.spatial_to_rows(x_std)?;
    let reprs_std = tape.input(state.whiten_reprs(&reprs_plain)?);
    let scores = state.critic.scores_on_tape(tape, critic_vars, rows, reprs_std)?;
    let (nce, _) = infonce_on_tape(tape, scores, n)?;

    // KL of the masked conditional. Head parameters enter as constants
    // here so the beta pressure lands on the mask; the heads themselves
    // are anchored by the likelihood fit below.
    let head_consts = state.bottleneck.register(tape, false);
    let (kl_mean, _) = masked_kl_on_tape(tape, &state.bottleneck, &head_consts, x_std, alpha)?;

    // Likelihood fit of the heads on the unmasked whitened locals.
    let targets = tape.input(state.targets_for(&reprs_plain)?);
    let fit_nll = state.bottleneck.nll_on_tape(tape, bottleneck_vars, x_std, targets)?;

    // minimize l - alpha*nce + beta*kl + nll_weight*nll.
    let neg_nce = tape.mul_scalar(nce, -state.alpha_weight)?;
    let kl_term = tape.mul_scalar(kl_mean, state.beta_weight)?;
    let nll_term = tape.mul_scalar(fit_nll, state.nll_weight)?;
    let s1 = tape.add(task_loss, neg_nce)?;
    let s2 = tape.add(s1, kl_term)?;
    let minimize = tape.add(s2, nll_term)?;

    let task = tape.item(task_loss);
    let nce_v = tape.item(nce);
    let kl_v = tape.item(kl_mean);
    let alpha_data = tape.data(alpha);
    let mean_alpha = alpha_data.iter().sum::<f64>() / alpha_data.len() as f64;
    let parts = ObjectiveParts {
        total: -task + state.alpha_weight * nce_v - state.beta_weight * kl_v,
        task_loss: task,
        nce_bound: nce_v,
        kl_mean: kl_v,
        fit_nll: tape.item(fit_nll),
        mean_alpha,
        accuracy,
    };
    Ok(TapeObjective { minimize, parts })
}

/// Evaluate the combined objective for one episode without training.
pub fn milr_objective(
    episode: &Episode,
    frozen: &FrozenEncoder,
    state: &ProbeState,
    cache: &FeatureCache,
) -> Result<ObjectiveParts> {
    let mut tape = Tape::new();
    let critic_vars = state.critic.register(&mut tape, false);
    let bottleneck_vars = state.bottleneck.register(&mut tape, false);
    let mask_vars = state.mask.register(&mut tape, false);
    let obj = objective_on_tape(
        &mut tape,
        frozen,
        state,
        cache,
        episode,
        &critic_vars,
        &bottleneck_vars,
        &mask_vars,
    )?;
    Ok(obj.parts)
}

#[derive(Debug, Clone, Copy)]
pub struct MilrStat {
    pub step: usize,
    pub task_loss: f64,
    pub nce_bound: f64,
    pub kl_mean: f64,
    pub mean_alpha: f64,
}

/// `step,task_loss,nce_bound,kl_mean,mean_alpha` rows.
pub fn milr_log_csv(stats: &[MilrStat]) -> String {
    let mut out = String::from("step,task_loss,nce_bound,kl_mean,mean_alpha\n");
    for s in stats {
        out.push_str(&format!("{},{},{},{},{}\n", s.step, s.task_loss, s.nce_bound, s.kl_mean, s.mean_alpha));
    }
    out
}

/// Train critic, bottleneck and mask jointly over episodes against the
/// stage-1 cache. The backbone is never touched.
pub fn train_milr(
    dataset: &Dataset,
    frozen: &FrozenEncoder,
    cache: &FeatureCache,
    cfg: &ProbeConfig,
    episode_cfg: &ProtonetConfig,
    seed: u64,
    mask_mode: MaskMode,
) -> Result<(ProbeState, Vec<MilrStat>)> {
    if cache.len() != dataset.len() {
        return Err(Error::Contract(format!(
            "stage-1 cache holds {} samples, dataset has {}",
            cache.len(),
            dataset.len()
        )));
    }
    let mut state = ProbeState::new(frozen.config(), cfg, seed)?;
    state.mask.mode = mask_mode;
    state.fit_stats(cache)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d696c72);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut critic_opt = AdamState::for_params(state.critic.params());
    let mut bottleneck_opt = AdamState::for_params(state.bottleneck.params());
    let mut mask_opt = AdamState::for_params(state.mask.params());
    let mut stats = Vec::with_capacity(cfg.episodes);
    for step in 0..cfg.episodes {
        let episode = sample_episode(dataset, episode_cfg.n_way, episode_cfg.k_shot, episode_cfg.n_query, &mut rng)?;
        let mut tape = Tape::new();
        let critic_vars = state.critic.register(&mut tape, true);
        let bottleneck_vars = state.bottleneck.register(&mut tape, true);
        let mask_vars = state.mask.register(&mut tape, true);
        let obj = objective_on_tape(
            &mut tape,
            frozen,
            &state,
            cache,
            &episode,
            &critic_vars,
            &bottleneck_vars,
            &mask_vars,
        )
        .map_err(|e| Error::Training { episode: step, reason: e.to_string() })?;
        tape.backward(obj.minimize)
            .map_err(|e| Error::Training { episode: step, reason: e.to_string() })?;
        let critic_grads: Vec<Vec<f64>> = critic_vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        let bottleneck_grads: Vec<Vec<f64>> = bottleneck_vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        let mask_grads: Vec<Vec<f64>> = mask_vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        adam_step(state.critic.params_mut(), &critic_grads, &mut critic_opt, &adam)?;
        adam_step(state.bottleneck.params_mut(), &bottleneck_grads, &mut bottleneck_opt, &adam)?;
        adam_step(state.mask.params_mut(), &mask_grads, &mut mask_opt, &adam)?;
        stats.push(MilrStat {
            step,
            task_loss: obj.parts.task_loss,
            nce_bound: obj.parts.nce_bound,
            kl_mean: obj.parts.kl_mean,
            mean_alpha: obj.parts.mean_alpha,
        });
    }
    state.trained = true;
    Ok((state, stats))
}

// ── information maps ────────────────────────────────────────────────────

/// Contrast-set configuration for total-information maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    /// How many contrast batches to average.
    pub batches: usize,
    /// Samples per batch, including the explained sample.
    pub size: usize,
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig { batches: 8, size: 16, seed: 0 }
    }
}

fn require_trained(state: &ProbeState) -> Result<()> {
    if !state.trained {
        return Err(Error::Contract("probe has not been trained".into()));
    }
    Ok(())
}

/// Per-location contrastive log-ratio terms for one sample, averaged over
/// seeded contrast batches drawn from the cache.
pub fn total_information_map(
    state: &ProbeState,
    cache: &FeatureCache,
    sample_id: usize,
    contrast: &ContrastConfig,
) -> Result<InfoMap> {
    require_trained(state)?;
    cache.check_ids(&[sample_id])?;
    if contrast.batches == 0 || contrast.size == 0 || contrast.size > cache.len() {
        return Err(Error::Config(format!(
            "contrast config {}x{} against cache of {}",
            contrast.batches,
            contrast.size,
            cache.len()
        )));
    }
    let n = state.tap_h * state.tap_w;
    let mut rng = ChaCha8Rng::seed_from_u64(contrast.seed ^ (sample_id as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut acc = vec![0.0f64; n];
    for _ in 0..contrast.batches {
        let mut ids = vec![sample_id];
        let mut pool: Vec<usize> = (0..cache.len()).filter(|&i| i != sample_id).collect();
        for slot in 0..contrast.size - 1 {
            let j = rng.random_range(slot..pool.len());
            pool.swap(slot, j);
            ids.push(pool[slot]);
        }
        let locals = state.whiten_locals(&cache.stack_locals(&ids)?)?;
        let reprs = state.whiten_reprs(&cache.stack_reprs(&ids)?)?;
        let block = state.critic.score_matrix(&locals, &reprs)?;
        let terms = crate::estimators::infonce_terms(&block)?;
        for (a, t) in acc.iter_mut().zip(&terms[..n]) {
            *a += t;
        }
    }
    for a in acc.iter_mut() {
        *a /= contrast.batches as f64;
    }
    InfoMap::new(acc, state.tap_h, state.tap_w, MapKind::Total, sample_id)
}

/// Scalar contrastive bound over one contrast batch; the mean of the
/// per-location map taken over all samples of the same batch equals this
/// value exactly.
pub fn total_information_bound(
    state: &ProbeState,
    cache: &FeatureCache,
    ids: &[usize],
) -> Result<f64> {
    require_trained(state)?;
    let locals = state.whiten_locals(&cache.stack_locals(ids)?)?;
    let reprs = state.whiten_reprs(&cache.stack_reprs(ids)?)?;
    let block = state.critic.score_matrix(&locals, &reprs)?;
    infonce_lower_bound(&block)
}

/// Upper-bound evaluation of the masked conditional for a batch of cached
/// grids: `(mean KL in nats, per-location grid [K, h, w])`. This is the
/// quantity the objective's KL term and the decision maps both report.
pub fn masked_vib_bound(state: &ProbeState, locals: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let head_vars = state.bottleneck.register(&mut tape, false);
    let mask_vars = state.mask.register(&mut tape, false);
    let x = tape.input(locals.clone());
    let x_std = state.whiten_locals_on_tape(&mut tape, x)?;
    let alpha = state.mask.alpha_on_tape(&mut tape, &mask_vars, x_std)?;
    let (mean, grid) = masked_kl_on_tape(&mut tape, &state.bottleneck, &head_vars, x_std, alpha)?;
    Ok((tape.item(mean), tape.value(grid).clone()))
}

/// Per-location KL of the bottleneck's conditional on the sample's masked
/// locals: the information that survives the mask at each position.
pub fn decision_information_map(state: &ProbeState, cache: &FeatureCache, sample_id: usize) -> Result<InfoMap> {
    require_trained(state)?;
    cache.check_ids(&[sample_id])?;
    let locals = cache.stack_locals(&[sample_id])?;
    let (_, grid) = masked_vib_bound(state, &locals)?;
    InfoMap::new(grid.data().to_vec(), state.tap_h, state.tap_w, MapKind::Decision, sample_id)
}

/// Elementwise `total - decision`. Negative entries are retained here;
/// rendering clamps them at zero.
pub fn redundancy_map(total: &InfoMap, decision: &InfoMap) -> Result<InfoMap> {
    if total.height != decision.height || total.width != decision.width {
        return Err(Error::Dimension(format!(
            "redundancy of {}x{} against {}x{}",
            total.height, total.width, decision.height, decision.width
        )));
    }
    let values = total.values.iter().zip(&decision.values).map(|(t, d)| t - d).collect();
    InfoMap::new(values, total.height, total.width, MapKind::Redundant, total.sample_id)
}

// ── checkpoint io ───────────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"IMPRB001";

impl ProbeState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let critic_cfg = self.critic.config();
        let bott_cfg = self.bottleneck.config();
        for v in [
            self.c_tap,
            self.tap_h,
            self.tap_w,
            self.repr_dim,
            critic_cfg.hidden,
            critic_cfg.score_dim,
            bott_cfg.bottleneck_dim,
            self.mask.hidden,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in [self.alpha_weight, self.beta_weight, self.nll_weight] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.push(self.trained as u8);
        buf.push(match self.mask.mode {
            MaskMode::Learned => 0,
            MaskMode::PinOne => 1,
            MaskMode::PinZero => 2,
        });
        for v in &self.target_mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.target_scale {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.local_mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.local_scale {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.target_proj.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let all_params = self
            .critic
            .params()
            .iter()
            .chain(self.bottleneck.params())
            .chain(self.mask.params());
        let total: usize = all_params.clone().map(|p| p.numel()).sum();
        buf.extend_from_slice(&(total as u64).to_le_bytes());
        for p in all_params {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(path, &buf)
    }

    pub fn load(path: &Path) -> Result<ProbeState> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(MAGIC)?;
        let c_tap = r.u32()? as usize;
        let tap_h = r.u32()? as usize;
        let tap_w = r.u32()? as usize;
        let repr_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let score_dim = r.u32()? as usize;
        let bottleneck_dim = r.u32()? as usize;
        let mask_hidden = r.u32()? as usize;
        let alpha_weight = r.f64()?;
        let beta_weight = r.f64()?;
        let nll_weight = r.f64()?;
        let seed = r.u64()?;
        let trained = r.u8()? != 0;
        let mode = match r.u8()? {
            0 => MaskMode::Learned,
            1 => MaskMode::PinOne,
            2 => MaskMode::PinZero,
            _ => return Err(r.bad("unknown mask mode")),
        };
        let mut target_mean = vec![0.0f64; repr_dim];
        for v in target_mean.iter_mut() {
            *v = r.f64()?;
        }
        let mut target_scale = vec![0.0f64; repr_dim];
        for v in target_scale.iter_mut() {
            *v = r.f64()?;
        }
        let mut local_mean = vec![0.0f64; c_tap];
        for v in local_mean.iter_mut() {
            *v = r.f64()?;
        }
        let mut local_scale = vec![0.0f64; c_tap];
        for v in local_scale.iter_mut() {
            *v = r.f64()?;
        }
        let mut proj = vec![0.0f64; repr_dim * bottleneck_dim];
        for v in proj.iter_mut() {
            *v = r.f64()?;
        }
        let mut critic = Critic::new(
            CriticConfig { local_dim: c_tap, repr_dim, hidden, score_dim },
            0,
        );
        let mut bottleneck = BottleneckHead::new(BottleneckConfig { local_dim: c_tap, bottleneck_dim }, 0);
        let mut mask = MaskNetwork::new(c_tap, mask_hidden, 0);
        mask.mode = mode;
        let total = r.u64()? as usize;
        let expect: usize = critic
            .params()
            .iter()
            .chain(bottleneck.params())
            .chain(mask.params())
            .map(|p| p.numel())
            .sum();
        if total != expect {
            return Err(r.bad(&format!("parameter count {total}, expected {expect}")));
        }
        for p in critic
            .params_mut()
            .iter_mut()
            .chain(bottleneck.params_mut())
            .chain(mask.params_mut())
        {
            for v in p.data_mut() {
                *v = r.f64()?;
            }
        }
        r.expect_eof()?;
        Ok(ProbeState {
            critic,
            bottleneck,
            mask,
            alpha_weight,
            beta_weight,
            nll_weight,
            trained,
            seed,
            c_tap,
            tap_h,
            tap_w,
            repr_dim,
            target_mean,
            target_scale,
            local_mean,
            local_scale,
            target_proj: Tensor::new(vec![repr_dim, bottleneck_dim], proj)?,
        })
    }
}
