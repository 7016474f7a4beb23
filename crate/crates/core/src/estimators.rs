//! The two information bounds.
//!
//! A separable critic scores every local feature against every
//! representation in a batch; the contrastive lower bound is the mean
//! log-ratio of each positive score against its column's log-sum-exp,
//! plus the log of the contrast-set size. The bound therefore saturates
//! at `ln(N*K)` and is exactly zero for constant scores.
//!
//! The upper bound parameterizes `p(z|x_i)` as a diagonal Gaussian via two
//! 1x1 convolutions and evaluates the closed-form KL against a standard
//! normal: `KL = 0.5 * sum_d (mu^2 + var - log var - 1)`, one value per
//! spatial location.
//!
//! A bivariate-Gaussian pair oracle with analytic mutual information
//! `-0.5 ln(1 - rho^2)` calibrates both estimators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tape::Var;
use crate::{Tape, Tensor};

/// Pre-`exp` log-variances are clamped to this symmetric band.
pub const LOGVAR_CLAMP: f64 = 10.0;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 * a - a).with_requires_grad(true)
}

// ── critic ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticConfig {
    pub local_dim: usize,
    pub repr_dim: usize,
    pub hidden: usize,
    pub score_dim: usize,
}

/// Separable critic: two two-layer perceptrons project local features and
/// representations into a shared score space; the score is their dot
/// product.
#[derive(Debug, Clone)]
pub struct Critic {
    cfg: CriticConfig,
    /// `l_w1, l_b1, l_w2, l_b2, r_w1, r_b1, r_w2, r_b2`, weights stored
    /// `[in, out]` so rows multiply directly.
    params: Vec<Tensor>,
}

impl Critic {
    pub fn new(cfg: CriticConfig, seed: u64) -> Critic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            uniform(&mut rng, vec![cfg.local_dim, cfg.hidden], cfg.local_dim),
            Tensor::zeros(vec![cfg.hidden]).with_requires_grad(true),
            uniform(&mut rng, vec![cfg.hidden, cfg.score_dim], cfg.hidden),
            Tensor::zeros(vec![cfg.score_dim]).with_requires_grad(true),
            uniform(&mut rng, vec![cfg.repr_dim, cfg.hidden], cfg.repr_dim),
            Tensor::zeros(vec![cfg.hidden]).with_requires_grad(true),
            uniform(&mut rng, vec![cfg.hidden, cfg.score_dim], cfg.hidden),
            Tensor::zeros(vec![cfg.score_dim]).with_requires_grad(true),
        ];
        Critic { cfg, params }
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
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

    fn mlp(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let p = tape.matmul(h, w2)?;
        tape.add(p, b2)
    }

    /// Score matrix `[M, K]` for local-feature rows `[M, local_dim]`
    /// against representations `[K, repr_dim]`: scaled dot product of the
    /// two projections (the `1/sqrt(d_s)` keeps initial scores O(1)).
    pub fn scores_on_tape(&self, tape: &mut Tape, vars: &[Var], local_rows: Var, reprs: Var) -> Result<Var> {
        let lp = Self::mlp(tape, local_rows, vars[0], vars[1], vars[2], vars[3])?;
        let rp = Self::mlp(tape, reprs, vars[4], vars[5], vars[6], vars[7])?;
        let rpt = tape.transpose2d(rp)?;
        let raw = tape.matmul(lp, rpt)?;
        tape.mul_scalar(raw, 1.0 / (self.cfg.score_dim as f64).sqrt())
    }

    /// Full score block for a `[K, C, h, w]` local grid and `[K, repr_dim]`
    /// representations. Row order is `(sample, y, x)`; `positive_of` maps
    /// each row to its own sample's column.
    pub fn score_matrix(&self, locals: &Tensor, reprs: &Tensor) -> Result<ScoreBlock> {
        let ls = locals.shape();
        let rs = reprs.shape();
        if ls.len() != 4 || rs.len() != 2 || ls[0] != rs[0] {
            return Err(Error::Dimension(format!(
                "score_matrix wants [K,C,h,w] locals and [K,d] reprs, got {ls:?} and {rs:?}"
            )));
        }
        if ls[1] != self.cfg.local_dim || rs[1] != self.cfg.repr_dim {
            return Err(Error::Dimension(format!(
                "critic dims ({}, {}) against locals {ls:?}, reprs {rs:?}",
                self.cfg.local_dim, self.cfg.repr_dim
            )));
        }
        let n = ls[2] * ls[3];
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let l = tape.input(locals.clone());
        let rows = tape.spatial_to_rows(l)?;
        let r = tape.input(reprs.clone());
        let scores = self.scores_on_tape(&mut tape, &vars, rows, r)?;
        ScoreBlock::new(tape.value(scores).clone(), n)
    }
}

/// Scores of every local feature against every representation in a batch,
/// with each row's positive column.
#[derive(Debug, Clone)]
pub struct ScoreBlock {
    /// `[(N*K), K]`.
    pub scores: Tensor,
    /// Row index -> column of that row's own sample.
    pub positive_of: Vec<usize>,
    /// `N`, locals per sample.
    pub n_locals_per_sample: usize,
}

impl ScoreBlock {
    /// Rows must be sample-major: row `i` belongs to sample `i / n`.
    pub fn new(scores: Tensor, n_locals_per_sample: usize) -> Result<ScoreBlock> {
        let s = scores.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("score block wants a matrix, got {s:?}")));
        }
        let (m, k) = (s[0], s[1]);
        if n_locals_per_sample == 0 || m != n_locals_per_sample * k {
            return Err(Error::Dimension(format!(
                "score block {m}x{k} does not hold {n_locals_per_sample} locals per sample"
            )));
        }
        let positive_of = (0..m).map(|i| i / n_locals_per_sample).collect();
        Ok(ScoreBlock { scores, positive_of, n_locals_per_sample })
    }

    pub fn n_rows(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn n_cols(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// Per-positive log-ratio terms. Term `i` is
/// `score(i, pos(i)) - logsumexp_m score(m, pos(i)) + ln(N*K)`,
/// computed via log-sum-exp, never by exponentiating raw scores.
pub fn infonce_terms(block: &ScoreBlock) -> Result<Vec<f64>> {
    if !block.scores.is_finite() {
        return Err(Error::Estimation("non-finite scores in score block".into()));
    }
    let (m, k) = (block.n_rows(), block.n_cols());
    let data = block.scores.data();
    let ln_m = (m as f64).ln();
    // Column-wise stable log-sum-exp over all rows.
    let mut lse = vec![0.0f64; k];
    for (j, l) in lse.iter_mut().enumerate() {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..m {
            mx = mx.max(data[i * k + j]);
        }
        let mut acc = 0.0;
        for i in 0..m {
            acc += (data[i * k + j] - mx).exp();
        }
        *l = mx + acc.ln();
    }
    Ok(block
        .positive_of
        .iter()
        .enumerate()
        .map(|(i, &j)| data[i * k + j] - lse[j] + ln_m)
        .collect())
}

/// Contrastive lower bound in nats: the mean of [`infonce_terms`].
pub fn infonce_lower_bound(block: &ScoreBlock) -> Result<f64> {
    let terms = infonce_terms(block)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Tape version of the bound for training: returns `(bound, terms)`.
pub fn infonce_on_tape(tape: &mut Tape, scores: Var, n_locals_per_sample: usize) -> Result<(Var, Var)> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != n_locals_per_sample * s[1] {
        return Err(Error::Dimension(format!(
            "infonce_on_tape scores {s:?} with {n_locals_per_sample} locals per sample"
        )));
    }
    let (m, k) = (s[0], s[1]);
    let mut indicator = vec![0.0f64; m * k];
    for i in 0..m {
        indicator[i * k + i / n_locals_per_sample] = 1.0;
    }
    let ind = tape.input(Tensor::new(vec![m, k], indicator)?);
    let picked = tape.mul(scores, ind)?;
    let pos = tape.sum_axis(picked, 1)?;
    let lse_cols = tape.logsumexp(scores, 0)?;
    let lse_col_mat = tape.reshape(lse_cols, vec![k, 1])?;
    let lse_rows = tape.matmul(ind, lse_col_mat)?;
    let lse_rows = tape.reshape(lse_rows, vec![m])?;
    let diff = tape.sub(pos, lse_rows)?;
    let terms = tape.add_scalar(diff, (m as f64).ln())?;
    let bound = tape.mean_all(terms)?;
    Ok((bound, terms))
}

// ── variational bottleneck head ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleneckConfig {
    pub local_dim: usize,
    pub bottleneck_dim: usize,
}

/// `mean_head` and `logvar_head`: 1x1 convolutions mapping each local
/// feature vector to a diagonal Gaussian `(mu_i, log var_i)`.
#[derive(Debug, Clone)]
pub struct BottleneckHead {
    cfg: BottleneckConfig,
    /// `mean_w [d_b,C,1,1], mean_b [d_b], logvar_w, logvar_b`.
    params: Vec<Tensor>,
}

impl BottleneckHead {
    pub fn new(cfg: BottleneckConfig, seed: u64) -> BottleneckHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            uniform(&mut rng, vec![cfg.bottleneck_dim, cfg.local_dim, 1, 1], cfg.local_dim),
            Tensor::zeros(vec![cfg.bottleneck_dim]).with_requires_grad(true),
            uniform(&mut rng, vec![cfg.bottleneck_dim, cfg.local_dim, 1, 1], cfg.local_dim),
            Tensor::zeros(vec![cfg.bottleneck_dim]).with_requires_grad(true),
        ];
        BottleneckHead { cfg, params }
    }

    pub fn config(&self) -> &BottleneckConfig {
        &self.cfg
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

    /// `(mu, clamped logvar)` grids `[K, d_b, h, w]` for locals `[K, C, h, w]`.
    pub fn heads_on_tape(&self, tape: &mut Tape, vars: &[Var], locals: Var) -> Result<(Var, Var)> {
        let d_b = self.cfg.bottleneck_dim;
        let mu = tape.conv2d(locals, vars[0], 1, 0)?;
        let mb = tape.reshape(vars[1], vec![1, d_b, 1, 1])?;
        let mu = tape.add(mu, mb)?;
        let lv = tape.conv2d(locals, vars[2], 1, 0)?;
        let lb = tape.reshape(vars[3], vec![1, d_b, 1, 1])?;
        let lv = tape.add(lv, lb)?;
        let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        Ok((mu, lv))
    }

    /// Plain evaluation: mean KL (nats) and the per-location grid `[K,h,w]`.
    pub fn vib_upper_bound(&self, locals: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.input(locals.clone());
        let (mu, lv) = self.heads_on_tape(&mut tape, &vars, x)?;
        let (mean, grid) = kl_on_tape(&mut tape, mu, lv)?;
        Ok((tape.item(mean), tape.value(grid).clone()))
    }

    /// Gaussian negative log likelihood of per-sample targets `[K, d_b]`
    /// under the heads applied to `locals`; the fitting signal for
    /// `p(z|x_i)`.
    pub fn nll_on_tape(&self, tape: &mut Tape, vars: &[Var], locals: Var, targets: Var) -> Result<Var> {
        let (mu, lv) = self.heads_on_tape(tape, vars, locals)?;
        let shape = tape.shape(mu).to_vec();
        let (k, d_b) = (shape[0], shape[1]);
        let t = tape.reshape(targets, vec![k, d_b, 1, 1])?;
        let t = tape.broadcast_to(t, shape.clone())?;
        let diff = tape.sub(t, mu)?;
        let sq = tape.mul(diff, diff)?;
        let neg_lv = tape.neg(lv)?;
        let prec = tape.exp(neg_lv)?;
        let maha = tape.mul(sq, prec)?;
        let inner = tape.add(lv, maha)?;
        let inner = tape.add_scalar(inner, (2.0 * std::f64::consts::PI).ln())?;
        let half = tape.mul_scalar(inner, 0.5)?;
        let per_loc = tape.sum_axis(half, 1)?;
        tape.mean_all(per_loc)
    }
}

/// Closed-form KL against a standard normal from `(mu, logvar)` grids:
/// returns the scalar mean and the per-location grid `[K, h, w]`.
pub fn kl_on_tape(tape: &mut Tape, mu: Var, logvar: Var) -> Result<(Var, Var)> {
    let var = tape.exp(logvar)?;
    let mu2 = tape.mul(mu, mu)?;
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0)?;
    let per_dim = tape.mul_scalar(s, 0.5)?;
    let grid = tape.sum_axis(per_dim, 1)?;
    let mean = tape.mean_all(grid)?;
    Ok((mean, grid))
}

// ── Gaussian pair oracle ────────────────────────────────────────────────

/// Correlated standard-normal pairs with known mutual information.
#[derive(Debug, Clone)]
pub struct GaussianPairs {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub rho: f64,
    pub analytic_mi: f64,
}

/// `-0.5 ln(1 - rho^2)`, nats.
pub fn analytic_gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

pub(crate) fn draw_pair(rng: &mut ChaCha8Rng, rho: f64) -> (f64, f64) {
    // Box-Muller; u1 shifted into (0, 1].
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let z = r * (2.0 * std::f64::consts::PI * u2).cos();
    let w = r * (2.0 * std::f64::consts::PI * u2).sin();
    (z, rho * z + (1.0 - rho * rho).sqrt() * w)
}

pub fn gaussian_pair_oracle(rho: f64, n_samples: usize, seed: u64) -> Result<GaussianPairs> {
    if !(rho.is_finite() && rho.abs() < 1.0) {
        return Err(Error::Config(format!("correlation {rho} must satisfy |rho| < 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (x, y) = draw_pair(&mut rng, rho);
        xs.push(x);
        ys.push(y);
    }
    Ok(GaussianPairs { xs, ys, rho, analytic_mi: analytic_gaussian_mi(rho) })
}

// ── calibration trainers ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct CalibrationConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_batches: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { steps: 5000, batch: 64, lr: 1e-3, eval_batches: 400 }
    }
}

/// Train a critic on oracle pairs (one coordinate as the "local", the
/// other as the "representation") and report the converged bound averaged
/// over held-out batches.
pub fn train_critic_on_pairs(rho: f64, cal: &CalibrationConfig, seed: u64) -> Result<(Critic, f64)> {
    if rho.abs() >= 1.0 {
        return Err(Error::Config(format!("correlation {rho} must satisfy |rho| < 1")));
    }
    let cfg = CriticConfig { local_dim: 1, repr_dim: 1, hidden: 128, score_dim: 64 };
    let mut critic = Critic::new(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061697273); // pair stream
    let mut state = AdamState::for_params(critic.params());
    let adam = AdamConfig::with_lr(cal.lr);
    for step in 0..cal.steps {
        let (xs, ys) = batch_pairs(&mut rng, rho, cal.batch);
        let mut tape = Tape::new();
        let vars = critic.register(&mut tape, true);
        let x = tape.input(Tensor::new(vec![cal.batch, 1], xs)?);
        let y = tape.input(Tensor::new(vec![cal.batch, 1], ys)?);
        let scores = critic.scores_on_tape(&mut tape, &vars, x, y)?;
        let (bound, _) = infonce_on_tape(&mut tape, scores, 1)?;
        let loss = tape.neg(bound)?;
        tape.backward(loss).map_err(|e| Error::Training { episode: step, reason: e.to_string() })?;
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        adam_step(critic.params_mut(), &grads, &mut state, &adam)?;
    }
    let bound = eval_critic_on_pairs(&critic, rho, cal, seed ^ 0x6576616c)?;
    Ok((critic, bound))
}

/// Held-out estimate of the bound for a trained critic.
pub fn eval_critic_on_pairs(critic: &Critic, rho: f64, cal: &CalibrationConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..cal.eval_batches {
        let (xs, ys) = batch_pairs(&mut rng, rho, cal.batch);
        let locals = Tensor::new(vec![cal.batch, 1, 1, 1], xs)?;
        let reprs = Tensor::new(vec![cal.batch, 1], ys)?;
        let block = critic.score_matrix(&locals, &reprs)?;
        acc += infonce_lower_bound(&block)?;
    }
    Ok(acc / cal.eval_batches as f64)
}

/// Fit the Gaussian head to `p(z|x)` by maximum likelihood against the
/// frozen second coordinate, then report the KL upper bound on held-out
/// batches. For jointly Gaussian pairs the true conditional is in the
/// head's family, so the bound converges onto the analytic MI.
pub fn train_bottleneck_on_pairs(rho: f64, cal: &CalibrationConfig, seed: u64) -> Result<(BottleneckHead, f64)> {
    if rho.abs() >= 1.0 {
        return Err(Error::Config(format!("correlation {rho} must satisfy |rho| < 1")));
    }
    let cfg = BottleneckConfig { local_dim: 1, bottleneck_dim: 1 };
    let mut head = BottleneckHead::new(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7669627061697273);
    let mut state = AdamState::for_params(head.params());
    let adam = AdamConfig::with_lr(cal.lr);
    for step in 0..cal.steps {
        let (xs, ys) = batch_pairs(&mut rng, rho, cal.batch);
        let mut tape = Tape::new();
        let vars = head.register(&mut tape, true);
        let x = tape.input(Tensor::new(vec![cal.batch, 1, 1, 1], xs)?);
        let t = tape.input(Tensor::new(vec![cal.batch, 1], ys)?);
        let loss = head.nll_on_tape(&mut tape, &vars, x, t)?;
        tape.backward(loss).map_err(|e| Error::Training { episode: step, reason: e.to_string() })?;
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
        adam_step(head.params_mut(), &grads, &mut state, &adam)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576616c32);
    let mut acc = 0.0;
    for _ in 0..cal.eval_batches {
        let (xs, _) = batch_pairs(&mut rng, rho, cal.batch);
        let locals = Tensor::new(vec![cal.batch, 1, 1, 1], xs)?;
        let (kl, _) = head.vib_upper_bound(&locals)?;
        acc += kl;
    }
    Ok((head, acc / cal.eval_batches as f64))
}

fn batch_pairs(rng: &mut ChaCha8Rng, rho: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = draw_pair(rng, rho);
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}
