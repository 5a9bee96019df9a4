//! Gaussian-process surrogate over architectures.
//!
//! The kernel is a two-part exponential over a distance profile: a linear
//! term on the raw distances and a squared term on the normalised ones, each
//! with its own amplitude and per-grid-point bandwidths.  Hyperparameters are
//! sampled from their posterior with a random-walk Metropolis chain in log
//! space, and the acquisition (expected improvement) is averaged over the
//! sampled models.

use std::borrow::Borrow;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::otmann::{
    distance_profile, zero_profile, ArchFeatures, DistanceError, DistanceParams, DistanceProfile,
    PenaltyMatrix,
};

/// Exponent applied to the raw-distance coordinates inside the kernel.
pub const P_RAW: f64 = 1.0;
/// Exponent applied to the normalised-distance coordinates.
pub const P_NORM: f64 = 2.0;

/// Random-walk step (in log space) of the hyperparameter chain.
pub const MH_STEP: f64 = 0.3;
/// Steps discarded before any state is recorded.
pub const MH_BURN_IN: usize = 200;
/// Chain states are recorded every this many steps after burn-in.
pub const MH_THIN: usize = 10;
/// Number of posterior hyperparameter samples the search averages over.
pub const DEFAULT_HYPER_SAMPLES: usize = 4;

const SQRT_2PI: f64 = 2.506_628_274_631_000_2;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("distance grid has {grid} entries but hyperparameters carry {hyper}")]
    GridMismatch { grid: usize, hyper: usize },
    #[error("{obs} observations for {archs} architectures")]
    CountMismatch { obs: usize, archs: usize },
    #[error("expected {expected} query profiles, got {got}")]
    QueryLength { expected: usize, got: usize },
    #[error("gram matrix not positive definite even with jitter {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("cannot fit a model with no training data")]
    Empty,
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

/// The eleven kernel hyperparameters: two amplitudes, one bandwidth per grid
/// point for each distance family, and the observation noise variance.
/// All strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub beta: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub noise_var: f64,
}

impl KernelHyper {
    pub fn dims(grid_len: usize) -> usize {
        3 + 2 * grid_len
    }

    /// Flattens to log space in the order alpha, alpha_bar, beta, beta_bar,
    /// noise_var — the coordinate order the sampler walks in.
    fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::dims(self.beta.len()));
        v.push(self.alpha.ln());
        v.push(self.alpha_bar.ln());
        v.extend(self.beta.iter().map(|b| b.ln()));
        v.extend(self.beta_bar.iter().map(|b| b.ln()));
        v.push(self.noise_var.ln());
        v
    }

    fn from_log(grid_len: usize, v: &[f64]) -> KernelHyper {
        debug_assert_eq!(v.len(), Self::dims(grid_len));
        KernelHyper {
            alpha: v[0].exp(),
            alpha_bar: v[1].exp(),
            beta: v[2..2 + grid_len].iter().map(|x| x.exp()).collect(),
            beta_bar: v[2 + grid_len..2 + 2 * grid_len].iter().map(|x| x.exp()).collect(),
            noise_var: v[2 + 2 * grid_len].exp(),
        }
    }
}

/// x^p, recognising the two exponents the kernel actually uses so the hot
/// paths never call `powf`.
#[inline]
fn term_pow(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else {
        x.powf(p)
    }
}

#[inline]
fn raw_term(d: f64) -> f64 {
    term_pow(d, P_RAW)
}

#[inline]
fn norm_term(d: f64) -> f64 {
    term_pow(d, P_NORM)
}

/// kernel(d) = alpha * exp(-sum_i beta_i d_i) + alpha_bar * exp(-sum_i beta_bar_i dbar_i^2).
/// Bounded by alpha + alpha_bar, attained exactly on a zero profile.
pub fn kernel_value(profile: &DistanceProfile, hyper: &KernelHyper) -> Result<f64, GpError> {
    let g = profile.raw.len();
    if hyper.beta.len() != g || hyper.beta_bar.len() != g || profile.normalized.len() != g {
        return Err(GpError::GridMismatch { grid: g, hyper: hyper.beta.len() });
    }
    let mut s_raw = 0.0;
    let mut s_norm = 0.0;
    for i in 0..g {
        s_raw += hyper.beta[i] * raw_term(profile.raw[i]);
        s_norm += hyper.beta_bar[i] * norm_term(profile.normalized[i]);
    }
    Ok(hyper.alpha * (-s_raw).exp() + hyper.alpha_bar * (-s_norm).exp())
}

/// Symmetric matrix of pairwise distance profiles, row-major with zero
/// diagonal.  Shared (via `Arc`) between every model fitted on the same pool.
#[derive(Debug, Clone)]
pub struct ProfileMatrix {
    n: usize,
    grid: Vec<f64>,
    profiles: Vec<Arc<DistanceProfile>>,
    /// Per cell, the already-exponentiated kernel coordinates laid out as
    /// [raw terms x g, normalised terms x g].  The hyperparameter chain
    /// rebuilds the gram matrix hundreds of times per fit, so that build
    /// streams over this instead of chasing per-profile vectors.
    terms: Vec<f64>,
}

impl ProfileMatrix {
    /// Computes all pairwise profiles directly.
    pub fn compute(
        feats: &[&ArchFeatures],
        penalty: &PenaltyMatrix,
        params: &DistanceParams,
    ) -> Result<ProfileMatrix, DistanceError> {
        Self::from_fn(feats.len(), params, |i, j| {
            distance_profile(feats[i], feats[j], penalty, params).map(Arc::new)
        })
    }

    /// Builds from a profile source called once per unordered pair i < j;
    /// the diagonal is filled with zero profiles and the mirror is implied.
    pub fn from_fn<E>(
        n: usize,
        params: &DistanceParams,
        mut pair: impl FnMut(usize, usize) -> Result<Arc<DistanceProfile>, E>,
    ) -> Result<ProfileMatrix, E> {
        let zero = Arc::new(zero_profile(params));
        let mut profiles = vec![zero; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let p = pair(i, j)?;
                debug_assert_eq!(p.raw.len(), params.nu_grid.len());
                profiles[i * n + j] = Arc::clone(&p);
                profiles[j * n + i] = p;
            }
        }
        let g = params.nu_grid.len();
        let mut terms = Vec::with_capacity(n * n * 2 * g);
        for p in &profiles {
            terms.extend(p.raw.iter().map(|&d| raw_term(d)));
            terms.extend(p.normalized.iter().map(|&d| norm_term(d)));
        }
        Ok(ProfileMatrix { n, grid: params.nu_grid.clone(), profiles, terms })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    pub fn get(&self, i: usize, j: usize) -> &DistanceProfile {
        &self.profiles[i * self.n + j]
    }

    /// Exponentiated kernel coordinates of one cell (see the field comment).
    fn cell_terms(&self, i: usize, j: usize) -> &[f64] {
        let w = 2 * self.grid.len();
        &self.terms[(i * self.n + j) * w..][..w]
    }

    /// Off-diagonal values of one grid coordinate, raw or normalised.
    fn offdiag(&self, k: usize, normalized: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let p = self.get(i, j);
                out.push(if normalized { p.normalized[k] } else { p.raw[k] });
            }
        }
        out
    }
}

/// Log-uniform prior box for the hyperparameters; bounds are inclusive and
/// strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPriorBox {
    pub alpha: (f64, f64),
    pub alpha_bar: (f64, f64),
    pub beta: Vec<(f64, f64)>,
    pub beta_bar: Vec<(f64, f64)>,
    pub noise_var: (f64, f64),
}

impl HyperPriorBox {
    pub fn grid_len(&self) -> usize {
        self.beta.len()
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = Vec::with_capacity(KernelHyper::dims(self.beta.len()));
        b.push(self.alpha);
        b.push(self.alpha_bar);
        b.extend(self.beta.iter().copied());
        b.extend(self.beta_bar.iter().copied());
        b.push(self.noise_var);
        b
    }

    fn contains_log(&self, v: &[f64]) -> bool {
        self.bounds()
            .iter()
            .zip(v)
            .all(|(&(lo, hi), &x)| x >= lo.ln() && x <= hi.ln())
    }

    pub fn contains(&self, hyper: &KernelHyper) -> bool {
        hyper.beta.len() == self.beta.len()
            && hyper.beta_bar.len() == self.beta_bar.len()
            && self.contains_log(&hyper.to_log())
    }

    fn log_midpoint(&self) -> Vec<f64> {
        self.bounds().iter().map(|&(lo, hi)| 0.5 * (lo.ln() + hi.ln())).collect()
    }

    fn sample_log(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.bounds()
            .iter()
            .map(|&(lo, hi)| {
                let u: f64 = rng.random();
                lo.ln() + u * (hi.ln() - lo.ln())
            })
            .collect()
    }

    /// One draw from the prior itself.
    pub fn sample(&self, rng: &mut impl Rng) -> KernelHyper {
        KernelHyper::from_log(self.beta.len(), &self.sample_log(rng))
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Data-scaled default box: amplitudes and noise scale with the observation
/// variance, bandwidths with the median non-zero pairwise distance of their
/// grid coordinate.  Floors keep the box finite on degenerate data.
pub fn default_prior_box(train: &ProfileMatrix, y: &[f64]) -> HyperPriorBox {
    let n = y.len() as f64;
    let var = if y.is_empty() {
        1.0
    } else {
        let mean = y.iter().sum::<f64>() / n;
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    };
    let var = var.max(1e-12);
    let band = |normalized: bool| -> Vec<(f64, f64)> {
        (0..train.grid_len())
            .map(|k| {
                let nonzero: Vec<f64> =
                    train.offdiag(k, normalized).into_iter().filter(|d| *d > 0.0).collect();
                let med = median(nonzero).unwrap_or(1.0).max(1e-9);
                (0.01 / med, 100.0 / med)
            })
            .collect()
    };
    HyperPriorBox {
        alpha: (0.05 * var, 5.0 * var),
        alpha_bar: (0.05 * var, 5.0 * var),
        beta: band(false),
        beta_bar: band(true),
        noise_var: (1e-6 * var, var),
    }
}

/// Builds the noisy gram matrix K + noise_var I for a hyperparameter setting.
/// Same arithmetic as `kernel_value`, but reading the precomputed cell terms.
fn gram_matrix(train: &ProfileMatrix, hyper: &KernelHyper) -> Result<DMatrix<f64>, GpError> {
    let n = train.len();
    let g = train.grid_len();
    if hyper.beta.len() != g || hyper.beta_bar.len() != g {
        return Err(GpError::GridMismatch { grid: g, hyper: hyper.beta.len() });
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let t = train.cell_terms(i, j);
            let mut s_raw = 0.0;
            let mut s_norm = 0.0;
            for x in 0..g {
                s_raw += hyper.beta[x] * t[x];
                s_norm += hyper.beta_bar[x] * t[g + x];
            }
            let v = hyper.alpha * (-s_raw).exp() + hyper.alpha_bar * (-s_norm).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hyper.noise_var;
    }
    Ok(k)
}

/// A factor whose diagonal collapses below this ratio is treated as failed so
/// that near-singular matrices escalate jitter instead of returning garbage.
const CHOL_COND_GUARD: f64 = 1e-7;
const JITTER_REL_START: f64 = 1e-10;
const JITTER_REL_MAX: f64 = 1e-4;

fn factor_ok(chol: &Cholesky<f64, Dyn>) -> bool {
    let l = chol.l();
    let mut min = f64::INFINITY;
    let mut max = 0.0_f64;
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !d.is_finite() || d <= 0.0 {
            return false;
        }
        min = min.min(d);
        max = max.max(d);
    }
    min >= CHOL_COND_GUARD * max
}

/// Cholesky with escalating diagonal jitter: none, then 1e-10 .. 1e-4 times
/// the mean diagonal in decade steps.  Returns the factor and the jitter used.
fn factor_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let mean_diag = k.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut levels = vec![0.0];
    let mut rel = JITTER_REL_START;
    while rel <= JITTER_REL_MAX * 1.5 {
        levels.push(rel * mean_diag);
        rel *= 10.0;
    }
    let last = levels.len() - 1;
    for (idx, &jitter) in levels.iter().enumerate() {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            // At the final level any successful factorisation is accepted.
            if factor_ok(&chol) || idx == last {
                return Ok((chol, jitter));
            }
        }
    }
    Err(GpError::NotPositiveDefinite { max_jitter: levels[last] })
}

/// A fitted model: immutable, safe to query concurrently.
#[derive(Debug, Clone)]
pub struct GpModel {
    train: Arc<ProfileMatrix>,
    hyper: KernelHyper,
    y_mean: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    /// (K + noise I + jitter I)^-1 (y - y_mean)
    weights: DVector<f64>,
    /// y - y_mean
    residuals: DVector<f64>,
}

impl GpModel {
    pub fn fit(train: Arc<ProfileMatrix>, y: &[f64], hyper: KernelHyper) -> Result<GpModel, GpError> {
        if train.is_empty() {
            return Err(GpError::Empty);
        }
        if train.len() != y.len() {
            return Err(GpError::CountMismatch { obs: y.len(), archs: train.len() });
        }
        if hyper.beta.len() != train.grid_len() || hyper.beta_bar.len() != train.grid_len() {
            return Err(GpError::GridMismatch { grid: train.grid_len(), hyper: hyper.beta.len() });
        }
        let k = gram_matrix(&train, &hyper)?;
        let (chol, jitter) = factor_with_jitter(&k)?;
        let y_mean = y.iter().sum::<f64>() / y.len() as f64;
        let residuals = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let weights = chol.solve(&residuals);
        Ok(GpModel { train, hyper, y_mean, jitter, chol, weights, residuals })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    /// Jitter that was added to make the gram matrix factor; 0 when none was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Constant prior mean (the training-observation average).
    pub fn prior_mean(&self) -> f64 {
        self.y_mean
    }

    /// Prior variance at any point: the kernel of a point with itself.
    pub fn prior_variance(&self) -> f64 {
        self.hyper.alpha + self.hyper.alpha_bar
    }

    /// Posterior (mean, variance) at a query described by its distance
    /// profiles against the training points, in training order.
    pub fn posterior<B: Borrow<DistanceProfile>>(&self, query: &[B]) -> Result<(f64, f64), GpError> {
        if query.len() != self.train.len() {
            return Err(GpError::QueryLength { expected: self.train.len(), got: query.len() });
        }
        let mut kv = DVector::zeros(query.len());
        for (i, p) in query.iter().enumerate() {
            kv[i] = kernel_value(p.borrow(), &self.hyper)?;
        }
        let mean = self.y_mean + kv.dot(&self.weights);
        let solved = self.chol.solve(&kv);
        let var = (self.prior_variance() - kv.dot(&solved)).max(0.0);
        Ok((mean, var))
    }

    /// Log evidence of the observations under the (jitter-repaired) prior.
    pub fn log_marginal(&self) -> f64 {
        let n = self.train.len() as f64;
        let l = self.chol.l();
        let mut log_det_half = 0.0;
        for i in 0..l.nrows() {
            log_det_half += l[(i, i)].ln();
        }
        -0.5 * self.residuals.dot(&self.weights) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn expected_improvement<B: Borrow<DistanceProfile>>(
        &self,
        query: &[B],
        incumbent: f64,
    ) -> Result<f64, GpError> {
        let (mean, var) = self.posterior(query)?;
        Ok(ei_value(mean, var, incumbent))
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Expected improvement of N(mean, variance) over an incumbent, for
/// maximisation.  The zero-variance limit degrades to max(0, mean - incumbent).
pub fn ei_value(mean: f64, variance: f64, incumbent: f64) -> f64 {
    let sd = variance.max(0.0).sqrt();
    if sd == 0.0 {
        return (mean - incumbent).max(0.0);
    }
    let g = (mean - incumbent) / sd;
    let pdf = (-0.5 * g * g).exp() / SQRT_2PI;
    (sd * (g * normal_cdf(g) + pdf)).max(0.0)
}

/// Reused buffers for the chain's likelihood evaluations.
#[derive(Default)]
struct ChainScratch {
    gram: Vec<f64>,
    factor: Vec<f64>,
    solve: Vec<f64>,
}

/// Log marginal likelihood without building a model.  The chain evaluates
/// hundreds of rejected settings per accepted one, so this fills a packed
/// lower factor in reused buffers and runs a single forward substitution
/// (the quadratic form only needs ||L^-1 r||^2).  Jitter escalation and the
/// conditioning guard mirror `factor_with_jitter`; None when no level
/// factors.
fn chain_log_marginal(
    train: &ProfileMatrix,
    y: &[f64],
    hyper: &KernelHyper,
    ws: &mut ChainScratch,
) -> Option<f64> {
    let n = train.len();
    let g = train.grid_len();
    if n == 0 || n != y.len() || hyper.beta.len() != g || hyper.beta_bar.len() != g {
        return None;
    }
    ws.gram.clear();
    ws.gram.resize(n * n, 0.0);
    let gram = &mut ws.gram;
    let mut diag_sum = 0.0;
    for i in 0..n {
        for j in i..n {
            let t = train.cell_terms(i, j);
            let mut s_raw = 0.0;
            let mut s_norm = 0.0;
            for x in 0..g {
                s_raw += hyper.beta[x] * t[x];
                s_norm += hyper.beta_bar[x] * t[g + x];
            }
            let v = hyper.alpha * (-s_raw).exp() + hyper.alpha_bar * (-s_norm).exp();
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
        gram[i * n + i] += hyper.noise_var;
        diag_sum += gram[i * n + i];
    }
    let mean_diag = (diag_sum / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut levels = vec![0.0];
    let mut rel = JITTER_REL_START;
    while rel <= JITTER_REL_MAX * 1.5 {
        levels.push(rel * mean_diag);
        rel *= 10.0;
    }
    let last = levels.len() - 1;
    'levels: for (idx, &jitter) in levels.iter().enumerate() {
        ws.factor.clear();
        ws.factor.extend_from_slice(gram);
        // Left-looking lower Cholesky, column-major so the updates run over
        // contiguous column tails; the strict upper triangle is left stale.
        let mut min_d = f64::INFINITY;
        let mut max_d = 0.0f64;
        for j in 0..n {
            let (head, tail) = ws.factor.split_at_mut(j * n);
            let col_j = &mut tail[j..n];
            col_j[0] += jitter;
            for k in 0..j {
                let f = head[k * n + j];
                let col_k = &head[k * n + j..k * n + n];
                for (x, &c) in col_j.iter_mut().zip(col_k) {
                    *x -= f * c;
                }
            }
            let d = col_j[0];
            if !(d > 0.0 && d.is_finite()) {
                continue 'levels;
            }
            let root = d.sqrt();
            col_j[0] = root;
            min_d = min_d.min(root);
            max_d = max_d.max(root);
            for x in &mut col_j[1..] {
                *x /= root;
            }
        }
        if min_d < CHOL_COND_GUARD * max_d && idx != last {
            continue 'levels;
        }
        let a = &ws.factor[..];
        let y_mean = y.iter().sum::<f64>() / n as f64;
        ws.solve.clear();
        ws.solve.extend(y.iter().map(|v| v - y_mean));
        let z = &mut ws.solve;
        for j in 0..n {
            let zj = z[j] / a[j * n + j];
            z[j] = zj;
            let col_j = &a[j * n + j + 1..j * n + n];
            for (x, &c) in z[j + 1..].iter_mut().zip(col_j) {
                *x -= zj * c;
            }
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        let log_det_half: f64 = (0..n).map(|j| a[j * n + j].ln()).sum();
        let lml =
            -0.5 * quad - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        return Some(lml);
    }
    None
}

/// Posterior hyperparameter samples via random-walk Metropolis in log space,
/// targeting the marginal likelihood restricted to the prior box.  With fewer
/// than two observations the likelihood is uninformative and plain prior
/// draws are returned instead.
pub fn sample_hypers(
    train: &Arc<ProfileMatrix>,
    y: &[f64],
    prior: &HyperPriorBox,
    rng: &mut impl Rng,
    n_samples: usize,
) -> Vec<KernelHyper> {
    if n_samples == 0 {
        return Vec::new();
    }
    let g = prior.grid_len();
    if y.len() < 2 {
        return (0..n_samples).map(|_| prior.sample(rng)).collect();
    }
    let mut ws = ChainScratch::default();
    let log_target = |v: &[f64], ws: &mut ChainScratch| -> f64 {
        if !prior.contains_log(v) {
            return f64::NEG_INFINITY;
        }
        let hyper = KernelHyper::from_log(g, v);
        match chain_log_marginal(train, y, &hyper, ws) {
            Some(lml) if lml.is_finite() => lml,
            _ => f64::NEG_INFINITY,
        }
    };

    let mut state = prior.log_midpoint();
    let mut lp = log_target(&state, &mut ws);
    let mut tries = 0;
    while !lp.is_finite() && tries < 100 {
        state = prior.sample_log(rng);
        lp = log_target(&state, &mut ws);
        tries += 1;
    }
    if !lp.is_finite() {
        log::warn!("hyperparameter likelihood unusable everywhere tried; falling back to prior draws");
        return (0..n_samples).map(|_| prior.sample(rng)).collect();
    }

    let dims = state.len();
    let total = MH_BURN_IN + MH_THIN * n_samples;
    let mut samples = Vec::with_capacity(n_samples);
    for step in 1..=total {
        let proposal: Vec<f64> = state
            .iter()
            .map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                x + MH_STEP * z
            })
            .collect();
        debug_assert_eq!(proposal.len(), dims);
        let lp_new = log_target(&proposal, &mut ws);
        if lp_new.is_finite() {
            let u: f64 = rng.random();
            if u.ln() < lp_new - lp {
                state = proposal;
                lp = lp_new;
            }
        }
        if step > MH_BURN_IN && (step - MH_BURN_IN) % MH_THIN == 0 {
            samples.push(KernelHyper::from_log(g, &state));
        }
    }
    samples
}

/// Models fitted on a common pool under several hyperparameter samples; the
/// acquisition and the believer predictions average over them.
#[derive(Debug, Clone)]
pub struct EiEnsemble {
    models: Vec<GpModel>,
}

impl EiEnsemble {
    /// Fits one model per hyperparameter sample.  A sample whose gram matrix
    /// cannot be repaired is dropped; failing all of them is an error.
    pub fn fit(
        train: Arc<ProfileMatrix>,
        y: &[f64],
        hypers: &[KernelHyper],
    ) -> Result<EiEnsemble, GpError> {
        let mut models = Vec::with_capacity(hypers.len());
        let mut last_err = None;
        for h in hypers {
            match GpModel::fit(train.clone(), y, h.clone()) {
                Ok(m) => models.push(m),
                Err(e) => {
                    log::warn!("dropping hyperparameter sample: {e}");
                    last_err = Some(e);
                }
            }
        }
        if models.is_empty() {
            return Err(last_err.unwrap_or(GpError::Empty));
        }
        Ok(EiEnsemble { models })
    }

    pub fn models(&self) -> &[GpModel] {
        &self.models
    }

    /// Posterior mean averaged over the ensemble.
    pub fn mean_posterior<B: Borrow<DistanceProfile>>(&self, query: &[B]) -> Result<f64, GpError> {
        let mut acc = 0.0;
        for m in &self.models {
            acc += m.posterior(query)?.0;
        }
        Ok(acc / self.models.len() as f64)
    }

    /// Expected improvement averaged over the ensemble.
    pub fn acquisition<B: Borrow<DistanceProfile>>(
        &self,
        query: &[B],
        incumbent: f64,
    ) -> Result<f64, GpError> {
        let mut acc = 0.0;
        for m in &self.models {
            acc += m.expected_improvement(query, incumbent)?;
        }
        Ok(acc / self.models.len() as f64)
    }
}
