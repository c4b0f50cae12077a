//! Random-walk Metropolis over a K-dimensional log density.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Embedding;

/// Target acceptance rate for burn-in adaptation.
pub const TARGET_ACCEPTANCE: f64 = 0.234;
/// Acceptance rates outside this band raise the warning flag.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.05, 0.95);

/// Shape of the random-walk proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proposal {
    /// `proposal_scale * N(0, I)` increments.
    #[default]
    Isotropic,
    /// `proposal_scale * N(0, V)` increments, where `V` is the inverse
    /// negative Hessian of the target at its mode. Falls back to isotropic
    /// when the mode search or the factorization fails.
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_retained: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Per-dimension standard deviation of the Gaussian proposal.
    pub proposal_scale: f64,
    /// Tune `proposal_scale` during burn-in, frozen afterwards.
    pub adapt: bool,
    pub seed: u64,
    #[serde(default)]
    pub proposal: Proposal,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_retained: 1000,
            burn_in: 50,
            thin: 20,
            proposal_scale: 0.5,
            adapt: true,
            seed: 0,
            proposal: Proposal::Isotropic,
        }
    }
}

impl McmcConfig {
    /// Longer burn-in, shorter thinning. Same number of proposal steps order.
    pub fn robust() -> Self {
        Self {
            burn_in: 500,
            thin: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_retained < 1 {
            return Err(Error::domain("n_retained must be at least 1"));
        }
        if self.thin < 1 {
            return Err(Error::domain("thin must be at least 1"));
        }
        if !(self.proposal_scale.is_finite() && self.proposal_scale > 0.0) {
            return Err(Error::domain("proposal_scale must be positive and finite"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.burn_in + self.n_retained * self.thin
    }
}

/// Retained states of one chain, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    k: usize,
    draws: Vec<f64>,
    pub acceptance_rate: f64,
    pub seed_used: u64,
    /// Proposal scale used after burn-in.
    pub proposal_scale: f64,
}

impl PosteriorDraws {
    /// Builds draws from rows; intended for tests and deserialization.
    pub fn from_rows(rows: &[Vec<f64>], acceptance_rate: f64, seed_used: u64) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::domain("draw rows have unequal lengths"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("draws contain non-finite values"));
        }
        if !(0.0..=1.0).contains(&acceptance_rate) {
            return Err(Error::domain("acceptance rate outside [0, 1]"));
        }
        Ok(Self {
            k,
            draws: rows.iter().flatten().copied().collect(),
            acceptance_rate,
            seed_used,
            proposal_scale: f64::NAN,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_retained(&self) -> usize {
        self.draws.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.draws[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.k.max(1))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    pub fn acceptance_warning(&self) -> bool {
        self.acceptance_rate < ACCEPTANCE_BAND.0 || self.acceptance_rate > ACCEPTANCE_BAND.1
    }
}

/// Runs `burn_in + n_retained * thin` Metropolis steps with isotropic
/// Gaussian proposals and keeps every `thin`-th post-burn-in state.
///
/// Proposals where `target` is non-finite are rejected. Deterministic given
/// `config.seed`.
pub fn rw_metropolis<F>(mut target: F, init: &Embedding, config: &McmcConfig) -> Result<PosteriorDraws>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    let k = init.len();
    if k == 0 {
        return Err(Error::domain("empty initial state"));
    }
    let mut current = init.as_slice().to_vec();
    let mut current_lp = target(&current);
    if !current_lp.is_finite() {
        return Err(Error::numerical(format!(
            "target is not finite at the initial state ({current_lp})"
        )));
    }

    let shape = match config.proposal {
        Proposal::Isotropic => None,
        Proposal::Laplace => laplace_approximation(&mut target, &current)
            .and_then(|(_, cov)| cov.cholesky())
            .map(|c| c.l()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eps = vec![0.0; k];
    let mut log_scale = config.proposal_scale.ln();
    let mut proposal = vec![0.0; k];
    let mut draws = Vec::with_capacity(config.n_retained * k);
    let mut accepted = 0usize;

    for step in 0..config.total_steps() {
        let scale = log_scale.exp();
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        match &shape {
            None => {
                for ((p, c), e) in proposal.iter_mut().zip(&current).zip(&eps) {
                    *p = c + scale * e;
                }
            }
            Some(l) => {
                for (i, (p, c)) in proposal.iter_mut().zip(&current).enumerate() {
                    let d: f64 = (0..=i).map(|j| l[(i, j)] * eps[j]).sum();
                    *p = c + scale * d;
                }
            }
        }
        let lp = target(&proposal);
        let log_ratio = if lp.is_finite() {
            lp - current_lp
        } else {
            f64::NEG_INFINITY
        };
        let u: f64 = rng.random();
        let accept = log_ratio >= 0.0 || u.ln() < log_ratio;
        if accept {
            current.copy_from_slice(&proposal);
            current_lp = lp;
        }

        if step < config.burn_in {
            if config.adapt {
                let a = log_ratio.min(0.0).exp();
                let gain = 1.0 / ((step + 1) as f64).powf(0.6);
                log_scale += gain * (a - TARGET_ACCEPTANCE);
            }
            continue;
        }
        if accept {
            accepted += 1;
        }
        let post = step - config.burn_in + 1;
        if post.is_multiple_of(config.thin) {
            draws.extend_from_slice(&current);
        }
    }

    let post_steps = config.n_retained * config.thin;
    Ok(PosteriorDraws {
        k,
        draws,
        acceptance_rate: accepted as f64 / post_steps as f64,
        seed_used: config.seed,
        proposal_scale: log_scale.exp(),
    })
}

fn gradient_hessian<F>(target: &mut F, x: &[f64], fx: f64) -> (Vec<f64>, DMatrix<f64>)
where
    F: FnMut(&[f64]) -> f64,
{
    let k = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let mut p = x.to_vec();
    let mut eval = |p: &mut Vec<f64>, moves: &[(usize, f64)]| {
        for &(i, d) in moves {
            p[i] += d;
        }
        let v = target(p);
        for &(i, d) in moves {
            p[i] -= d;
        }
        v
    };
    let mut grad = vec![0.0; k];
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let fp = eval(&mut p, &[(i, h[i])]);
        let fm = eval(&mut p, &[(i, -h[i])]);
        grad[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * fx + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = eval(&mut p, &[(i, h[i]), (j, h[j])]);
            let fpm = eval(&mut p, &[(i, h[i]), (j, -h[j])]);
            let fmp = eval(&mut p, &[(i, -h[i]), (j, h[j])]);
            let fmm = eval(&mut p, &[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (grad, hess)
}

/// Mode of `target` by damped Newton ascent with finite-difference
/// derivatives, and the inverse negative Hessian there. `None` if the
/// target is not finite along the way or the curvature is not negative
/// definite at the end.
pub fn laplace_approximation<F>(target: &mut F, init: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)>
where
    F: FnMut(&[f64]) -> f64,
{
    let k = init.len();
    let mut x = init.to_vec();
    let mut fx = target(&x);
    if !fx.is_finite() {
        return None;
    }
    for _ in 0..100 {
        let (g, h) = gradient_hessian(target, &x, fx);
        let neg_h = -h;
        let mut damping = 0.0;
        let step = loop {
            let m = &neg_h + DMatrix::identity(k, k) * damping;
            if let Some(c) = m.cholesky() {
                break c.solve(&nalgebra::DVector::from_column_slice(&g));
            }
            damping = if damping == 0.0 {
                1e-6 * neg_h.diagonal().abs().max().max(1.0)
            } else {
                damping * 10.0
            };
            if !damping.is_finite() {
                return None;
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let fc = target(&cand);
            if fc.is_finite() && fc >= fx {
                let gain = fc - fx;
                x = cand;
                fx = fc;
                moved = gain > 1e-10 * fx.abs().max(1.0);
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (_, h) = gradient_hessian(target, &x, fx);
    let neg_h = -h;
    let cov = neg_h.cholesky()?.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    cov.iter().all(|v| v.is_finite()).then_some((x, cov))
}

/// Column-wise mean of the retained draws.
pub fn posterior_mean(draws: &PosteriorDraws) -> Result<Embedding> {
    let n = draws.n_retained();
    if n == 0 {
        return Err(Error::domain("no retained draws"));
    }
    let mut mean = vec![0.0; draws.k()];
    for row in draws.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Embedding::new(mean)
}

/// Unbiased (divisor n - 1) sample covariance of the retained draws.
pub fn posterior_covariance(draws: &PosteriorDraws) -> Result<DMatrix<f64>> {
    let n = draws.n_retained();
    if n < 2 {
        return Err(Error::domain("covariance needs at least 2 draws"));
    }
    let mean = posterior_mean(draws)?;
    let m = mean.as_slice();
    let k = draws.k();
    let mut cov = DMatrix::zeros(k, k);
    for row in draws.rows() {
        for a in 0..k {
            let da = row[a] - m[a];
            for b in 0..=a {
                cov[(a, b)] += da * (row[b] - m[b]);
            }
        }
    }
    for a in 0..k {
        for b in 0..=a {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(cov)
}

/// Effective sample size of a scalar chain using Geyer's initial monotone
/// positive sequence of autocorrelation pairs.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acov = |lag: usize| (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / n as f64;
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (acov(lag) + acov(lag + 1)) / var;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0))
}

/// Mixes a run seed with a sequence of keys into an independent stream seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x243F_6A88_85A3_08D3);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
