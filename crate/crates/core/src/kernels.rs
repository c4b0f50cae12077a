//! Closed-form probability kernels: Beta-Binomial and Dirichlet-Multinomial
//! marginals, the unnormalized log posterior, and Beta/Dirichlet moments.
//!
//! Everything is evaluated through `ln_gamma`; gamma and beta functions are
//! never formed directly, since J in the hundreds overflows them.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{DirichletMoments, Embedding, GaussianPrior, VoteCounts};

/// Embedding entries are clamped to this range before exponentiation.
pub const Z_CLAMP: f64 = 30.0;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times an embedding entry was clamped since process start.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[inline]
fn clamp(z: f64) -> f64 {
    if z.abs() > Z_CLAMP {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        z.clamp(-Z_CLAMP, Z_CLAMP)
    } else {
        z
    }
}

/// Dirichlet concentration `alpha_k = exp(z_k)` with clamping.
pub fn concentrations(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| clamp(v).exp()).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        Err(Error::domain("embedding has non-finite entries"))
    } else {
        Ok(())
    }
}

/// Counts up to this size use products in [`ln_rising`].
const RISING_PRODUCT_MAX: u32 = 256;

/// `ln(a (a + 1) ... (a + n - 1)) = lnG(a + n) - lnG(a)`.
///
/// The difference of two large `ln_gamma` values loses about 1e-11 when
/// `a` is in the thousands, so small `n` uses blocked products instead.
/// Blocks of 16 factors stay below 1e250 for `a <= exp(30)`.
pub fn ln_rising(a: f64, n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if n > RISING_PRODUCT_MAX {
        return ln_gamma(a + f64::from(n)) - ln_gamma(a);
    }
    let mut acc = 0.0;
    let mut i = 0;
    while i < n {
        let end = (i + 16).min(n);
        let mut prod = 1.0;
        for t in i..end {
            prod *= a + f64::from(t);
        }
        acc += prod.ln();
        i = end;
    }
    acc
}

/// Log of the Beta-Binomial pmf `P(Y = y | Z = z)` with `alpha = exp(z1)`,
/// `beta = exp(z2)`, including the binomial coefficient.
pub fn log_beta_binomial_marginal(y: u32, j: u32, z: [f64; 2]) -> Result<f64> {
    if j < 1 {
        return Err(Error::domain("J must be at least 1"));
    }
    if y > j {
        return Err(Error::domain(format!("y = {y} exceeds J = {j}")));
    }
    check_finite(&z)?;
    let a = clamp(z[0]).exp();
    let b = clamp(z[1]).exp();
    let (y, jf) = (f64::from(y), f64::from(j));
    let ln_choose = ln_gamma(jf + 1.0) - ln_gamma(y + 1.0) - ln_gamma(jf - y + 1.0);
    Ok(ln_choose + ln_rising(a, y as u32) + ln_rising(b, j - y as u32) - ln_rising(a + b, j))
}

/// Count-dependent part of the Dirichlet-Multinomial pmf, cached so repeated
/// evaluations at different embeddings only pay for the alpha terms.
#[derive(Debug, Clone)]
pub struct DirichletMultinomial {
    counts: Vec<u32>,
    total: u32,
    ln_multinomial_coef: f64,
}

impl DirichletMultinomial {
    pub fn new(y: &VoteCounts) -> Self {
        let counts = y.counts().to_vec();
        let total = y.total();
        let ln_multinomial_coef =
            ln_gamma(f64::from(total) + 1.0) - counts.iter().map(|&c| ln_gamma(f64::from(c) + 1.0)).sum::<f64>();
        Self {
            counts,
            total,
            ln_multinomial_coef,
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Log pmf at embedding `z`; caller guarantees matching length.
    pub fn log_pmf(&self, z: &[f64]) -> f64 {
        let mut alpha0 = 0.0;
        let mut acc = self.ln_multinomial_coef;
        for (&zk, &yk) in z.iter().zip(&self.counts) {
            let a = clamp(zk).exp();
            alpha0 += a;
            acc += ln_rising(a, yk);
        }
        acc - ln_rising(alpha0, self.total)
    }
}

/// Log of the Dirichlet-Multinomial pmf of `y` given `alpha = exp(z)`.
pub fn log_dirichlet_multinomial_marginal(y: &VoteCounts, z: &Embedding) -> Result<f64> {
    if y.k() != z.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: {} counts vs {} embedding entries",
            y.k(),
            z.len()
        )));
    }
    check_finite(z.as_slice())?;
    Ok(DirichletMultinomial::new(y).log_pmf(z.as_slice()))
}

/// Log posterior `log f(y | z) + log N(z; mu, sigma)`, with the Gaussian
/// normalizing constant included.
pub fn log_posterior(z: &Embedding, y: &VoteCounts, prior: &GaussianPrior) -> Result<f64> {
    if prior.k() != z.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: prior has {} entries, embedding {}",
            prior.k(),
            z.len()
        )));
    }
    Ok(log_dirichlet_multinomial_marginal(y, z)? + prior.log_density(z.as_slice()))
}

/// Mean and covariance of `pi | z` for `pi ~ Dirichlet(exp(z))`.
///
/// The covariance is `(delta_kl m_k - m_k m_l) / (1 + alpha0)`.
pub fn dirichlet_moments(z: &Embedding) -> DirichletMoments {
    let zc: Vec<f64> = z.as_slice().iter().map(|&v| clamp(v)).collect();
    let mean = softmax(&zc);
    let alpha0: f64 = zc.iter().map(|v| v.exp()).sum();
    let k = mean.len();
    let scale = 1.0 / (1.0 + alpha0);
    let cov = DMatrix::from_fn(k, k, |a, b| {
        let d = if a == b { mean[a] } else { 0.0 };
        (d - mean[a] * mean[b]) * scale
    });
    DirichletMoments { mean, cov }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaMoments {
    pub mean: f64,
    pub variance: f64,
    pub log_variance: f64,
}

/// Mean and variance of `pi | z` for `pi ~ Beta(exp(z1), exp(z2))`.
pub fn beta_moments(z: [f64; 2]) -> Result<BetaMoments> {
    check_finite(&z)?;
    let (z1, z2) = (clamp(z[0]), clamp(z[1]));
    let (a, b) = (z1.exp(), z2.exp());
    let s = a + b;
    let mean = a / s;
    let variance = a * b / (s * s * (s + 1.0));
    let log_variance = z1 + z2 - 2.0 * s.ln() - s.ln_1p();
    Ok(BetaMoments {
        mean,
        variance,
        log_variance,
    })
}

/// Inclusive arithmetic grid `start, start + step, ..., <= stop`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridRange {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
            return Err(Error::domain("grid bounds must be finite"));
        }
        if step <= 0.0 {
            return Err(Error::domain("grid step must be positive"));
        }
        if stop < start {
            return Err(Error::domain("empty grid: stop < start"));
        }
        Ok(Self { start, stop, step })
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

impl std::str::FromStr for GridRange {
    type Err = Error;

    /// Parses `start:stop:step`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::domain(format!("grid {s:?} is not start:stop:step")));
        }
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::domain(format!("grid {s:?}: bad number {p:?}")))
        };
        Self::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub z1: f64,
    pub z2: f64,
    pub mean: f64,
    pub log_variance: f64,
}

/// Beta mean and log-variance over the product grid, `z1` varying slowest.
pub fn moment_surface(z1: &GridRange, z2: &GridRange) -> Result<Vec<SurfacePoint>> {
    let (g1, g2) = (z1.points(), z2.points());
    if g1.is_empty() || g2.is_empty() {
        return Err(Error::domain("empty grid"));
    }
    let mut out = Vec::with_capacity(g1.len() * g2.len());
    for &a in &g1 {
        for &b in &g2 {
            let m = beta_moments([a, b])?;
            out.push(SurfacePoint {
                z1: a,
                z2: b,
                mean: m.mean,
                log_variance: m.log_variance,
            });
        }
    }
    Ok(out)
}
