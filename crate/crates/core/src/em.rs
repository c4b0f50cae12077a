//! Stochastic EM: Metropolis E-steps per annotation pattern and empirical
//! Bayes updates of the Gaussian prior.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::DirichletMultinomial;
use crate::model::{AnnotationDataset, Embedding, GaussianPrior, VoteCounts};
use crate::sampler::{derive_seed, posterior_covariance, posterior_mean, rw_metropolis, McmcConfig, PosteriorDraws};

/// Variance of the initial isotropic prior.
pub const INITIAL_PRIOR_VARIANCE: f64 = 10.0;

/// How the prior covariance is re-estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MStep {
    /// Scatter of the per-instance posterior means.
    #[default]
    PosteriorMeans,
    /// Scatter of all retained draws pooled over instances.
    FullDraws,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub min_iterations: usize,
    pub m_step: MStep,
    pub mcmc: McmcConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_tol: 1e-3,
            min_iterations: 5,
            m_step: MStep::PosteriorMeans,
            mcmc: McmcConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::domain("max_iterations must be at least 1"));
        }
        if self.min_iterations > self.max_iterations {
            return Err(Error::domain("min_iterations exceeds max_iterations"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::domain("rel_tol must be positive"));
        }
        self.mcmc.validate()
    }
}

/// Diagnostics for one EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mu: Vec<f64>,
    pub sigma_frobenius: f64,
    pub mean_acceptance: f64,
    /// Relative change of mu against the previous prior.
    pub mu_change: f64,
    /// Relative Frobenius change of sigma against the previous prior.
    pub sigma_change: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Posterior mean per instance, in dataset order.
    pub embeddings: Vec<Embedding>,
    pub final_prior: GaussianPrior,
    /// Pattern index of each instance.
    pub pattern_of: Vec<usize>,
    /// Last-iteration draws per distinct vote pattern.
    pub pattern_draws: Vec<PosteriorDraws>,
    /// Posterior covariance per distinct vote pattern.
    pub pattern_cov: Vec<DMatrix<f64>>,
    pub history: Vec<IterationRecord>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn draws(&self, instance: usize) -> &PosteriorDraws {
        &self.pattern_draws[self.pattern_of[instance]]
    }

    pub fn covariance(&self, instance: usize) -> &DMatrix<f64> {
        &self.pattern_cov[self.pattern_of[instance]]
    }

    /// Per-instance draws, in dataset order.
    pub fn final_draws(&self) -> Vec<&PosteriorDraws> {
        (0..self.len()).map(|i| self.draws(i)).collect()
    }

    /// Embeddings as an n x K matrix.
    pub fn embedding_matrix(&self) -> DMatrix<f64> {
        let k = self.final_prior.k();
        DMatrix::from_fn(self.len(), k, |i, c| self.embeddings[i].as_slice()[c])
    }
}

/// Zero mean, `10 * I` covariance.
pub fn init_prior(k: usize) -> Result<GaussianPrior> {
    if k < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {k}")));
    }
    GaussianPrior::isotropic(vec![0.0; k], INITIAL_PRIOR_VARIANCE)
}

/// Maximum-likelihood mean and covariance (divisor n) of the estimates.
pub fn update_prior(estimates: &[Embedding]) -> Result<GaussianPrior> {
    let rows: Vec<&[f64]> = estimates.iter().map(Embedding::as_slice).collect();
    let weights = vec![1.0; rows.len()];
    weighted_prior(&rows, &weights)
}

fn weighted_prior(rows: &[&[f64]], weights: &[f64]) -> Result<GaussianPrior> {
    let n: f64 = weights.iter().sum();
    if rows.is_empty() || n < 2.0 {
        return Err(Error::domain("prior update needs at least 2 estimates"));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::domain("estimates have unequal lengths"));
    }
    let mut mu = vec![0.0; k];
    for (r, &w) in rows.iter().zip(weights) {
        for (m, v) in mu.iter_mut().zip(r.iter()) {
            *m += w * v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut sigma = DMatrix::zeros(k, k);
    for (r, &w) in rows.iter().zip(weights) {
        for a in 0..k {
            let da = r[a] - mu[a];
            for b in 0..=a {
                sigma[(a, b)] += w * da * (r[b] - mu[b]);
            }
        }
    }
    for a in 0..k {
        for b in 0..=a {
            let v = sigma[(a, b)] / n;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    GaussianPrior::new(mu, sigma)
}

/// Distinct vote vectors of a dataset, in order of first appearance.
#[derive(Debug, Clone)]
pub struct Patterns {
    pub votes: Vec<VoteCounts>,
    pub multiplicity: Vec<usize>,
    pub pattern_of: Vec<usize>,
}

impl Patterns {
    pub fn of(dataset: &AnnotationDataset) -> Self {
        let mut index: HashMap<&VoteCounts, usize> = HashMap::new();
        let mut votes = Vec::new();
        let mut multiplicity = Vec::new();
        let mut pattern_of = Vec::with_capacity(dataset.len());
        for inst in dataset.instances() {
            let p = *index.entry(&inst.votes).or_insert_with(|| {
                votes.push(inst.votes.clone());
                multiplicity.push(0);
                votes.len() - 1
            });
            multiplicity[p] += 1;
            pattern_of.push(p);
        }
        Self {
            votes,
            multiplicity,
            pattern_of,
        }
    }

    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }
}

fn pattern_key(votes: &VoteCounts) -> u64 {
    let keys: Vec<u64> = votes.counts().iter().map(|&c| u64::from(c)).collect();
    derive_seed(votes.k() as u64, &keys)
}

/// Chain seed for a vote pattern at a given EM iteration. Independent of
/// the pattern's position in the dataset.
pub fn chain_seed(run_seed: u64, iteration: usize, votes: &VoteCounts) -> u64 {
    derive_seed(run_seed, &[iteration as u64, pattern_key(votes)])
}

/// Draws from `f(z | y)` under `prior`, starting at `init`.
fn sample_posterior(
    votes: &VoteCounts,
    prior: &GaussianPrior,
    init: &Embedding,
    mcmc: &McmcConfig,
) -> Result<PosteriorDraws> {
    let likelihood = DirichletMultinomial::new(votes);
    rw_metropolis(|z| likelihood.log_pmf(z) + prior.log_density(z), init, mcmc)
}

fn e_step(
    patterns: &Patterns,
    prior: &GaussianPrior,
    inits: &[Embedding],
    config: &EmConfig,
    iteration: usize,
) -> Result<Vec<PosteriorDraws>> {
    let run = |p: usize| {
        let mcmc = McmcConfig {
            seed: chain_seed(config.mcmc.seed, iteration, &patterns.votes[p]),
            ..config.mcmc
        };
        sample_posterior(&patterns.votes[p], prior, &inits[p], &mcmc)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..patterns.len()).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..patterns.len()).map(run).collect()
    }
}

fn m_step(patterns: &Patterns, means: &[Embedding], draws: &[PosteriorDraws], mode: MStep) -> Result<GaussianPrior> {
    let weights: Vec<f64> = patterns.multiplicity.iter().map(|&m| m as f64).collect();
    match mode {
        MStep::PosteriorMeans => {
            let rows: Vec<&[f64]> = means.iter().map(Embedding::as_slice).collect();
            weighted_prior(&rows, &weights)
        }
        MStep::FullDraws => {
            let mut rows = Vec::new();
            let mut w = Vec::new();
            for (d, &wp) in draws.iter().zip(&weights) {
                let per = wp / d.n_retained() as f64;
                for r in d.rows() {
                    rows.push(r);
                    w.push(per);
                }
            }
            weighted_prior(&rows, &w)
        }
    }
}

fn relative_change(new: f64, old_norm: f64) -> f64 {
    new / old_norm.max(1.0)
}

/// Runs stochastic EM to convergence or `max_iterations`.
pub fn fit(dataset: &AnnotationDataset, config: &EmConfig) -> Result<FitResult> {
    fit_with_progress(dataset, config, |_| {})
}

/// As [`fit`], calling `progress` after each iteration's prior update.
pub fn fit_with_progress<P>(dataset: &AnnotationDataset, config: &EmConfig, mut progress: P) -> Result<FitResult>
where
    P: FnMut(&IterationRecord),
{
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::domain(
            "fitting needs at least 2 instances; use embed_new_instance for one",
        ));
    }
    let k = dataset.k();
    let patterns = Patterns::of(dataset);
    let mut prior = init_prior(k)?;
    let mut inits = vec![Embedding::zeros(k); patterns.len()];
    let mut history = Vec::new();
    let mut calm_streak = 0;
    let mut converged = false;
    let mut last_draws = Vec::new();

    for iteration in 0..config.max_iterations {
        let draws = e_step(&patterns, &prior, &inits, config, iteration)
            .map_err(|e| Error::numerical(format!("E-step of iteration {}: {e}", iteration + 1)))?;
        let means = draws.iter().map(posterior_mean).collect::<Result<Vec<_>>>()?;
        let updated = m_step(&patterns, &means, &draws, config.m_step).map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!("M-step of iteration {}: {m}", iteration + 1)),
            other => other,
        })?;

        let mu_diff: f64 = updated
            .mu()
            .iter()
            .zip(prior.mu())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let mu_norm = prior.mu().iter().map(|v| v * v).sum::<f64>().sqrt();
        let record = IterationRecord {
            iteration: iteration + 1,
            mu: updated.mu().to_vec(),
            sigma_frobenius: updated.sigma_frobenius(),
            mean_acceptance: draws.iter().map(|d| d.acceptance_rate).sum::<f64>() / draws.len() as f64,
            mu_change: relative_change(mu_diff, mu_norm),
            sigma_change: relative_change((updated.sigma() - prior.sigma()).norm(), prior.sigma_frobenius()),
        };
        progress(&record);
        if record.mu_change < config.rel_tol && record.sigma_change < config.rel_tol {
            calm_streak += 1;
        } else {
            calm_streak = 0;
        }
        history.push(record);
        prior = updated;
        inits = means;
        last_draws = draws;
        if calm_streak >= 2 && history.len() >= config.min_iterations {
            converged = true;
            break;
        }
    }

    let pattern_cov = last_draws
        .iter()
        .map(|d| {
            if d.n_retained() >= 2 {
                posterior_covariance(d)
            } else {
                Ok(DMatrix::zeros(k, k))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let embeddings = patterns.pattern_of.iter().map(|&p| inits[p].clone()).collect();
    Ok(FitResult {
        embeddings,
        final_prior: prior,
        pattern_of: patterns.pattern_of,
        pattern_draws: last_draws,
        pattern_cov,
        iterations_run: history.len(),
        history,
        converged,
    })
}

/// One E-step for a held-out instance against a frozen prior. The chain
/// starts at the prior mean.
pub fn embed_new_instance(
    votes: &VoteCounts,
    prior: &GaussianPrior,
    mcmc: &McmcConfig,
) -> Result<(Embedding, DMatrix<f64>)> {
    if votes.k() != prior.k() {
        return Err(Error::domain(format!(
            "dimension mismatch: {} vote classes vs prior of dimension {}",
            votes.k(),
            prior.k()
        )));
    }
    let init = Embedding::new(prior.mu().to_vec())?;
    let draws = sample_posterior(votes, prior, &init, mcmc)?;
    let mean = posterior_mean(&draws)?;
    let cov = if draws.n_retained() >= 2 {
        posterior_covariance(&draws)?
    } else {
        DMatrix::zeros(prior.k(), prior.k())
    };
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn quick() -> McmcConfig {
        McmcConfig {
            n_retained: 300,
            burn_in: 200,
            thin: 3,
            seed: 17,
            ..McmcConfig::default()
        }
    }

    #[test]
    fn init_prior_values() {
        let p = init_prior(3).unwrap();
        assert_eq!(p.mu(), &[0.0, 0.0, 0.0]);
        assert_eq!(p.sigma(), &DMatrix::from_diagonal_element(3, 3, 10.0));
        assert_eq!(
            init_prior(2).unwrap().sigma(),
            &DMatrix::from_diagonal_element(2, 2, 10.0)
        );
        assert!(init_prior(1).is_err());
    }

    #[test]
    fn update_prior_examples() {
        let p = update_prior(&[e(&[1.0, 0.0]), e(&[-1.0, 0.0])]).unwrap();
        assert_eq!(p.mu(), &[0.0, 0.0]);
        assert_eq!(p.sigma()[(0, 0)], 1.0 + p.jitter());
        assert_eq!(p.sigma()[(1, 1)], p.jitter());
        assert!(p.jitter() > 0.0 && p.jitter() < 1e-6);

        let v = [0.5, -2.0, 1.0];
        let p = update_prior(&[e(&v), e(&v), e(&v)]).unwrap();
        assert_eq!(p.mu(), &v);
        assert!(p.sigma()[(0, 1)] == 0.0 && p.sigma()[(0, 0)] > 0.0 && p.sigma()[(0, 0)] < 1e-6);

        assert!(update_prior(&[e(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn weighted_update_equals_expanded_update() {
        let rows = [e(&[1.0, 2.0]), e(&[-0.5, 0.3]), e(&[0.2, -1.0])];
        let expanded = update_prior(&[
            rows[0].clone(),
            rows[0].clone(),
            rows[1].clone(),
            rows[2].clone(),
            rows[2].clone(),
            rows[2].clone(),
        ])
        .unwrap();
        let slices: Vec<&[f64]> = rows.iter().map(Embedding::as_slice).collect();
        let weighted = weighted_prior(&slices, &[2.0, 1.0, 3.0]).unwrap();
        for (a, b) in expanded.mu().iter().zip(weighted.mu()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((expanded.sigma() - weighted.sigma()).norm() < 1e-14);
    }

    #[test]
    fn patterns_deduplicate_in_first_appearance_order() {
        let ds = AnnotationDataset::from_counts(["a", "b"], &[vec![1, 2], vec![3, 0], vec![1, 2], vec![1, 2]]).unwrap();
        let p = Patterns::of(&ds);
        assert_eq!(p.len(), 2);
        assert_eq!(p.multiplicity, vec![3, 1]);
        assert_eq!(p.pattern_of, vec![0, 1, 0, 0]);
    }

    #[test]
    fn single_instance_fit_rejected() {
        let ds = AnnotationDataset::from_counts(["a", "b"], &[vec![1, 2]]).unwrap();
        assert!(matches!(fit(&ds, &EmConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn unanimous_instances_point_to_their_class() {
        let ds = AnnotationDataset::from_counts(
            ["a", "b", "c"],
            &[vec![10, 0, 0], vec![0, 10, 0], vec![0, 0, 10], vec![0, 10, 0]],
        )
        .unwrap();
        let config = EmConfig {
            max_iterations: 5,
            mcmc: quick(),
            ..EmConfig::default()
        };
        let fit = fit(&ds, &config).unwrap();
        let expect = [0, 1, 2, 1];
        for (z, &k) in fit.embeddings.iter().zip(&expect) {
            let p = z.softmax();
            let arg = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            assert_eq!(arg, k);
        }
        assert_eq!(fit.history.len(), fit.iterations_run);
        assert_eq!(fit.pattern_draws.len(), 3);
        // duplicates share one chain
        assert_eq!(fit.embeddings[1], fit.embeddings[3]);
    }

    #[test]
    fn embed_new_instance_checks_dimensions_and_is_deterministic() {
        let prior = init_prior(3).unwrap();
        let v = VoteCounts::new(vec![1, 1]).unwrap();
        assert!(embed_new_instance(&v, &prior, &quick()).is_err());
        let v = VoteCounts::new(vec![0, 5, 0]).unwrap();
        let a = embed_new_instance(&v, &prior, &quick()).unwrap();
        let b = embed_new_instance(&v, &prior, &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_seed_depends_on_pattern_not_position() {
        let v = VoteCounts::new(vec![3, 1]).unwrap();
        let w = VoteCounts::new(vec![1, 3]).unwrap();
        assert_eq!(chain_seed(5, 2, &v), chain_seed(5, 2, &v.clone()));
        assert_ne!(chain_seed(5, 2, &v), chain_seed(5, 2, &w));
        assert_ne!(chain_seed(5, 2, &v), chain_seed(5, 3, &v));
    }
}
