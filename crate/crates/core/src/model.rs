//! Domain types: class labels, vote counts, datasets, embeddings and the
//! Gaussian prior over embeddings.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered, unique class names. At least two classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabels {
    names: Vec<String>,
}

impl ClassLabels {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::domain(format!(
                "at least 2 classes required, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::domain("empty class name"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::domain(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Per-instance tally of annotations over the K classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoteCounts {
    counts: Vec<u32>,
}

impl VoteCounts {
    /// Fails if fewer than two classes or no votes at all.
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::domain("vote vector needs at least 2 classes"));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::domain("instance has zero annotations"));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Number of annotators J.
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn is_unanimous(&self) -> bool {
        self.counts.iter().filter(|&&c| c > 0).count() == 1
    }

    /// Reorders classes: entry `k` of the result is entry `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            counts: perm.iter().map(|&p| self.counts[p]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub votes: VoteCounts,
    pub gold: Option<usize>,
    pub metadata: BTreeMap<String, String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, votes: VoteCounts) -> Self {
        Self {
            id: id.into(),
            votes,
            gold: None,
            metadata: BTreeMap::new(),
        }
    }
}

/// A validated collection of annotated instances sharing one class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDataset {
    labels: ClassLabels,
    instances: Vec<Instance>,
}

impl AnnotationDataset {
    pub fn new(labels: ClassLabels, instances: Vec<Instance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::domain("dataset has no instances"));
        }
        let k = labels.len();
        let mut ids = HashSet::new();
        for inst in &instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::domain(format!("duplicate instance id {:?}", inst.id)));
            }
            if inst.votes.k() != k {
                return Err(Error::domain(format!(
                    "instance {:?} has {} classes, expected {k}",
                    inst.id,
                    inst.votes.k()
                )));
            }
            if let Some(g) = inst.gold {
                if g >= k {
                    return Err(Error::domain(format!(
                        "instance {:?} gold index {g} out of range",
                        inst.id
                    )));
                }
            }
        }
        Ok(Self { labels, instances })
    }

    /// Convenience constructor from bare count rows; ids are `"1"`, `"2"`, ...
    pub fn from_counts<S: Into<String>>(labels: impl IntoIterator<Item = S>, rows: &[Vec<u32>]) -> Result<Self> {
        let labels = ClassLabels::new(labels)?;
        let instances = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Ok(Instance::new((i + 1).to_string(), VoteCounts::new(r.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, instances)
    }

    pub fn labels(&self) -> &ClassLabels {
        &self.labels
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Applies a class permutation to labels, votes and gold labels.
    /// Column `k` of the result is column `perm[k]` of `self`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..k).collect::<Vec<_>>() {
            return Err(Error::domain("not a permutation of the classes"));
        }
        let labels = ClassLabels::new(perm.iter().map(|&p| self.labels.name(p).to_string()))?;
        let mut inverse = vec![0; k];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let instances = self
            .instances
            .iter()
            .map(|inst| Instance {
                id: inst.id.clone(),
                votes: inst.votes.permuted(perm),
                gold: inst.gold.map(|g| inverse[g]),
                metadata: inst.metadata.clone(),
            })
            .collect();
        Self::new(labels, instances)
    }
}

/// Latent embedded ground truth: a finite real vector of length K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("embedding has non-finite entries"));
        }
        Ok(Self(z))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Softmax of the embedding, i.e. the Dirichlet mean of the class
    /// probabilities.
    pub fn softmax(&self) -> Vec<f64> {
        crate::kernels::softmax(&self.0)
    }
}

/// Relative symmetry tolerance accepted for a prior covariance.
const SYMMETRY_TOL: f64 = 1e-10;
const JITTER_RETRIES: u32 = 3;

/// Multivariate Gaussian prior N(mu, sigma) with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl GaussianPrior {
    /// Validates and factorizes. A matrix that is not numerically positive
    /// definite receives diagonal jitter `1e-8 * mean(diag)` (scaled by 10 on
    /// each further retry, 3 retries at most); the stored `sigma` includes it.
    pub fn new(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let k = mu.len();
        if k == 0 || sigma.nrows() != k || sigma.ncols() != k {
            return Err(Error::domain(format!(
                "prior dimension mismatch: mu has {k} entries, sigma is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("prior has non-finite entries"));
        }
        for i in 0..k {
            for j in 0..i {
                let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::domain(format!("prior covariance not symmetric at ({i},{j})")));
                }
            }
        }
        // exact symmetry for the factorization
        let mut sigma = (&sigma + sigma.transpose()) * 0.5;
        let mut jitter = 0.0;
        let mean_diag = sigma.diagonal().mean();
        let base = if mean_diag > 0.0 { 1e-8 * mean_diag } else { 1e-8 };
        let mut attempt = 0;
        let chol = loop {
            if let Some(c) = sigma.clone().cholesky() {
                break c;
            }
            if attempt == JITTER_RETRIES {
                return Err(Error::numerical(format!(
                    "prior covariance not positive definite after {JITTER_RETRIES} jitter retries"
                )));
            }
            let add = base * 10f64.powi(attempt as i32);
            for i in 0..k {
                sigma[(i, i)] += add;
            }
            jitter += add;
            attempt += 1;
        };
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            mu: DVector::from_vec(mu),
            sigma,
            chol: l,
            log_det,
            jitter,
        })
    }

    pub fn isotropic(mu: Vec<f64>, variance: f64) -> Result<Self> {
        let k = mu.len();
        Self::new(mu, DMatrix::from_diagonal_element(k, k, variance))
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        self.mu.as_slice()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower Cholesky factor of `sigma`.
    pub fn cholesky_l(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Total diagonal jitter that was added during factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Quadratic form (z - mu)' sigma^-1 (z - mu).
    pub fn mahalanobis_sq(&self, z: &[f64]) -> f64 {
        let k = self.k();
        // forward substitution L w = z - mu
        let mut w = vec![0.0; k];
        for i in 0..k {
            let mut s = z[i] - self.mu[i];
            for (j, wj) in w.iter().enumerate().take(i) {
                s -= self.chol[(i, j)] * wj;
            }
            w[i] = s / self.chol[(i, i)];
        }
        w.iter().map(|v| v * v).sum()
    }

    /// Normalized log density of `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let k = self.k() as f64;
        -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + self.log_det + self.mahalanobis_sq(z))
    }

    pub fn sigma_frobenius(&self) -> f64 {
        self.sigma.norm()
    }
}

/// Mean and covariance of the class-probability vector given an embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMoments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}
