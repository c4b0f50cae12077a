//! Forward simulation of the generative model: Z ~ N(mu, Sigma),
//! pi ~ Dirichlet(exp Z), Y ~ Multinomial(J, pi).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::kernels::{concentrations, softmax};
use crate::model::{AnnotationDataset, ClassLabels, GaussianPrior, Instance, VoteCounts};
use crate::sampler::derive_seed;

/// Annotations per instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotatorCount {
    Fixed(u32),
    PerInstance(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct SimSpec {
    pub n: usize,
    pub annotators: AnnotatorCount,
    pub prior: GaussianPrior,
    pub labels: Option<ClassLabels>,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::domain("n must be positive"));
        }
        if self.prior.k() < 2 {
            return Err(Error::domain("need at least 2 classes"));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.prior.k() {
                return Err(Error::domain("labels do not match the prior dimension"));
            }
        }
        match &self.annotators {
            AnnotatorCount::Fixed(0) => Err(Error::domain("J must be positive")),
            AnnotatorCount::PerInstance(js) if js.len() != self.n => Err(Error::domain(format!(
                "{} annotator counts for {} instances",
                js.len(),
                self.n
            ))),
            AnnotatorCount::PerInstance(js) if js.contains(&0) => Err(Error::domain("J must be positive")),
            _ => Ok(()),
        }
    }

    fn j(&self, i: usize) -> u32 {
        match &self.annotators {
            AnnotatorCount::Fixed(j) => *j,
            AnnotatorCount::PerInstance(js) => js[i],
        }
    }
}

/// Log of a Gamma(shape, 1) variate. Shapes below 1 use the boost
/// `G(a) = G(a + 1) * U^(1/a)` in log space so tiny shapes do not underflow.
pub fn ln_gamma_variate<R: Rng>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln()
    } else {
        let u: f64 = 1.0 - rng.random::<f64>();
        ln_gamma_variate(shape + 1.0, rng) + u.ln() / shape
    }
}

/// Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| ln_gamma_variate(a, rng)).collect();
    softmax(&logs)
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: Rng>(n: u32, p: &[f64], rng: &mut R) -> Vec<u32> {
    let mut left = u64::from(n);
    let mut mass = 1.0;
    let mut out = vec![0u32; p.len()];
    for (k, &pk) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == p.len() {
            out[k] = left as u32;
            break;
        }
        let q = if mass > 0.0 { (pk / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = Binomial::new(left, q).expect("valid binomial").sample(rng);
        out[k] = x as u32;
        left -= x;
        mass -= pk;
    }
    out
}

/// Draws one latent vector from the prior.
pub fn sample_gaussian<R: Rng>(prior: &GaussianPrior, rng: &mut R) -> Vec<f64> {
    let k = prior.k();
    let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let l = prior.cholesky_l();
    (0..k)
        .map(|i| prior.mu()[i] + (0..=i).map(|j| l[(i, j)] * eps[j]).sum::<f64>())
        .collect()
}

/// Simulated dataset plus the n x K matrix of latent embeddings.
pub fn sample_dataset(spec: &SimSpec) -> Result<(AnnotationDataset, DMatrix<f64>)> {
    spec.validate()?;
    let k = spec.prior.k();
    let labels = match &spec.labels {
        Some(l) => l.clone(),
        None => ClassLabels::new((1..=k).map(|c| format!("class{c}")))?,
    };
    let width = spec.n.to_string().len();
    let mut truth = DMatrix::zeros(spec.n, k);
    let mut instances = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[i as u64]));
        let z = sample_gaussian(&spec.prior, &mut rng);
        let pi = sample_dirichlet(&concentrations(&z), &mut rng);
        let counts = sample_multinomial(spec.j(i), &pi, &mut rng);
        truth.row_mut(i).copy_from_slice(&z);
        instances.push(Instance::new(format!("sim{:0width$}", i + 1), VoteCounts::new(counts)?));
    }
    Ok((AnnotationDataset::new(labels, instances)?, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryScore {
    /// Root mean square error of the fitted prior mean per coordinate.
    pub rmse_mu: f64,
    /// Per-instance total-variation distance between softmax(true Z) and
    /// softmax of the fitted embedding.
    pub tv_distances: Vec<f64>,
}

impl RecoveryScore {
    pub fn median_tv(&self) -> f64 {
        let mut v = self.tv_distances.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn recovery_score(true_mu: &[f64], true_embeddings: &DMatrix<f64>, fitted: &FitResult) -> Result<RecoveryScore> {
    let k = fitted.final_prior.k();
    if true_mu.len() != k || true_embeddings.ncols() != k || true_embeddings.nrows() != fitted.len() {
        return Err(Error::domain("truth and fit have mismatched shapes"));
    }
    let rmse_mu = (true_mu
        .iter()
        .zip(fitted.final_prior.mu())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / k as f64)
        .sqrt();
    let tv_distances = fitted
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let t: Vec<f64> = true_embeddings.row(i).iter().copied().collect();
            total_variation(&softmax(&t), &z.softmax())
        })
        .collect();
    Ok(RecoveryScore { rmse_mu, tv_distances })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multinomial_preserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = sample_dirichlet(&[0.3, 2.0, 0.01, 5.0], &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(sample_multinomial(37, &p, &mut rng).iter().sum::<u32>(), 37);
        }
    }

    #[test]
    fn tiny_shapes_do_not_underflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = sample_dirichlet(&[(-25f64).exp(), (-25f64).exp()], &mut rng);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_small_shape_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = 0.3;
        let n = 200_000;
        let mean = (0..n).map(|_| ln_gamma_variate(shape, &mut rng).exp()).sum::<f64>() / n as f64;
        // sd of the mean = sqrt(shape / n)
        assert!((mean - shape).abs() < 4.0 * (shape / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn spec_validation() {
        let prior = GaussianPrior::isotropic(vec![0.0; 3], 1.0).unwrap();
        let spec = SimSpec {
            n: 3,
            annotators: AnnotatorCount::PerInstance(vec![1, 2]),
            prior: prior.clone(),
            labels: None,
            seed: 0,
        };
        assert!(sample_dataset(&spec).is_err());
        let spec = SimSpec {
            annotators: AnnotatorCount::Fixed(0),
            ..spec
        };
        assert!(sample_dataset(&spec).is_err());
        let spec = SimSpec {
            annotators: AnnotatorCount::PerInstance(vec![1, 5, 9]),
            ..spec
        };
        let (ds, z) = sample_dataset(&spec).unwrap();
        let js: Vec<u32> = ds.instances().iter().map(|i| i.votes.total()).collect();
        assert_eq!(js, vec![1, 5, 9]);
        assert_eq!(z.shape(), (3, 3));
        assert_eq!(ds.instances()[0].id, "sim1");
    }

    #[test]
    fn concentrated_prior_gives_unanimous_votes() {
        let prior = GaussianPrior::isotropic(vec![-10.0, 10.0, -10.0], 1e-12).unwrap();
        let spec = SimSpec {
            n: 500,
            annotators: AnnotatorCount::Fixed(100),
            prior,
            labels: None,
            seed: 9,
        };
        let (ds, _) = sample_dataset(&spec).unwrap();
        let unanimous = ds
            .instances()
            .iter()
            .filter(|i| i.votes.is_unanimous() && i.votes.counts()[1] == 100)
            .count();
        assert!(unanimous as f64 / 500.0 > 0.99);
    }
}
