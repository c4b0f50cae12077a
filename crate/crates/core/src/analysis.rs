//! Post-fit analyses: correlation of embedding dimensions, its spread over
//! MCMC draws, PCA biplot coordinates, concentration ellipses, vote
//! agreement statistics and annotation subsampling.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotationDataset, ClassLabels, Instance, VoteCounts};
use crate::sampler::PosteriorDraws;

/// Metadata key carrying the subsampled annotation count.
pub const J_GROUP_KEY: &str = "J_group";

fn column_name(labels: Option<&ClassLabels>, k: usize) -> String {
    labels.map_or_else(|| format!("column {k}"), |l| format!("class {:?}", l.name(k)))
}

/// Pearson correlation between columns. Constant columns are an error, or
/// yield zero off-diagonal entries when `constant_as_zero` is set.
fn pearson(x: &DMatrix<f64>, constant_as_zero: bool, labels: Option<&ClassLabels>) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    let means: Vec<f64> = (0..k).map(|c| x.column(c).sum() / n as f64).collect();
    let mut s = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        for a in 0..k {
            let da = x[(i, a)] - means[a];
            for b in 0..=a {
                s[(a, b)] += da * (x[(i, b)] - means[b]);
            }
        }
    }
    let sd: Vec<f64> = (0..k).map(|a| s[(a, a)].sqrt()).collect();
    if !constant_as_zero {
        if let Some(c) = sd.iter().position(|&v| v == 0.0) {
            return Err(Error::domain(format!(
                "{} is constant; its correlations are undefined",
                column_name(labels, c)
            )));
        }
    }
    let mut corr = DMatrix::identity(k, k);
    for a in 0..k {
        for b in 0..a {
            let r = if sd[a] == 0.0 || sd[b] == 0.0 {
                0.0
            } else {
                (s[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0)
            };
            corr[(a, b)] = r;
            corr[(b, a)] = r;
        }
    }
    Ok(corr)
}

/// Pearson correlation across instances (rows) of each pair of embedding
/// dimensions (columns). Unit diagonal.
pub fn correlation_matrix(embeddings: &DMatrix<f64>, labels: Option<&ClassLabels>) -> Result<DMatrix<f64>> {
    if embeddings.nrows() < 3 {
        return Err(Error::domain("correlation needs at least 3 instances"));
    }
    pearson(embeddings, false, labels)
}

/// Entrywise standard deviation (divisor S - 1) across retained-draw slices
/// of the slice-wise correlation matrices. Slice `s` pairs the `s`-th draw
/// of every instance. Constant columns within a slice contribute zero.
pub fn correlation_std(draws: &[&PosteriorDraws]) -> Result<DMatrix<f64>> {
    if draws.len() < 3 {
        return Err(Error::domain("correlation_std needs at least 3 instances"));
    }
    let slices = draws[0].n_retained();
    let k = draws[0].k();
    if draws.iter().any(|d| d.n_retained() != slices || d.k() != k) {
        return Err(Error::domain("instances have unequal draw counts or dimensions"));
    }
    if slices == 0 {
        return Err(Error::domain("no retained draws"));
    }
    let slice_corr = |s: usize| {
        let m = DMatrix::from_fn(draws.len(), k, |i, c| draws[i].row(s)[c]);
        pearson(&m, true, None)
    };
    #[cfg(feature = "parallel")]
    let corrs: Vec<DMatrix<f64>> = {
        use rayon::prelude::*;
        (0..slices).into_par_iter().map(slice_corr).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let corrs: Vec<DMatrix<f64>> = (0..slices).map(slice_corr).collect::<Result<_>>()?;

    if slices == 1 {
        return Ok(DMatrix::zeros(k, k));
    }
    let mut mean = DMatrix::zeros(k, k);
    for c in &corrs {
        mean += c;
    }
    mean /= slices as f64;
    let mut var = DMatrix::zeros(k, k);
    for c in &corrs {
        var += (c - &mean).map(|v| v * v);
    }
    let mut std = (var / (slices - 1) as f64).map(f64::sqrt);
    std.fill_diagonal(0.0);
    Ok(std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub corr: DMatrix<f64>,
    pub std: Option<DMatrix<f64>>,
    pub n_instances: usize,
    pub n_draw_slices: usize,
}

impl CorrelationReport {
    pub fn new(
        embeddings: &DMatrix<f64>,
        draws: Option<&[&PosteriorDraws]>,
        labels: Option<&ClassLabels>,
    ) -> Result<Self> {
        let corr = correlation_matrix(embeddings, labels)?;
        let (std, n_draw_slices) = match draws {
            Some(d) => (Some(correlation_std(d)?), d.first().map_or(0, |x| x.n_retained())),
            None => (None, 0),
        };
        Ok(Self {
            corr,
            std,
            n_instances: embeddings.nrows(),
            n_draw_slices,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// n x 2 instance coordinates on the first two components.
    pub scores: DMatrix<f64>,
    /// K x 2 component directions scaled by the component standard deviations.
    pub loadings: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub center: Vec<f64>,
    /// Column scales applied after centering (all ones for covariance PCA).
    pub scale: Vec<f64>,
    /// All K unit component directions as columns, ordered by variance.
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub groups: Option<Vec<String>>,
}

/// PCA of the embeddings; covariance-based unless `standardize` is set.
///
/// Each component is oriented so its largest-magnitude entry is positive.
pub fn pca_biplot(embeddings: &DMatrix<f64>, groups: Option<Vec<String>>, standardize: bool) -> Result<PcaResult> {
    let (n, k) = embeddings.shape();
    if n <= 2 || k < 2 {
        return Err(Error::domain(format!("PCA needs n > 2 and K >= 2, got {n}x{k}")));
    }
    if let Some(g) = &groups {
        if g.len() != n {
            return Err(Error::domain("group labels do not match the number of instances"));
        }
    }
    let center: Vec<f64> = (0..k).map(|c| embeddings.column(c).sum() / n as f64).collect();
    let mut x = DMatrix::from_fn(n, k, |i, c| embeddings[(i, c)] - center[c]);
    let mut scale = vec![1.0; k];
    if standardize {
        for (c, s) in scale.iter_mut().enumerate() {
            let sd = (x.column(c).norm_squared() / (n - 1) as f64).sqrt();
            if sd == 0.0 {
                return Err(Error::domain(format!("column {c} is constant")));
            }
            *s = sd;
            x.column_mut(c).scale_mut(1.0 / sd);
        }
    }
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut components = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    for c in 0..k {
        let col = components.column(c);
        let imax = col.iamax();
        if col[imax] < 0.0 {
            components.column_mut(c).neg_mut();
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 || eigenvalues[1] <= 1e-12 * eigenvalues[0] {
        return Err(Error::domain("embeddings have rank < 2"));
    }
    let explained_variance_ratio = eigenvalues.iter().take(n.min(k)).map(|v| v / total).collect();
    let top = components.columns(0, 2).into_owned();
    let scores = &x * &top;
    let loadings = DMatrix::from_fn(k, 2, |r, c| top[(r, c)] * eigenvalues[c].sqrt());
    Ok(PcaResult {
        scores,
        loadings,
        explained_variance_ratio,
        center,
        scale,
        components,
        eigenvalues,
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub group: String,
    pub center: [f64; 2],
    /// Semi-axes, major first.
    pub axes: [f64; 2],
    /// Angle of the major axis in radians, in (-pi/2, pi/2].
    pub angle: f64,
}

/// Chi-square quantile with two degrees of freedom.
pub fn chi2_2_quantile(p: f64) -> f64 {
    -2.0 * (-p).ln_1p()
}

/// Gaussian concentration ellipse of a 2D point group covering `coverage`.
pub fn concentration_ellipse(scores: &DMatrix<f64>, coverage: f64, group: &str) -> Result<EllipseSpec> {
    let m = scores.nrows();
    if scores.ncols() != 2 {
        return Err(Error::domain("ellipse needs 2-column scores"));
    }
    if m < 3 {
        return Err(Error::domain(format!("group {group:?} has fewer than 3 points")));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::domain("coverage must lie in (0, 1)"));
    }
    let cx = scores.column(0).sum() / m as f64;
    let cy = scores.column(1).sum() / m as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        let (dx, dy) = (scores[(i, 0)] - cx, scores[(i, 1)] - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let d = (m - 1) as f64;
    let cov = DMatrix::from_row_slice(2, 2, &[sxx / d, sxy / d, sxy / d, syy / d]);
    let eig = SymmetricEigen::new(cov);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let (l1, l2) = (eig.eigenvalues[major], eig.eigenvalues[minor]);
    if l2.is_nan() || l2 <= 1e-12 * l1 {
        return Err(Error::domain(format!("group {group:?} has a singular covariance")));
    }
    let q = chi2_2_quantile(coverage);
    let v = eig.eigenvectors.column(major);
    let mut angle = v[1].atan2(v[0]);
    if angle <= -std::f64::consts::FRAC_PI_2 {
        angle += std::f64::consts::PI;
    } else if angle > std::f64::consts::FRAC_PI_2 {
        angle -= std::f64::consts::PI;
    }
    Ok(EllipseSpec {
        group: group.to_string(),
        center: [cx, cy],
        axes: [(q * l1).sqrt(), (q * l2).sqrt()],
        angle,
    })
}

impl EllipseSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

/// Most-voted class; ties go to the lowest index and set the flag.
pub fn majority_vote(votes: &VoteCounts) -> (usize, bool) {
    let c = votes.counts();
    let max = *c.iter().max().expect("non-empty counts");
    let first = c.iter().position(|&v| v == max).expect("max present");
    let tie = c.iter().filter(|&&v| v == max).count() > 1;
    (first, tie)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub full_agreement_fraction: f64,
    pub distinct_patterns: usize,
    /// Instances per majority class (ties resolved to the lowest index).
    pub majority_counts: Vec<usize>,
    pub ties: usize,
}

pub fn agreement_stats(dataset: &AnnotationDataset) -> AgreementStats {
    let mut majority_counts = vec![0; dataset.k()];
    let mut unanimous = 0;
    let mut ties = 0;
    let mut patterns = HashSet::new();
    for inst in dataset.instances() {
        let (m, tie) = majority_vote(&inst.votes);
        majority_counts[m] += 1;
        ties += usize::from(tie);
        unanimous += usize::from(inst.votes.is_unanimous());
        patterns.insert(inst.votes.counts());
    }
    AgreementStats {
        full_agreement_fraction: unanimous as f64 / dataset.len() as f64,
        distinct_patterns: patterns.len(),
        majority_counts,
        ties,
    }
}

/// Cohort sizes and annotation counts, written `n@J,n@J,...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsamplePlan(pub Vec<(usize, u32)>);

impl std::str::FromStr for SubsamplePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let groups = s
            .split(',')
            .map(|g| {
                let (n, j) = g
                    .trim()
                    .split_once('@')
                    .ok_or_else(|| Error::domain(format!("group {g:?} is not n@J")))?;
                let n = n.parse().map_err(|_| Error::domain(format!("bad count in {g:?}")))?;
                let j: u32 = j.parse().map_err(|_| Error::domain(format!("bad J in {g:?}")))?;
                if j == 0 {
                    return Err(Error::domain(format!("J must be positive in {g:?}")));
                }
                Ok((n, j))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(groups))
    }
}

/// Draws `j_target` ballots without replacement from the expanded votes.
pub fn thin_votes<R: Rng>(votes: &VoteCounts, j_target: u32, rng: &mut R) -> Result<VoteCounts> {
    let total = votes.total();
    if j_target > total {
        return Err(Error::domain(format!(
            "cannot sample {j_target} annotations from {total}"
        )));
    }
    let mut remaining: Vec<u32> = votes.counts().to_vec();
    let mut left = total;
    let mut out = vec![0u32; remaining.len()];
    for _ in 0..j_target {
        let mut u = rng.random_range(0..left);
        for (k, r) in remaining.iter_mut().enumerate() {
            if u < *r {
                *r -= 1;
                out[k] += 1;
                break;
            }
            u -= *r;
        }
        left -= 1;
    }
    VoteCounts::new(out)
}

/// Randomly partitions instances into the plan's cohorts and thins each
/// instance's votes to its cohort's J. Output keeps the input order and tags
/// every instance with `J_group`.
pub fn subsample_annotations(
    dataset: &AnnotationDataset,
    plan: &SubsamplePlan,
    seed: u64,
) -> Result<AnnotationDataset> {
    let planned: usize = plan.0.iter().map(|g| g.0).sum();
    if planned != dataset.len() {
        return Err(Error::domain(format!(
            "plan covers {planned} instances but the dataset has {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut target = vec![0u32; dataset.len()];
    let mut pos = 0;
    for &(n, j) in &plan.0 {
        for &i in &order[pos..pos + n] {
            target[i] = j;
        }
        pos += n;
    }
    let instances = dataset
        .instances()
        .iter()
        .zip(&target)
        .map(|(inst, &j)| {
            let votes = thin_votes(&inst.votes, j, &mut rng)
                .map_err(|e| Error::domain(format!("instance {:?}: {e}", inst.id)))?;
            let mut metadata = inst.metadata.clone();
            metadata.insert(J_GROUP_KEY.to_string(), j.to_string());
            Ok(Instance {
                id: inst.id.clone(),
                votes,
                gold: inst.gold,
                metadata,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AnnotationDataset::new(dataset.labels().clone(), instances)
}
