//! Browser bindings for the embedded ground truth demo page.
//!
//! Each exported function has a plain Rust counterpart that returns a
//! serializable struct, so the logic is testable without a browser.

use egt_core::analysis::{majority_vote, pca_biplot};
use egt_core::em::{embed_new_instance, fit, EmConfig};
use egt_core::kernels::{moment_surface, GridRange};
use egt_core::sampler::McmcConfig;
use egt_core::simulate::{recovery_score, sample_dataset, AnnotatorCount, SimSpec};
use egt_core::{GaussianPrior, VoteCounts};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest grid side accepted from the page.
const MAX_GRID_SIDE: usize = 401;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentGrid {
    /// Shared axis values for z1 and z2.
    pub axis: Vec<f64>,
    /// Row-major by z1, then z2.
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

/// Beta mean and log-variance on a square grid over `[lo, hi]`.
pub fn moment_grid(lo: f64, hi: f64, step: f64) -> Result<MomentGrid, String> {
    let range = GridRange::new(lo, hi, step).map_err(|e| e.to_string())?;
    let axis = range.points();
    if axis.len() > MAX_GRID_SIDE {
        return Err(format!(
            "grid has {} points per side, limit is {MAX_GRID_SIDE}",
            axis.len()
        ));
    }
    let pts = moment_surface(&range, &range).map_err(|e| e.to_string())?;
    Ok(MomentGrid {
        axis,
        mean: pts.iter().map(|p| p.mean).collect(),
        log_variance: pts.iter().map(|p| p.log_variance).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddedVotes {
    pub z: Vec<f64>,
    /// Softmax of the posterior mean embedding.
    pub probabilities: Vec<f64>,
    /// Posterior standard deviation of each coordinate.
    pub sd: Vec<f64>,
    /// Observed vote shares, for comparison.
    pub shares: Vec<f64>,
}

/// Posterior mean embedding of one vote vector under an isotropic prior.
pub fn embed_votes(counts: &[u32], mu: &[f64], variance: f64, seed: u64) -> Result<EmbeddedVotes, String> {
    let votes = VoteCounts::new(counts.to_vec()).map_err(|e| e.to_string())?;
    let prior = GaussianPrior::isotropic(mu.to_vec(), variance).map_err(|e| e.to_string())?;
    let mcmc = McmcConfig {
        seed,
        ..McmcConfig::robust()
    };
    let (z, cov) = embed_new_instance(&votes, &prior, &mcmc).map_err(|e| e.to_string())?;
    let total = f64::from(votes.total());
    Ok(EmbeddedVotes {
        probabilities: z.softmax(),
        sd: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        shares: votes.counts().iter().map(|&c| f64::from(c) / total).collect(),
        z: z.into_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiplotDemo {
    pub labels: Vec<String>,
    /// First and second principal component scores per instance.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Majority-vote class index per instance.
    pub majority: Vec<usize>,
    /// Loading arrow tip per class.
    pub loadings: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    pub true_mu: Vec<f64>,
    pub fitted_mu: Vec<f64>,
    pub median_tv: f64,
    pub iterations: usize,
}

/// Simulate a three-class dataset, fit it with a light EM budget and
/// project the embeddings onto their first two principal components.
pub fn simulate_and_fit(n: usize, j: u32, seed: u64) -> Result<BiplotDemo, String> {
    let true_mu = vec![1.0, 0.0, -1.0];
    let spec = SimSpec {
        n,
        annotators: AnnotatorCount::Fixed(j),
        prior: GaussianPrior::isotropic(true_mu.clone(), 1.0).map_err(|e| e.to_string())?,
        labels: None,
        seed,
    };
    let (ds, truth) = sample_dataset(&spec).map_err(|e| e.to_string())?;
    let cfg = EmConfig {
        max_iterations: 10,
        min_iterations: 3,
        mcmc: McmcConfig {
            n_retained: 200,
            thin: 5,
            seed,
            ..McmcConfig::default()
        },
        ..EmConfig::default()
    };
    let f = fit(&ds, &cfg).map_err(|e| e.to_string())?;
    let pca = pca_biplot(&f.embedding_matrix(), None, false).map_err(|e| e.to_string())?;
    let score = recovery_score(&true_mu, &truth, &f).map_err(|e| e.to_string())?;
    Ok(BiplotDemo {
        labels: ds.labels().names().to_vec(),
        x: pca.scores.column(0).iter().copied().collect(),
        y: pca.scores.column(1).iter().copied().collect(),
        majority: ds.instances().iter().map(|i| majority_vote(&i.votes).0).collect(),
        loadings: (0..pca.loadings.nrows())
            .map(|r| [pca.loadings[(r, 0)], pca.loadings[(r, 1)]])
            .collect(),
        explained: [pca.explained_variance_ratio[0], pca.explained_variance_ratio[1]],
        true_mu,
        fitted_mu: f.final_prior.mu().to_vec(),
        median_tv: score.median_tv(),
        iterations: f.iterations_run,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<JsValue, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_wasm_bindgen::to_value(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = momentGrid)]
pub fn moment_grid_js(lo: f64, hi: f64, step: f64) -> Result<JsValue, JsError> {
    to_js(moment_grid(lo, hi, step))
}

#[wasm_bindgen(js_name = embedVotes)]
pub fn embed_votes_js(counts: Vec<u32>, mu: Vec<f64>, variance: f64, seed: u32) -> Result<JsValue, JsError> {
    to_js(embed_votes(&counts, &mu, variance, u64::from(seed)))
}

#[wasm_bindgen(js_name = simulateAndFit)]
pub fn simulate_and_fit_js(n: u32, j: u32, seed: u32) -> Result<JsValue, JsError> {
    to_js(simulate_and_fit(n as usize, j, u64::from(seed)))
}
