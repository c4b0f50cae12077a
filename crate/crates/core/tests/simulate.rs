use std::collections::HashMap;

use egt_core::em::{fit, EmConfig};
use egt_core::kernels::log_dirichlet_multinomial_marginal;
use egt_core::sampler::McmcConfig;
use egt_core::simulate::{recovery_score, sample_dataset, total_variation, AnnotatorCount, SimSpec};
use egt_core::{ClassLabels, Embedding, GaussianPrior, VoteCounts};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn spec(n: usize, j: u32, mu: Vec<f64>, seed: u64) -> SimSpec {
    let k = mu.len();
    SimSpec {
        n,
        annotators: AnnotatorCount::Fixed(j),
        prior: GaussianPrior::new(mu, DMatrix::identity(k, k)).unwrap(),
        labels: None,
        seed,
    }
}

#[test]
fn vote_pattern_frequencies_match_prior_predictive() {
    let mu = vec![0.5, 0.0, -0.5];
    let n = 40_000;
    let (ds, _) = sample_dataset(&spec(n, 4, mu.clone(), 1)).unwrap();
    let mut freq: HashMap<Vec<u32>, usize> = HashMap::new();
    for inst in ds.instances() {
        *freq.entry(inst.votes.counts().to_vec()).or_default() += 1;
    }
    // Prior predictive by averaging the Dirichlet-Multinomial kernel over
    // independent prior draws.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let zs: Vec<Embedding> = (0..20_000)
        .map(|_| {
            let z: Vec<f64> = mu
                .iter()
                .map(|m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + e
                })
                .collect();
            Embedding::new(z).unwrap()
        })
        .collect();
    let mut total = 0.0;
    for a in 0..=4u32 {
        for b in 0..=4 - a {
            let y = vec![a, b, 4 - a - b];
            let v = VoteCounts::new(y.clone()).unwrap();
            let p = zs
                .iter()
                .map(|z| log_dirichlet_multinomial_marginal(&v, z).unwrap().exp())
                .sum::<f64>()
                / zs.len() as f64;
            total += p;
            let got = *freq.get(&y).unwrap_or(&0) as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt() + 0.004 * p;
            assert!((got - p).abs() < 4.0 * se, "{y:?}: {got} vs {p}");
        }
    }
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn symmetric_prior_gives_symmetric_vote_shares() {
    let (ds, z) = sample_dataset(&spec(6000, 10, vec![0.0; 3], 2)).unwrap();
    for k in 0..3 {
        let share = ds
            .instances()
            .iter()
            .map(|i| f64::from(i.votes.counts()[k]))
            .sum::<f64>()
            / 60_000.0;
        assert!((share - 1.0 / 3.0).abs() < 0.02, "class {k}: {share}");
        let zm = z.column(k).sum() / 6000.0;
        assert!(zm.abs() < 4.0 / 6000f64.sqrt());
    }
}

#[test]
fn simulation_is_seeded_and_labelled() {
    let mut s = spec(20, 7, vec![0.0, 1.0], 5);
    s.labels = Some(ClassLabels::new(["yes", "no"]).unwrap());
    let (a, za) = sample_dataset(&s).unwrap();
    let (b, zb) = sample_dataset(&s).unwrap();
    assert_eq!(a, b);
    assert_eq!(za, zb);
    assert_eq!(a.labels().names(), &["yes", "no"]);
    assert_eq!(a.instances()[0].id, "sim01");
    s.seed = 6;
    assert_ne!(sample_dataset(&s).unwrap().1, za);
}

#[test]
fn recovery_score_of_a_small_fit() {
    let s = spec(60, 50, vec![1.0, 0.0, -1.0], 3);
    let (ds, truth) = sample_dataset(&s).unwrap();
    let cfg = EmConfig {
        max_iterations: 5,
        mcmc: McmcConfig {
            n_retained: 200,
            thin: 5,
            ..McmcConfig::default()
        },
        ..EmConfig::default()
    };
    let f = fit(&ds, &cfg).unwrap();
    let score = recovery_score(&[1.0, 0.0, -1.0], &truth, &f).unwrap();
    assert_eq!(score.tv_distances.len(), 60);
    assert!(score.tv_distances.iter().all(|t| (0.0..=1.0).contains(t)));
    assert!(score.median_tv() < 0.3);
    assert!(recovery_score(&[1.0, 0.0], &truth, &f).is_err());
    assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
}
