use egt_core::analysis::{
    agreement_stats, chi2_2_quantile, concentration_ellipse, correlation_matrix, correlation_std, majority_vote,
    pca_biplot, subsample_annotations, thin_votes, SubsamplePlan, J_GROUP_KEY,
};
use egt_core::sampler::PosteriorDraws;
use egt_core::{AnnotationDataset, VoteCounts};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_matrix(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = DMatrix::from_fn(n, k, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    // Mix columns so they correlate.
    let mix = DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            1.0
        } else {
            0.4 * (r as f64 - c as f64).signum()
        }
    });
    base * mix
}

fn corr_oracle(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    DMatrix::from_fn(x.ncols(), x.ncols(), |a, b| {
        let (ca, cb) = (x.column(a), x.column(b));
        let (ma, mb) = (ca.sum() / n, cb.sum() / n);
        let sab: f64 = ca.iter().zip(cb.iter()).map(|(u, v)| (u - ma) * (v - mb)).sum();
        let saa: f64 = ca.iter().map(|u| (u - ma).powi(2)).sum();
        let sbb: f64 = cb.iter().map(|v| (v - mb).powi(2)).sum();
        sab / (saa * sbb).sqrt()
    })
}

#[test]
fn correlation_matches_definition_and_is_a_correlation_matrix() {
    let x = random_matrix(200, 4, 1);
    let c = correlation_matrix(&x, None).unwrap();
    assert!((&c - corr_oracle(&x)).abs().max() < 1e-12);
    assert_eq!(c, c.transpose());
    assert!(c.diagonal().iter().all(|&d| d == 1.0));
    let eig = SymmetricEigen::new(c.clone());
    assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12));
}

#[test]
fn constant_column_is_named_in_the_error() {
    let mut x = random_matrix(10, 3, 2);
    x.column_mut(1).fill(0.5);
    let labels = egt_core::ClassLabels::new(["c", "n", "e"]).unwrap();
    let err = correlation_matrix(&x, Some(&labels)).unwrap_err().to_string();
    assert!(err.contains("\"n\""), "{err}");
}

#[test]
fn correlation_std_two_slice_fixture() {
    // Slice 1: (1,2), (2,4), (3,5) gives r = sqrt(27/28).
    // Slice 2: (1,1), (2,3), (3,2) gives r = 1/2.
    // With divisor S - 1 = 1 the std is |r1 - r2| / sqrt(2).
    let inst = |a: [f64; 2], b: [f64; 2]| PosteriorDraws::from_rows(&[a.to_vec(), b.to_vec()], 0.3, 0).unwrap();
    let d = [
        inst([1.0, 2.0], [1.0, 1.0]),
        inst([2.0, 4.0], [2.0, 3.0]),
        inst([3.0, 5.0], [3.0, 2.0]),
    ];
    let refs: Vec<&PosteriorDraws> = d.iter().collect();
    let s = correlation_std(&refs).unwrap();
    let want = ((27.0f64 / 28.0).sqrt() - 0.5) / 2f64.sqrt();
    assert!((s[(0, 1)] - want).abs() < 1e-12, "{} vs {want}", s[(0, 1)]);
    assert_eq!(s[(0, 1)], s[(1, 0)]);
    assert_eq!(s[(0, 0)], 0.0);
}

#[test]
fn pca_components_are_orthonormal_and_ordered() {
    let x = random_matrix(300, 4, 3);
    let p = pca_biplot(&x, None, false).unwrap();
    let gram = p.components.transpose() * &p.components;
    assert!((gram - DMatrix::identity(4, 4)).abs().max() < 1e-10);
    assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    assert!((p.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for c in 0..4 {
        let col = p.components.column(c);
        assert!(col[col.iamax()] > 0.0);
    }
    // Score variances equal the leading eigenvalues.
    for c in 0..2 {
        let s = p.scores.column(c);
        let var = s.norm_squared() / 299.0;
        assert!((var - p.eigenvalues[c]).abs() < 1e-9);
    }
}

#[test]
fn pca_reconstructs_rank_two_data_exactly() {
    let a = random_matrix(50, 2, 4);
    let b = DMatrix::from_row_slice(2, 4, &[1.0, 0.5, -0.3, 2.0, 0.0, 1.0, 0.7, -1.0]);
    let x = a * b;
    let p = pca_biplot(&x, None, false).unwrap();
    let top = p.components.columns(0, 2);
    let mut recon = &p.scores * top.transpose();
    for c in 0..4 {
        recon.column_mut(c).add_scalar_mut(p.center[c]);
    }
    assert!((recon - &x).abs().max() < 1e-10);
    assert!(p.eigenvalues[2] < 1e-10 && p.eigenvalues[3] < 1e-10);
}

#[test]
fn pca_rejects_rank_one() {
    let a = random_matrix(20, 1, 5);
    let x = &a * DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
    assert!(pca_biplot(&x, None, false).is_err());
}

#[test]
fn standardized_pca_matches_correlation_eigenvalues() {
    let x = random_matrix(100, 3, 6);
    let p = pca_biplot(&x, None, true).unwrap();
    let mut ev: Vec<f64> = SymmetricEigen::new(correlation_matrix(&x, None).unwrap())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    for (a, b) in p.eigenvalues.iter().zip(&ev) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn ellipse_covers_ninety_five_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts = DMatrix::from_fn(10_000, 2, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.2, 0.5]);
    let scores = DMatrix::from_fn(10_000, 2, |i, c| {
        3.0 + (0..2).map(|j| l[(c, j)] * pts[(i, j)]).sum::<f64>()
    });
    let e = concentration_ellipse(&scores, 0.95, "g").unwrap();
    let inside = (0..10_000)
        .filter(|&i| e.contains(scores[(i, 0)], scores[(i, 1)]))
        .count();
    let frac = inside as f64 / 10_000.0;
    assert!((0.94..=0.96).contains(&frac), "{frac}");
    assert!(e.axes[0] >= e.axes[1]);
    assert!((chi2_2_quantile(0.95) - 5.991_464_547_107_979).abs() < 1e-12);
}

#[test]
fn majority_vote_ties_go_low() {
    assert_eq!(majority_vote(&VoteCounts::new(vec![46, 53, 1]).unwrap()), (1, false));
    assert_eq!(majority_vote(&VoteCounts::new(vec![40, 20, 40]).unwrap()), (0, true));
}

#[test]
fn agreement_stats_of_table_rows() {
    let ds = AnnotationDataset::from_counts(
        ["contradiction", "neutral", "entailment"],
        &[
            vec![0, 0, 100],
            vec![42, 14, 44],
            vec![46, 53, 1],
            vec![34, 31, 35],
            vec![0, 0, 100],
        ],
    )
    .unwrap();
    let s = agreement_stats(&ds);
    assert_eq!(s.distinct_patterns, 4);
    assert_eq!(s.majority_counts, vec![0, 1, 4]);
    assert!((s.full_agreement_fraction - 0.4).abs() < 1e-15);
    assert_eq!(s.ties, 0);
}

#[test]
fn hypergeometric_thinning_means() {
    let votes = VoteCounts::new(vec![42, 14, 44]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let reps = 10_000;
    let mut sums = [0.0f64; 3];
    for _ in 0..reps {
        let t = thin_votes(&votes, 5, &mut rng).unwrap();
        assert_eq!(t.total(), 5);
        for (s, &c) in sums.iter_mut().zip(t.counts()) {
            *s += f64::from(c);
        }
    }
    for (k, &m) in [42.0, 14.0, 44.0].iter().enumerate() {
        let p = m / 100.0;
        let mean = 5.0 * p;
        let var = 5.0 * p * (1.0 - p) * 95.0 / 99.0;
        let got = sums[k] / reps as f64;
        assert!(
            (got - mean).abs() < 3.0 * (var / reps as f64).sqrt(),
            "class {k}: {got} vs {mean}"
        );
    }
    assert!(thin_votes(&votes, 101, &mut rng).is_err());
}

#[test]
fn cohort_plan_partitions_instances() {
    let rows: Vec<Vec<u32>> = (0..1514).map(|i| vec![i % 50, 30, 70 - i % 50]).collect();
    let ds = AnnotationDataset::from_counts(["c", "n", "e"], &rows).unwrap();
    let plan: SubsamplePlan = "514@100,500@25,500@5".parse().unwrap();
    let out = subsample_annotations(&ds, &plan, 3).unwrap();
    let count = |j: u32| out.instances().iter().filter(|i| i.votes.total() == j).count();
    assert_eq!((count(100), count(25), count(5)), (514, 500, 500));
    for (a, b) in ds.instances().iter().zip(out.instances()) {
        assert_eq!(a.id, b.id);
        assert_eq!(b.metadata[J_GROUP_KEY], b.votes.total().to_string());
        assert!(b.votes.counts().iter().zip(a.votes.counts()).all(|(x, y)| x <= y));
    }
    let again = subsample_annotations(&ds, &plan, 3).unwrap();
    assert_eq!(out, again);
    assert!(subsample_annotations(&ds, &"500@5".parse().unwrap(), 3).is_err());
    assert!("5x3".parse::<SubsamplePlan>().is_err());
}

proptest! {
    #[test]
    fn correlation_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let x = random_matrix(30, 3, seed);
        let y = x.map(|v| a * v + b);
        let cx = correlation_matrix(&x, None).unwrap();
        let cy = correlation_matrix(&y, None).unwrap();
        prop_assert!((cx - cy).abs().max() < 1e-10);
    }

    #[test]
    fn thinning_never_exceeds_source(c in proptest::collection::vec(0u32..20, 3), j in 1u32..10, seed in 0u64..100) {
        prop_assume!(c.iter().sum::<u32>() >= j);
        let v = VoteCounts::new(c.clone()).unwrap();
        let t = thin_votes(&v, j, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(t.total(), j);
        prop_assert!(t.counts().iter().zip(&c).all(|(x, y)| x <= y));
    }
}
