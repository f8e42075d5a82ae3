//! Cross-checks of the hand-rolled metric linear algebra against nalgebra,
//! plus property tests for invariants the metrics must respect.

use lpc_core::metrics::{
    between_class_cov, class_stats, kl_entropy_per_dim, nc1_metric, norm_cov, pinv_psd,
    separation_ratios, symmetric_eigen, within_class_cov, LatentBatch,
};
use lpc_core::rng::Rng;
use lpc_core::tensor::Tensor2D;
use proptest::prelude::*;

fn random_psd(rng: &mut Rng, n: usize, ridge: f64) -> Tensor2D {
    let x = Tensor2D::from_vec(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
    let mut a = x.matmul_tn(&x).unwrap();
    for i in 0..n {
        a.set(i, i, a.get(i, i) + ridge);
    }
    a
}

fn to_na(a: &Tensor2D) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

#[test]
fn eigenvalues_match_nalgebra() {
    let mut rng = Rng::seed(9001);
    for n in [2, 4, 7] {
        let a = random_psd(&mut rng, n, 0.1);
        let (mut ours, _) = symmetric_eigen(&a).unwrap();
        let theirs = to_na(&a).symmetric_eigen();
        let mut reference: Vec<f64> = theirs.eigenvalues.iter().copied().collect();
        ours.sort_by(|x, y| x.total_cmp(y));
        reference.sort_by(|x, y| x.total_cmp(y));
        for (o, r) in ours.iter().zip(&reference) {
            assert!((o - r).abs() < 1e-10 * (1.0 + r.abs()), "n={n}: {o} vs {r}");
        }
    }
}

#[test]
fn pinv_matches_nalgebra_full_rank() {
    let mut rng = Rng::seed(9002);
    for n in [2, 3, 6] {
        let a = random_psd(&mut rng, n, 0.5);
        let ours = pinv_psd(&a, 1e-10).unwrap();
        let theirs = to_na(&a).pseudo_inverse(1e-12).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (ours.get(i, j) - theirs[(i, j)]).abs() < 1e-8,
                    "n={n} ({i},{j}): {} vs {}",
                    ours.get(i, j),
                    theirs[(i, j)]
                );
            }
        }
    }
}

#[test]
fn pinv_matches_nalgebra_rank_deficient() {
    let mut rng = Rng::seed(9003);
    // X is 3x6, so X^T X has rank at most 3 in 6 dimensions.
    let x = Tensor2D::from_vec(3, 6, (0..18).map(|_| rng.normal()).collect()).unwrap();
    let a = x.matmul_tn(&x).unwrap();
    let ours = pinv_psd(&a, 1e-10).unwrap();
    let na_a = to_na(&a);
    let sigma_max = na_a.clone().svd(false, false).singular_values[0];
    let theirs = na_a.pseudo_inverse(1e-10 * sigma_max).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert!(
                (ours.get(i, j) - theirs[(i, j)]).abs() < 1e-8,
                "({i},{j}): {} vs {}",
                ours.get(i, j),
                theirs[(i, j)]
            );
        }
    }
}

fn random_batch(seed: u64, n: usize, p: usize, k: usize) -> LatentBatch {
    let mut rng = Rng::seed(seed);
    let z = Tensor2D::from_vec(n, p, (0..n * p).map(|_| 2.0 * rng.normal() + 0.5).collect())
        .unwrap();
    // Round-robin labels guarantee every class is populated when n >= k.
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    LatentBatch::new(z, labels, k).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn within_cov_is_psd(seed in 0u64..10_000, n in 6usize..40, p in 1usize..5) {
        let batch = random_batch(seed, n, p, 2);
        let stats = class_stats(&batch).unwrap();
        let sw = within_class_cov(&batch, &stats).unwrap();
        // x^T S x >= 0 for a bunch of random probes.
        let mut rng = Rng::seed(seed ^ 0xabcd);
        for _ in 0..8 {
            let x: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
            let mut q = 0.0;
            for i in 0..p {
                for j in 0..p {
                    q += x[i] * sw.get(i, j) * x[j];
                }
            }
            prop_assert!(q >= -1e-9, "quadratic form {q} < 0");
        }
    }

    #[test]
    fn global_mean_identity_holds(seed in 0u64..10_000, n in 8usize..50, k in 2usize..5) {
        let batch = random_batch(seed, n, 3, k);
        let stats = class_stats(&batch).unwrap();
        for c in 0..3 {
            let weighted: f64 = (0..k)
                .map(|y| stats.counts[y] as f64 * stats.means.get(y, c))
                .sum::<f64>() / n as f64;
            prop_assert!((stats.global_mean[c] - weighted).abs() < 1e-12);
        }
    }

    #[test]
    fn nc1_is_nonnegative(seed in 0u64..10_000, n in 8usize..40, p in 1usize..5) {
        let batch = random_batch(seed, n, p, 3);
        let stats = class_stats(&batch).unwrap();
        let sw = within_class_cov(&batch, &stats).unwrap();
        let sb = between_class_cov(&stats);
        let v = nc1_metric(&sw, &sb, 3, p).unwrap();
        prop_assert!(v >= -1e-9, "nc1 {v} < 0");
    }

    #[test]
    fn separation_ratios_are_positive(seed in 0u64..10_000, n in 6usize..30) {
        let batch = random_batch(seed, n, 2, 3);
        let stats = class_stats(&batch).unwrap();
        let ratios = separation_ratios(&batch, &stats).unwrap();
        prop_assert_eq!(ratios.len(), n);
        for r in ratios {
            prop_assert!(r > 0.0 && r.is_finite());
        }
    }

    #[test]
    fn norm_cov_scale_invariant(seed in 0u64..10_000, n in 2usize..30, p in 1usize..5) {
        let mut rng = Rng::seed(seed);
        let z = Tensor2D::from_vec(n, p, (0..n * p).map(|_| rng.normal() + 1.0).collect())
            .unwrap();
        let base = match norm_cov(&z) {
            Ok(v) => v,
            Err(_) => return Ok(()), // all-zero draw; nothing to compare
        };
        // Power-of-two scaling is exact in binary floating point, so the
        // coefficient of variation must not move by a single bit.
        let scaled4 = norm_cov(&z.scale(4.0)).unwrap();
        prop_assert_eq!(base.to_bits(), scaled4.to_bits());
        let scaled3 = norm_cov(&z.scale(3.0)).unwrap();
        prop_assert!((base - scaled3).abs() < 1e-12);
    }

    #[test]
    fn entropy_translation_and_scaling_laws(seed in 0u64..10_000) {
        let mut rng = Rng::seed(seed);
        let n = 60;
        let p = 2;
        let z = Tensor2D::from_vec(n, p, (0..n * p).map(|_| rng.normal()).collect()).unwrap();
        let h = kl_entropy_per_dim(&z, 4).unwrap();

        let shifted = z.map(|v| v + 7.25);
        let h_shift = kl_entropy_per_dim(&shifted, 4).unwrap();
        prop_assert!((h - h_shift).abs() < 1e-9, "shift moved entropy {h} -> {h_shift}");

        // Doubling all coordinates adds exactly ln 2 per dimension.
        let doubled = z.scale(2.0);
        let h_double = kl_entropy_per_dim(&doubled, 4).unwrap();
        prop_assert!(
            (h_double - (h + 2.0_f64.ln())).abs() < 1e-9,
            "doubling: {h_double} vs {} + ln 2",
            h
        );
    }

    #[test]
    fn gmm_fits_stay_in_bounds(seed in 0u64..10_000, n in 4usize..200) {
        let mut rng = Rng::seed(seed);
        let v: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal() - 1.0).collect();
        let fit = lpc_core::metrics::fit_bimodal_gmm(&v).unwrap();
        prop_assert!(fit.mu1 <= fit.mu2);
        prop_assert!((0.0..=1.0).contains(&fit.weight1));
        prop_assert!(fit.sigma1 >= 1e-6 * (1.0 - 1e-12));
        prop_assert!(fit.sigma2 >= 1e-6 * (1.0 - 1e-12));
        prop_assert!(fit.mean_loglik.is_finite());
    }
}
