//! Property tests over randomly generated bases, covariances and datasets.

use gpalm::{
    ee_residual, estimate_moments, fit_gee, fit_identity, AdditiveSplineBasis, BsplineBasis1d,
    ClusterData, CorrelationStructure, CsvSchema, Dataset, FitConfig, KnotRule, Link,
    WorkingCovariance,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_dataset(seed: u64, n: usize, m_max: usize, k_extra: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let clusters = (0..n)
        .map(|i| {
            let m = rng.random_range(1..=m_max);
            let x = DMatrix::from_fn(m, 1 + k_extra, |_, j| {
                if j == 0 {
                    1.0
                } else {
                    normal.sample(&mut rng)
                }
            });
            let t = DMatrix::from_fn(m, d, |_, _| rng.random_range(0.0..1.0));
            let y = DVector::from_fn(m, |r, _| {
                let mut v = 0.4 + 0.3 * normal.sample(&mut rng);
                if k_extra > 0 {
                    v += 0.9 * x[(r, 1)];
                }
                if d > 0 {
                    v += (2.0 * std::f64::consts::PI * (t[(r, 0)] - 0.5)).sin();
                }
                v
            });
            ClusterData::new(format!("c{i}"), y, x, t, (0..m as i64).collect()).unwrap()
        })
        .collect();
    let x_names = (0..=k_extra)
        .map(|j| if j == 0 { "intercept".into() } else { format!("x{j}") })
        .collect();
    let t_names = (0..d).map(|j| format!("t{j}")).collect();
    Dataset::new(clusters, x_names, t_names).unwrap()
}

fn basis_for(dataset: &Dataset, knots: usize) -> AdditiveSplineBasis {
    AdditiveSplineBasis::from_pooled(
        &dataset.pooled_t(),
        3,
        &vec![knots; dataset.d()],
        KnotRule::Quantile,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_of_unity_everywhere(
        degree in 1usize..=4,
        n_interior in 0usize..=5,
        a in -3.0f64..3.0,
        width in 0.5f64..4.0,
        jitter in proptest::collection::vec(-0.3f64..0.3, 5),
        t_frac in -0.2f64..1.2,
    ) {
        let b = a + width;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|j| {
                let base = a + width * j as f64 / (n_interior + 1) as f64;
                base + jitter[j - 1] * width / (n_interior + 1) as f64
            })
            .collect();
        let basis = BsplineBasis1d::new(degree, (a, b), interior).unwrap();
        let t = a + t_frac * width;
        let v = basis.eval(t);
        let sum: f64 = v.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn working_covariance_positive_definite(
        m in 1usize..=20,
        rho_frac in -0.95f64..0.95,
        sigma2 in 0.1f64..5.0,
        ar in proptest::bool::ANY,
    ) {
        let structure = if ar {
            CorrelationStructure::Ar1
        } else {
            CorrelationStructure::Exchangeable
        };
        let (lo, hi) = structure.valid_rho_range(m);
        let rho = if rho_frac >= 0.0 { rho_frac * hi } else { -rho_frac * lo };
        let spec = WorkingCovariance::new(structure, rho, sigma2);
        let idx: Vec<i64> = (0..m as i64).collect();
        let v = spec.build_v(m, &idx).unwrap();
        prop_assert!(v.clone().cholesky().is_some());
        let vinv = spec.build_v_inverse(m, &idx).unwrap();
        let prod = &v * &vinv;
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((prod[(i, j)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn moment_estimate_invariant_to_within_cluster_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut residuals = Vec::new();
        let mut idx = Vec::new();
        for _ in 0..20 {
            let m = rng.random_range(2..=5);
            residuals.push(DVector::from_fn(m, |_, _| normal.sample(&mut rng)));
            idx.push((0..m as i64).collect::<Vec<_>>());
        }
        let a = estimate_moments(&residuals, &idx, CorrelationStructure::Exchangeable, 2).unwrap();
        // reverse every cluster's entries (indices permute with them)
        let rev: Vec<DVector<f64>> = residuals
            .iter()
            .map(|r| DVector::from_fn(r.len(), |i, _| r[r.len() - 1 - i]))
            .collect();
        let b = estimate_moments(&rev, &idx, CorrelationStructure::Exchangeable, 2).unwrap();
        prop_assert!((a.0 - b.0).abs() < 1e-12);
        prop_assert!((a.1 - b.1).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn closed_form_matches_scoring_on_random_instances(
        seed in 0u64..10_000,
        n in 5usize..20,
        k_extra in 0usize..=2,
        d in 1usize..=2,
    ) {
        let dataset = random_dataset(seed, n, 5, k_extra, d);
        let basis = basis_for(&dataset, 1);
        let spec = WorkingCovariance::new(CorrelationStructure::Exchangeable, 0.3, 1.0);
        let closed = fit_identity(&dataset, &basis, &spec).unwrap();
        let config = FitConfig { corr_update_rounds: 1, ..FitConfig::default() };
        let scored = fit_gee(&dataset, &basis, Link::Identity, &spec, &config).unwrap();
        let a = closed.theta();
        let b = scored.theta();
        for i in 0..a.len() {
            prop_assert!((a[i] - b[i]).abs() < 1e-8, "coordinate {} differs: {} vs {}", i, a[i], b[i]);
        }
    }

    #[test]
    fn estimating_equations_hold_at_every_fit(
        seed in 0u64..10_000,
        n in 6usize..16,
        structure_pick in 0usize..3,
    ) {
        let dataset = random_dataset(seed, n, 5, 1, 1);
        let basis = basis_for(&dataset, 1);
        let structure = [
            CorrelationStructure::Independence,
            CorrelationStructure::Exchangeable,
            CorrelationStructure::Ar1,
        ][structure_pick];
        let spec = WorkingCovariance::new(structure, 0.0, 1.0);
        let config = FitConfig::default();
        let fit = fit_gee(&dataset, &basis, Link::Identity, &spec, &config).unwrap();
        let y_norm = dataset
            .clusters
            .iter()
            .map(|c| c.y.norm_squared())
            .sum::<f64>()
            .sqrt();
        let norm = ee_residual(
            &dataset,
            &basis,
            Link::Identity,
            &fit.spec,
            &fit.beta,
            &fit.gamma,
        )
        .unwrap();
        prop_assert!(
            norm <= 10.0 * config.tol * (1.0 + y_norm),
            "ee residual {} vs budget {}",
            norm,
            10.0 * config.tol * (1.0 + y_norm)
        );
    }

    #[test]
    fn csv_round_trip_identity(
        seed in 0u64..10_000,
        n in 1usize..6,
        scale_exp in -8i32..8,
    ) {
        let mut dataset = random_dataset(seed, n, 4, 1, 2);
        let scale = 10f64.powi(scale_exp);
        for c in dataset.clusters.iter_mut() {
            c.y *= scale;
        }
        let mut buf = Vec::new();
        dataset.write_csv(&mut buf).unwrap();
        let schema: CsvSchema = dataset.round_trip_schema();
        let back = Dataset::read_csv(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(dataset.n_clusters(), back.n_clusters());
        for (a, b) in dataset.clusters.iter().zip(&back.clusters) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.y, &b.y);
            prop_assert_eq!(&a.x, &b.x);
            prop_assert_eq!(&a.t, &b.t);
            prop_assert_eq!(&a.obs_index, &b.obs_index);
        }
    }
}
