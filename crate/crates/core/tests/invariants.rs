//! Property tests for invariants that hold for any input.

use proptest::prelude::*;

use concm::augment::transfer_weights;
use concm::augment::ClassStats;
use concm::eval::{harmonic_mean, ncm_classify};
use concm::geometry::{
    check_geometric_optimality, random_optimal_structure, theorem1_update, ColumnSource, InitialStructure,
};
use concm::Matrix;

fn columns(d: usize, n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, d * n).prop_map(move |v| Matrix::new(d, n, v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (2usize..10).prop_flat_map(|n| (Just(n), n + 1..n + 6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structure_update_is_always_optimal(m in dims().prop_flat_map(|(n, d)| columns(d, n))) {
        let n = m.cols();
        let init = InitialStructure::from_columns(m, (0..n).collect(), vec![ColumnSource::Novel; n]).unwrap();
        let update = theorem1_update(&init).unwrap();
        prop_assert!(check_geometric_optimality(update.structure.columns()) < 1e-9);
    }

    #[test]
    fn ncm_ignores_positive_rescaling(
        (n, d) in dims(),
        seed in any::<u64>(),
        z in prop::collection::vec(-1.0f64..1.0, 16),
        s in 0.01f64..100.0,
    ) {
        let structure = random_optimal_structure(n, d, seed).unwrap();
        let z = &z[..d];
        let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
        prop_assert_eq!(ncm_classify(z, &structure), ncm_classify(&scaled, &structure));
    }

    #[test]
    fn transfer_weights_form_a_distribution(
        means in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        p in prop::collection::vec(-1.0f64..1.0, 4),
        gamma in 0.0f64..32.0,
    ) {
        prop_assume!(p.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(means.iter().all(|m| m.iter().any(|v| v.abs() > 1e-3)));
        let base: Vec<ClassStats> = means
            .iter()
            .enumerate()
            .map(|(i, m)| ClassStats {
                class_id: i,
                name: format!("c{i}"),
                mean: m.clone(),
                cov_diag: vec![1.0; 4],
                exact: true,
            })
            .collect();
        let w = transfer_weights(&p, &base, gamma).unwrap();
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_lies_between_its_inputs(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let hm = harmonic_mean(a, b);
        prop_assert!(hm <= a.max(b) + 1e-12);
        prop_assert!(hm >= a.min(b) - 1e-12);
    }
}
