use blupcal::{
    blup_oracle, estimate, fit_balanced_anova, fit_reml_profiled, OutcomePanel, PipelineSpec, ReplicatePanel,
    VarianceComponents,
};
use blupcal::model::Family;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn panel_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (3usize..12, 2usize..6).prop_flat_map(|(n, j)| {
        (
            proptest::collection::vec(-20.0f64..20.0, n),
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, j), n),
        )
            .prop_map(|(centers, noise)| {
                centers
                    .iter()
                    .zip(noise)
                    .map(|(c, row)| row.into_iter().map(|e| c + e).collect())
                    .collect()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anova_matches_reml_in_the_interior(rows in panel_strategy()) {
        let panel = ReplicatePanel::from_rows(&rows).unwrap();
        let anova = fit_balanced_anova(&panel).unwrap();
        prop_assume!(anova.tau2 > 0.0);
        let reml = fit_reml_profiled(&panel).unwrap();
        prop_assert!((anova.tau2 - reml.tau2).abs() <= 1e-6 * anova.tau2.max(1.0));
        prop_assert!((anova.sigma2 - reml.sigma2).abs() <= 1e-6 * anova.sigma2.max(1.0));
        prop_assert!((anova.gamma0_hat() - reml.gamma0_hat()).abs() <= 1e-9 * anova.gamma0_hat().abs().max(1.0));
    }

    #[test]
    fn reml_is_invariant_to_subject_order(rows in panel_strategy()) {
        let panel = ReplicatePanel::from_rows(&rows).unwrap();
        let mut rev = rows.clone();
        rev.reverse();
        let a = fit_reml_profiled(&panel).unwrap();
        let b = fit_reml_profiled(&ReplicatePanel::from_rows(&rev).unwrap()).unwrap();
        // Summation order only perturbs a flat optimum.
        prop_assert!((a.tau2 - b.tau2).abs() <= 1e-6 * a.tau2.max(1.0));
        prop_assert!((a.sigma2 - b.sigma2).abs() <= 1e-6 * a.sigma2.max(1.0));
    }

    #[test]
    fn oracle_shrinkage_in_unit_interval_and_increasing(
        sx2 in 0.01f64..10.0, su2 in 0.01f64..10.0, rho in 0.0f64..0.95, gamma1 in 0.1f64..3.0
    ) {
        let vc = VarianceComponents::new(0.0, gamma1, sx2, su2, rho).unwrap();
        // Subject i observes its first i + 1 replicates.
        let observed = DMatrix::from_fn(8, 8, |i, r| r <= i);
        let ids = (0..8).map(|i| format!("s{i}")).collect();
        let panel = ReplicatePanel::new(ids, DMatrix::from_element(8, 8, 1.0), observed, None).unwrap();
        let k = blup_oracle(&panel, &vc).unwrap().shrinkage;
        for w in k.as_slice().windows(2) {
            prop_assert!(w[0] > 0.0 && w[1] < 1.0);
            prop_assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn covariate_shift_moves_only_the_intercept(shift in -5.0f64..5.0, rows in panel_strategy()) {
        let panel = ReplicatePanel::from_rows(&rows).unwrap();
        let n = panel.n_subjects();
        let ids = panel.subject_ids().to_vec();
        let c = DMatrix::from_fn(n, 1, |i, _| ((i * 7) % 5) as f64);
        let y = DVector::from_fn(n, |i, _| 1.0 + 0.5 * panel.subject_mean(i) + c[(i, 0)] + ((i * 3) % 4) as f64 * 0.1);
        prop_assume!(n > 3);
        let base = OutcomePanel::new(ids.clone(), y.clone(), c.clone(), vec!["c".into()]).unwrap();
        let moved = OutcomePanel::new(ids, y, c.map(|v| v + shift), vec!["c".into()]).unwrap();
        let spec = PipelineSpec::naive(Family::Linear);
        let (Ok(a), Ok(b)) = (estimate(&panel, &base, &spec), estimate(&panel, &moved, &spec)) else {
            return Ok(());
        };
        prop_assert!((a.coefficients[1] - b.coefficients[1]).abs() < 1e-8);
        prop_assert!((a.coefficients[2] - b.coefficients[2]).abs() < 1e-8);
        prop_assert!((a.coefficients[0] - shift * a.coefficients[2] - b.coefficients[0]).abs() < 1e-7);
        prop_assert!((a.asymptotic_se[1] - b.asymptotic_se[1]).abs() < 1e-8);
    }

    #[test]
    fn naive_ignores_replicate_order(rows in panel_strategy()) {
        let panel = ReplicatePanel::from_rows(&rows).unwrap();
        let flipped: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let flipped = ReplicatePanel::from_rows(&flipped).unwrap();
        let n = panel.n_subjects();
        prop_assume!(n > 3);
        let y = DVector::from_fn(n, |i, _| (i as f64).sin());
        let out = OutcomePanel::new(panel.subject_ids().to_vec(), y, DMatrix::zeros(n, 0), vec![]).unwrap();
        let spec = PipelineSpec::naive(Family::Linear);
        let a = estimate(&panel, &out, &spec).unwrap();
        let b = estimate(&flipped, &out, &spec).unwrap();
        for k in 0..2 {
            prop_assert!((a.coefficients[k] - b.coefficients[k]).abs() < 1e-9 * a.coefficients[k].abs().max(1.0));
        }
    }
}
