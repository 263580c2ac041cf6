use cohort_core::cohort::{Cohort, FeatureSpec, Observation, Value};
use cohort_core::preprocess::{
    augment_quadratic, encode_categoricals, mahalanobis_outliers, smote_oversample, RowOrigin, SmoteConfig, SmoteTarget,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn labelled(n: usize) -> impl Strategy<Value = (DMatrix<f64>, Vec<bool>)> {
    (matrix(n, 3), prop::collection::vec(any::<bool>(), n)).prop_filter("both classes need two rows", |(_, y)| {
        let pos = y.iter().filter(|&&b| b).count();
        pos >= 2 && y.len() - pos >= 2
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smote_count_law((x, y) in labelled(16), hundreds in 1u32..6, both in any::<bool>(), seed in any::<u64>()) {
        let target = if both { SmoteTarget::Both } else { SmoteTarget::Minority };
        let config = SmoteConfig { percent: hundreds * 100, k: 3, target };
        let discrete = [false, false, true];
        let out = smote_oversample(&x, &y, &discrete, &config, seed).unwrap();
        let pos = y.iter().filter(|&&b| b).count();
        let neg = y.len() - pos;
        let grown = match target {
            SmoteTarget::Both => y.len(),
            SmoteTarget::Minority if pos < neg => pos,
            SmoteTarget::Minority if neg < pos => neg,
            // tie: one class is chosen, either size is equal
            SmoteTarget::Minority => pos,
        };
        prop_assert_eq!(out.data.nrows(), y.len() + hundreds as usize * grown);
        prop_assert_eq!(out.labels.len(), out.data.nrows());
        for i in 0..y.len() {
            prop_assert_eq!(out.origin[i], RowOrigin::Original { row: i });
            prop_assert_eq!(out.data.row(i), x.row(i));
        }
        for (i, o) in out.origin.iter().enumerate().skip(y.len()) {
            let RowOrigin::Synthetic { parent, neighbor, lambda } = *o else {
                prop_assert!(false, "row {} should be synthetic", i);
                unreachable!()
            };
            prop_assert!((0.0..=1.0).contains(&lambda));
            prop_assert_eq!(y[parent], y[neighbor]);
            prop_assert_eq!(out.labels[i], y[parent]);
            prop_assert_ne!(parent, neighbor);
            for j in 0..3 {
                let (a, b) = (x[(parent, j)], x[(neighbor, j)]);
                let want = if discrete[j] { a } else { a + lambda * (b - a) };
                prop_assert!((out.data[(i, j)] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn mahalanobis_is_affine_invariant(
        x in matrix(20, 3),
        a in matrix(3, 3),
        shift in prop::array::uniform3(-50.0f64..50.0),
    ) {
        prop_assume!(a.determinant().abs() > 0.1);
        let base = mahalanobis_outliers(&x, 0.05).unwrap();
        prop_assume!(base.ridge == 0.0);
        let mut moved = &x * a.transpose();
        for mut row in moved.row_iter_mut() {
            for (c, s) in row.iter_mut().zip(shift) {
                *c += s;
            }
        }
        let after = mahalanobis_outliers(&moved, 0.05).unwrap();
        prop_assume!(after.ridge == 0.0);
        for (d, e) in base.squared.iter().zip(&after.squared) {
            prop_assert!((d - e).abs() <= 1e-6 * (1.0 + d), "{} vs {}", d, e);
        }
        // squared distances of the fitting sample sum to (n - 1) p
        let total: f64 = base.squared.iter().sum();
        prop_assert!((total - 19.0 * 3.0).abs() < 1e-6);
    }

    #[test]
    fn smaller_alpha_flags_a_subset(x in matrix(30, 2), lo in 0.001f64..0.2, hi in 0.2f64..0.9) {
        let strict = mahalanobis_outliers(&x, lo).unwrap();
        let loose = mahalanobis_outliers(&x, hi).unwrap();
        prop_assert!(strict.threshold > loose.threshold);
        for (s, l) in strict.flags.iter().zip(&loose.flags) {
            prop_assert!(!s || *l);
        }
    }

    #[test]
    fn quadratic_columns_square_and_drop_cleanly(
        values in prop::collection::vec((prop::option::weighted(0.8, -100.0f64..100.0), -5.0f64..5.0), 1..20),
    ) {
        let rows = values
            .iter()
            .enumerate()
            .map(|(i, (a, b))| Observation {
                subject_id: format!("s{i}"),
                visit: 1,
                values: vec![a.map(Value::Number), Some(Value::Number(*b))],
                outcome: i % 2 == 0,
            })
            .collect();
        let cohort = Cohort::new(vec![FeatureSpec::continuous("a"), FeatureSpec::continuous("b")], 1, rows).unwrap();
        let (table, _) = encode_categoricals(&cohort).unwrap();
        let wide = augment_quadratic(&table, &["a".into(), "b".into()]).unwrap();
        prop_assert_eq!(&wide.names[2..], &["a^2".to_string(), "b^2".into()]);
        for i in 0..table.nrows() {
            for j in 0..2 {
                prop_assert_eq!(wide.missing[(i, j + 2)], table.missing[(i, j)]);
                if !table.missing[(i, j)] {
                    prop_assert_eq!(wide.data[(i, j + 2)], table.data[(i, j)] * table.data[(i, j)]);
                }
            }
        }
        let narrow = wide.select_columns(&[0, 1]);
        prop_assert_eq!(narrow.names, table.names);
        prop_assert_eq!(narrow.missing, table.missing);
        prop_assert!(narrow.data.iter().zip(table.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
