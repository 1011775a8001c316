use proptest::prelude::*;
use zed::eval::{balanced_accuracy, roc_auc, threshold_sweep};
use zed::FeatureVector;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec((0i32..40).prop_map(|v| f64::from(v) / 4.0), 1..100)
}

fn brute_auc(real: &[f64], fake: &[f64]) -> f64 {
    let mut wins = 0.0;
    for f in fake {
        for r in real {
            if f > r {
                wins += 1.0;
            } else if f == r {
                wins += 0.5;
            }
        }
    }
    wins / (real.len() * fake.len()) as f64
}

proptest! {
    #[test]
    fn auc_equals_pairwise_count(real in scores(), fake in scores()) {
        prop_assert_eq!(roc_auc(&real, &fake).unwrap().auc, brute_auc(&real, &fake));
    }

    #[test]
    fn auc_survives_increasing_maps(real in scores(), fake in scores()) {
        let f = |v: &[f64]| v.iter().map(|x| x.powi(3) + 2.0 * x).collect::<Vec<_>>();
        prop_assert_eq!(roc_auc(&real, &fake).unwrap().auc, roc_auc(&f(&real), &f(&fake)).unwrap().auc);
    }

    #[test]
    fn balanced_accuracy_matches_counting(real in scores(), fake in scores(), t in -1.0f64..11.0) {
        let tnr = real.iter().filter(|&&s| s <= t).count() as f64 / real.len() as f64;
        let tpr = fake.iter().filter(|&&s| s > t).count() as f64 / fake.len() as f64;
        prop_assert_eq!(balanced_accuracy(&real, &fake, t).unwrap(), 0.5 * (tnr + tpr));
    }

    #[test]
    fn sweep_optimum_is_at_least_chance(real in scores(), fake in scores()) {
        let s = threshold_sweep(&real, &fake, 0).unwrap();
        prop_assert!(s.best_accuracy >= 0.5);
        prop_assert_eq!(balanced_accuracy(&real, &fake, s.best_threshold).unwrap(), s.best_accuracy);
    }

    #[test]
    fn absolute_statistics_are_exact(nll in proptest::array::uniform3(0.0f64..8.0), h in proptest::array::uniform3(0.0f64..5.5)) {
        let st = FeatureVector { nll, h }.statistics();
        prop_assert_eq!(st.abs_delta01, (st.d[0] - st.d[1]).abs());
        prop_assert_eq!(st.abs_d0, st.d[0].abs());
    }
}
