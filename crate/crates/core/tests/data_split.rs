use std::collections::HashSet;

use proptest::prelude::*;

use sofd::dataio::{build_split, generate_synthetic, Normalizer, SplitConfig, SyntheticSpec};

fn split_cfg(per_class: usize, train_frac: f64, seed: u64) -> SplitConfig {
    SplitConfig { known_classes: vec![1, 2, 3], unknown_class: 4, speed: None, per_class, train_frac, seed }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn split_is_sound(per_class in 10usize..60, frac in 0.2..0.8f64, seed in 0u64..1000) {
        let samples = generate_synthetic(&SyntheticSpec::separated(4, 3, 6.0, 60, seed)).unwrap();
        let s = build_split(&samples, &split_cfg(per_class, frac, seed)).unwrap();
        let n_train = (per_class as f64 * frac).round() as usize;
        prop_assume!(n_train > 0 && n_train < per_class);
        // no unknown-class sample is labeled, and labels are remapped to 0..K
        prop_assert!(s.labeled.samples.iter().all(|x| x.label.is_some_and(|l| l < 3)));
        prop_assert_eq!(&s.labeled.counts()[..3], &[n_train; 3][..]);
        prop_assert!(s.unlabeled.samples.iter().all(|x| x.label.is_none()));
        prop_assert_eq!(s.truth.len(), s.unlabeled.len());
        prop_assert_eq!(s.truth.iter().filter(|&&t| t == 3).count(), per_class - n_train);
        let train: HashSet<usize> = s.labeled.ids().into_iter().collect();
        let test: HashSet<usize> = s.unlabeled.ids().into_iter().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(test.len(), s.unlabeled.len());
        // truth agrees with the generating class of every test sample
        for (x, &t) in s.unlabeled.samples.iter().zip(&s.truth) {
            let source = samples.iter().find(|o| o.id == x.id).unwrap().label.unwrap();
            prop_assert_eq!(source, t + 1);
        }
    }

    #[test]
    fn normalizer_is_idempotent(rows in proptest::collection::vec(proptest::collection::vec(-100.0..100.0f64, 4), 3..30)) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let n = Normalizer::fit_rows(&refs).unwrap();
        let once: Vec<Vec<f64>> = rows.iter().map(|r| n.transform(r)).collect();
        let refs: Vec<&[f64]> = once.iter().map(|r| r.as_slice()).collect();
        let again = Normalizer::fit_rows(&refs).unwrap();
        for (a, b) in once.iter().zip(&once) {
            let twice = again.transform(a);
            for (x, y) in twice.iter().zip(b) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn split_is_reproducible_and_seed_sensitive() {
    let samples = generate_synthetic(&SyntheticSpec::separated(4, 3, 6.0, 50, 1)).unwrap();
    let a = build_split(&samples, &split_cfg(50, 0.7, 5)).unwrap();
    let b = build_split(&samples, &split_cfg(50, 0.7, 5)).unwrap();
    let c = build_split(&samples, &split_cfg(50, 0.7, 6)).unwrap();
    assert_eq!(a.unlabeled.ids(), b.unlabeled.ids());
    assert_eq!(a.truth, b.truth);
    assert_ne!(a.unlabeled.ids(), c.unlabeled.ids());
}

#[test]
fn split_rejects_bad_configurations() {
    let samples = generate_synthetic(&SyntheticSpec::separated(4, 3, 6.0, 20, 1)).unwrap();
    assert!(build_split(&samples, &split_cfg(30, 0.7, 0)).is_err());
    assert!(build_split(&samples, &split_cfg(20, 1.0, 0)).is_err());
    let mut cfg = split_cfg(20, 0.5, 0);
    cfg.known_classes = vec![1, 4];
    assert!(build_split(&samples, &cfg).is_err());
}
