use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sofd::consistency::{consistent_filter, ConsistencyConfig};
use sofd::dataio::{Dataset, Role, Sample};
use sofd::openset::{self, control_limit, fit_class_gaussians, ClassGaussian, DofConvention, RejectionConfig};

fn fitted(seed: u64, d: usize, k: usize) -> Vec<ClassGaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..40 {
            feats.push((0..d).map(|j| 3.0 * (j == c % d) as u8 as f64 + rng.random_range(-1.0..1.0) * (1.0 + c as f64)).collect::<Vec<_>>());
            labels.push(c);
        }
    }
    fit_class_gaussians(&feats, &labels, k, &RejectionConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn exclusion_matches_the_discriminant_rule(seed in 0u64..20, z in proptest::collection::vec(-10.0..10.0f64, 3)) {
        let classes = fitted(seed, 3, 3);
        let r = openset::score(&z, &classes, false);
        let w = &classes[r.winner];
        prop_assert_eq!(r.excluded, r.g[r.winner] < -0.5 * w.control_limit + w.tau);
        // equivalently, the winner's Mahalanobis statistic exceeds its limit
        prop_assert_eq!(r.excluded, w.mahalanobis2(&z) > w.control_limit);
    }

    #[test]
    fn score_is_a_probability_share(g in proptest::collection::vec(-50.0..50.0f64, 1..6)) {
        let c = openset::classify_g(g);
        prop_assert!(c.score > 0.0 && c.score <= 1.0);
        prop_assert!(c.g.iter().all(|&v| v <= c.g[c.winner]));
    }
}

#[test]
fn control_limit_reference_values() {
    // d = 2, n = 100, alpha = 0.01
    let l = control_limit(2, 100, 0.01, DofConvention::Hotelling).unwrap();
    assert!((l - 9.853128787335944).abs() < 1e-9);
    assert!(control_limit(5, 5, 0.01, DofConvention::Hotelling).is_err());
    assert!(control_limit(0, 5, 0.01, DofConvention::Hotelling).is_err());
    let literal = control_limit(2, 100, 0.01, DofConvention::Literal).unwrap();
    assert!(literal.is_finite() && literal != l);
}

#[test]
fn threshold_share_reference_value() {
    // discriminants (0, -1, -2): the winner's share is 1 / (1 + e^-1 + e^-2)
    let c = openset::classify_g(vec![0.0, -1.0, -2.0]);
    assert_eq!(c.winner, 0);
    assert!((c.score - 0.6652409557748218).abs() < 1e-15);
}

#[test]
fn larger_alpha_never_excludes_fewer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..50 {
            feats.push(vec![c as f64 * 5.0 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            labels.push(c);
        }
    }
    let probes: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.random_range(-4.0..9.0), rng.random_range(-3.0..3.0)]).collect();
    let mut last = 0;
    for alpha in [0.001, 0.01, 0.05, 0.1, 0.25] {
        let cfg = RejectionConfig { alpha, ..RejectionConfig::default() };
        let classes = fit_class_gaussians(&feats, &labels, 2, &cfg).unwrap();
        let n = probes.iter().filter(|z| openset::score(z, &classes, false).excluded).count();
        assert!(n >= last, "alpha {alpha}: {n} < {last}");
        last = n;
    }
}

fn unlabeled(points: &[Vec<f64>]) -> Dataset {
    let samples = points.iter().enumerate().map(|(i, p)| Sample { id: 10 * i, x: p.clone(), label: None, speed: 1 }).collect();
    Dataset::new(samples, Role::Unlabeled, 2)
}

#[test]
fn consistency_is_invariant_to_pool_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]).collect();
    let u = unlabeled(&points);
    let pseudo_ids: Vec<usize> = u.ids().into_iter().filter(|id| points[id / 10][0] > 2.0 || id % 70 == 0).collect();
    let pseudo_of = |u: &Dataset| {
        let s = u.samples.iter().filter(|s| pseudo_ids.contains(&s.id)).map(|s| Sample { label: Some(2), ..s.clone() }).collect();
        Dataset::new(s, Role::Pseudo, 2)
    };
    let cfg = ConsistencyConfig::default();
    let (base, _) = consistent_filter(&pseudo_of(&u), &u, &points, &cfg).unwrap();
    let mut base_ids = base.ids();
    base_ids.sort_unstable();

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    let shuffled = Dataset::new(order.iter().map(|&i| u.samples[i].clone()).collect(), Role::Unlabeled, 2);
    let feats: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let (other, _) = consistent_filter(&pseudo_of(&shuffled), &shuffled, &feats, &cfg).unwrap();
    let mut other_ids = other.ids();
    other_ids.sort_unstable();
    assert_eq!(base_ids, other_ids);
    assert!(!base_ids.is_empty() && base_ids.len() < pseudo_ids.len());
}
