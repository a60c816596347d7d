//! Disagreement counts: partition, symmetry, and the exhaustive matcher.

mod common;

use common::{continuous_detections, exhaustive_matching};
use moedet::analysis::{disagreement, match_pairs};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn partition_and_swap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for img in ["x", "y"] {
            let n = rng.random_range(0..10);
            a.extend(continuous_detections(&mut rng, img, n, 3));
            let n = rng.random_range(0..10);
            b.extend(continuous_detections(&mut rng, img, n, 3));
        }
        let ab = disagreement(&a, &b, 0.3);
        let ba = disagreement(&b, &a, 0.3);
        for (img, c) in &ab {
            let na = a.iter().filter(|d| &d.image_id == img).count();
            let nb = b.iter().filter(|d| &d.image_id == img).count();
            let matched = c.full_agreement + c.label_disagreement;
            prop_assert_eq!(matched + c.only_a, na);
            prop_assert_eq!(matched + c.only_b, nb);
            prop_assert!(matched <= na.min(nb));
            prop_assert_eq!(ba[img], c.swapped());
        }
    }

    #[test]
    fn greedy_equals_exhaustive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb) = (rng.random_range(0..=6), rng.random_range(0..=6));
        let a = continuous_detections(&mut rng, "x", na, 2);
        let b = continuous_detections(&mut rng, "x", nb, 2);
        let mut greedy = match_pairs(&a, &b, 0.2);
        greedy.sort();
        prop_assert_eq!(greedy, exhaustive_matching(&a, &b, 0.2));
    }
}
