use osod_core::metrics::{aose, entropy_threshold};
use osod_testkit::random_instance;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Lowering the entropy threshold only moves detections from known to
    /// unknown, so AOSE can only fall.
    #[test]
    fn aose_non_increasing_as_threshold_drops(seed in any::<u64>(), mut ts in prop::collection::vec(0.0f64..2.0, 2..6)) {
        let inst = random_instance(seed, 5, 8);
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let counts: Vec<usize> = ts
            .iter()
            .map(|&t| aose(&entropy_threshold(&inst.detections, t).unwrap(), &inst.ground_truth, 0.5))
            .collect();
        let raw = aose(&inst.detections, &inst.ground_truth, 0.5);
        prop_assert!(counts[0] <= raw);
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{:?} at {:?}", counts, ts);
    }
}
