use proptest::prelude::*;

use tessef::semicrf::{
    brute_force_enumerate, log_partition, marginals, nll_loss, viterbi, viterbi_type, EventSet, ScoreTensor,
};
use tessef::verify::enumerate_type;

fn scores(max_t: usize, max_n: usize) -> impl Strategy<Value = ScoreTensor> {
    (1..=max_t, 1..=max_n, 1..=max_t).prop_flat_map(|(t, n, cap)| {
        prop::collection::vec(-3.0f64..3.0, t * t * n).prop_map(move |raw| {
            let cap = cap.min(t);
            ScoreTensor::from_raw(&raw, t, n, cap).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partition_matches_enumeration(s in scores(6, 2)) {
        for e in 0..s.types() {
            let o = enumerate_type(&s, e).unwrap();
            prop_assert!((log_partition(&s, e).unwrap() - o.log_z).abs() <= 1e-9);
        }
    }

    #[test]
    fn viterbi_is_the_enumerated_maximum(s in scores(7, 2)) {
        for e in 0..s.types() {
            let (spans, best) = viterbi_type(&s, e).unwrap();
            let o = enumerate_type(&s, e).unwrap();
            prop_assert_eq!(best, o.max_score);
            let rescored: f64 = spans.iter().fold(0.0, |acc, sp| acc + s.get(sp.onset, sp.offset, e));
            prop_assert_eq!(rescored, best);
        }
    }

    #[test]
    fn decoded_sets_are_valid(s in scores(30, 3)) {
        let set = viterbi(&s);
        prop_assert!(set.validate(Some(s.frames())).is_ok());
        for iv in set.iter() {
            prop_assert!(iv.offset - iv.onset < s.span_cap());
        }
    }

    #[test]
    fn marginals_are_probabilities(s in scores(12, 2)) {
        let m = marginals(&s);
        let t = s.frames();
        for e in 0..s.types() {
            // Frame k lies strictly inside at most one interval of a valid set.
            for k in 0..t {
                let mut covering = 0.0;
                for j in 0..t {
                    for i in 0..=j {
                        let p = m.at(&[j, i, e]);
                        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
                        if i < k && k < j {
                            covering += p;
                        }
                    }
                }
                prop_assert!(covering <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn nll_is_non_negative(s in scores(8, 2), seed in any::<u64>()) {
        let sets = brute_force_enumerate(&s, 0).unwrap();
        let pick = &sets[(seed % sets.len() as u64) as usize].0;
        let mut spans = vec![pick.clone()];
        spans.extend((1..s.types()).map(|_| Vec::new()));
        let target = EventSet::from_spans(spans);
        prop_assert!(nll_loss(&s, &target).unwrap() >= -1e-12);
    }

    #[test]
    fn shifting_one_type_shifts_log_partition_only_there(s in scores(5, 2), c in -2.0f64..2.0) {
        let t = s.frames();
        let mut shifted = s.clone();
        for j in 0..t {
            for i in 0..=j {
                let v = s.get(i, j, 0);
                if v.is_finite() {
                    shifted.set(i, j, 0, v + c);
                }
            }
        }
        for e in 1..s.types() {
            prop_assert_eq!(log_partition(&shifted, e).unwrap(), log_partition(&s, e).unwrap());
        }
    }
}
