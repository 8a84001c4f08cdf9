use proptest::prelude::*;

use tessef::formats::{decode_annotations, decode_features, encode_annotations, encode_features};
use tessef::metrics::TimedEvent;
use tessef::synth::{generate_sequence, write_corpus, Split, SynthConfig};
use tessef::tensor::Tensor;
use tessef::train::build_targets;

fn small_corpus() -> SynthConfig {
    SynthConfig {
        n_train: 6,
        n_val: 2,
        n_test: 2,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn features_round_trip(rows in 1usize..20, dim in 1usize..8, seed in any::<u32>()) {
        let data: Vec<f64> = (0..rows * dim)
            .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) as f32 / 1e9) as f64)
            .collect();
        let t = Tensor::new(vec![rows, dim], data).unwrap();
        let bytes = encode_features(&t).unwrap();
        prop_assert_eq!(bytes.len(), 16 + rows * dim * 4);
        prop_assert_eq!(decode_features(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_features_are_rejected(rows in 1usize..6, dim in 1usize..4, cut in 1usize..8) {
        let t = Tensor::zeros(&[rows, dim]);
        let bytes = encode_features(&t).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(decode_features(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn annotations_round_trip(raw in prop::collection::vec((0u32..1_000_000, 1u32..500_000, 0usize..3), 0..10)) {
        let labels = ["filler", "speech", "music"];
        let events: Vec<TimedEvent> = raw
            .into_iter()
            .map(|(on, len, l)| TimedEvent::new(on as f64 / 1e6, (on + len) as f64 / 1e6, labels[l]))
            .collect();
        let back = decode_annotations(&encode_annotations(&events).unwrap()).unwrap();
        prop_assert_eq!(back.len(), events.len());
        for (a, b) in back.iter().zip(&events) {
            prop_assert!((a.onset - b.onset).abs() <= 1e-6);
            prop_assert!((a.offset - b.offset).abs() <= 1e-6);
            prop_assert_eq!(&a.label, &b.label);
        }
    }

    #[test]
    fn targets_are_always_valid(
        raw in prop::collection::vec((0u32..200, 1u32..80, 0usize..2), 0..12),
        res in prop::sample::select(vec![0.05f64, 0.1]),
    ) {
        let labels = vec!["filler".to_string(), "speech".to_string()];
        let events: Vec<TimedEvent> = raw
            .into_iter()
            .map(|(on, len, l)| TimedEvent::new(on as f64 / 100.0, ((on + len).min(200)) as f64 / 100.0, &labels[l]))
            .filter(|e| e.offset > e.onset)
            .collect();
        let frames = (2.0 / res).round() as usize;
        let set = build_targets(&events, &labels, res, frames).unwrap();
        prop_assert!(set.validate(Some(frames)).is_ok());
    }

    #[test]
    fn generated_sequences_rasterize_within_a_frame(id in 0usize..700) {
        let cfg = SynthConfig::default();
        let (_, events) = generate_sequence(&cfg, id).unwrap();
        let labels = cfg.labels();
        let set = build_targets(&events, &labels, 0.05, 40).unwrap();
        prop_assert!(set.validate(Some(40)).is_ok());
        // Generated events never collide, so rasterization keeps them one to one.
        prop_assert_eq!(set.len(), events.len());
        let mut back: Vec<(usize, f64, f64)> = set
            .iter()
            .map(|iv| (iv.event_type, iv.onset as f64 * 0.05, (iv.offset + 1) as f64 * 0.05))
            .collect();
        back.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut orig: Vec<(usize, f64, f64)> = events
            .iter()
            .map(|e| (labels.iter().position(|l| *l == e.label).unwrap(), e.onset, e.offset))
            .collect();
        orig.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for (b, o) in back.iter().zip(&orig) {
            prop_assert_eq!(b.0, o.0);
            prop_assert!((b.1 - o.1).abs() < 0.05);
            prop_assert!((b.2 - o.2).abs() < 0.05);
        }
    }
}

#[test]
fn corpus_is_byte_identical_across_runs() {
    let cfg = small_corpus();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&cfg, a.path()).unwrap();
    write_corpus(&cfg, b.path()).unwrap();
    for split in Split::ALL {
        for id in cfg.split_ids(split) {
            for ext in ["fseq", "csv"] {
                let rel = format!("{}/{id:05}.{ext}", split.name());
                let x = std::fs::read(a.path().join(&rel)).unwrap();
                let y = std::fs::read(b.path().join(&rel)).unwrap();
                assert_eq!(x, y, "{rel}");
            }
        }
    }
}

#[test]
fn splits_are_disjoint() {
    let cfg = SynthConfig::default();
    let ids: Vec<_> = Split::ALL.iter().map(|&s| cfg.split_ids(s)).collect();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            assert!(ids[i].end <= ids[j].start || ids[j].end <= ids[i].start);
        }
    }
}

#[test]
fn zero_rate_gives_pure_noise() {
    let mut cfg = small_corpus();
    for c in &mut cfg.classes {
        c.rate = 0.0;
    }
    let (seq, events) = generate_sequence(&cfg, 3).unwrap();
    assert!(events.is_empty());
    let mean: f64 = seq.frames.data().iter().sum::<f64>() / seq.frames.len() as f64;
    assert!(mean.abs() < 0.05);
}
