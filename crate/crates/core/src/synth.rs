//! Deterministic synthetic corpus: band-limited events over Gaussian noise.
//!
//! Every sequence draws from its own generator seeded by the master seed and
//! the sequence id, so any subset can be regenerated in isolation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::config::{parse_value, unknown_key, KeyValue};
use crate::error::{Error, Result};
use crate::formats::{write_annotations, write_features, FeatureSequence};
use crate::metrics::TimedEvent;
use crate::tensor::Tensor;

/// Feature hop in seconds.
pub const HOP: f64 = 0.01;
const EVENT_RETRIES: usize = 64;
const LAYOUT_RETRIES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    /// Duration range in seconds, inclusive.
    pub duration: (f64, f64),
    /// Feature indices `lo..hi` the class excites.
    pub band: (usize, usize),
    /// Excite every `stride`-th index of the band.
    pub stride: usize,
    pub amplitude: f64,
    /// Mean events per sequence.
    pub rate: f64,
    /// Amplitude modulation frequency in Hz; 0 for a steady envelope.
    pub modulation_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub classes: Vec<ClassSpec>,
    pub noise: f64,
    /// Minimum silence between events of one class, seconds.
    pub min_gap: f64,
    /// Linear onset/offset ramp length, seconds.
    pub ramp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 500,
            n_val: 100,
            n_test: 100,
            frames: 200,
            feature_dim: 40,
            classes: default_classes(),
            noise: 0.3,
            min_gap: 0.1,
            ramp: 0.03,
            seed: 42,
        }
    }
}

/// Filler (target), a broadband speech-like distractor sharing the filler
/// band, and a harmonic music-like distractor.
pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "filler".into(),
            duration: (0.05, 1.0),
            band: (8, 16),
            stride: 1,
            amplitude: 1.0,
            rate: 2.0,
            modulation_hz: 0.0,
        },
        ClassSpec {
            name: "speech".into(),
            duration: (0.2, 1.0),
            band: (4, 24),
            stride: 1,
            amplitude: 0.7,
            rate: 1.0,
            modulation_hz: 4.0,
        },
        ClassSpec {
            name: "music".into(),
            duration: (0.3, 1.0),
            band: (28, 40),
            stride: 2,
            amplitude: 0.8,
            rate: 0.5,
            modulation_hz: 0.0,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.frames == 0 || self.feature_dim == 0 {
            return bad("frames and feature_dim must be positive".into());
        }
        if !(self.noise >= 0.0) || !(self.min_gap >= 0.0) || !(self.ramp >= 0.0) {
            return bad("noise, min_gap and ramp must be non-negative".into());
        }
        let total = self.frames as f64 * HOP;
        for c in &self.classes {
            let (lo, hi) = c.duration;
            if !(lo > 0.0 && lo <= hi && hi <= total) {
                return bad(format!("class {}: duration range {lo}..{hi} invalid for {total} s", c.name));
            }
            if !(c.band.0 < c.band.1 && c.band.1 <= self.feature_dim) || c.stride == 0 {
                return bad(format!("class {}: band {:?} outside {} features", c.name, c.band, self.feature_dim));
            }
            if !(c.rate >= 0.0) || !c.amplitude.is_finite() || !(c.modulation_hz >= 0.0) {
                return bad(format!("class {}: rate, amplitude and modulation must be finite", c.name));
            }
            if c.name.is_empty() || c.name.contains([',', '"', '\n']) {
                return bad(format!("class name {:?} is not a plain label", c.name));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 * HOP
    }

    /// Sequence ids of a split; splits are consecutive, disjoint ranges.
    pub fn split_ids(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b) = (self.n_train, self.n_train + self.n_val);
        match split {
            Split::Train => 0..a,
            Split::Val => a..b,
            Split::Test => b..b + self.n_test,
        }
    }
}

impl KeyValue for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_train" => self.n_train = parse_value(key, value)?,
            "n_val" => self.n_val = parse_value(key, value)?,
            "n_test" => self.n_test = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "min_gap" => self.min_gap = parse_value(key, value)?,
            "ramp" => self.ramp = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => {
                let (class, field) = key.split_once('.').ok_or_else(|| unknown_key(key))?;
                let c = self
                    .classes
                    .iter_mut()
                    .find(|c| c.name == class)
                    .ok_or_else(|| unknown_key(key))?;
                match field {
                    "duration_min" => c.duration.0 = parse_value(key, value)?,
                    "duration_max" => c.duration.1 = parse_value(key, value)?,
                    "band_lo" => c.band.0 = parse_value(key, value)?,
                    "band_hi" => c.band.1 = parse_value(key, value)?,
                    "stride" => c.stride = parse_value(key, value)?,
                    "amplitude" => c.amplitude = parse_value(key, value)?,
                    "rate" => c.rate = parse_value(key, value)?,
                    "modulation_hz" => c.modulation_hz = parse_value(key, value)?,
                    _ => return Err(unknown_key(key)),
                }
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("n_train".to_string(), self.n_train.to_string()),
            ("n_val".into(), self.n_val.to_string()),
            ("n_test".into(), self.n_test.to_string()),
            ("frames".into(), self.frames.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("noise".into(), self.noise.to_string()),
            ("min_gap".into(), self.min_gap.to_string()),
            ("ramp".into(), self.ramp.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        for c in &self.classes {
            let n = &c.name;
            out.extend([
                (format!("{n}.duration_min"), c.duration.0.to_string()),
                (format!("{n}.duration_max"), c.duration.1.to_string()),
                (format!("{n}.band_lo"), c.band.0.to_string()),
                (format!("{n}.band_hi"), c.band.1.to_string()),
                (format!("{n}.stride"), c.stride.to_string()),
                (format!("{n}.amplitude"), c.amplitude.to_string()),
                (format!("{n}.rate"), c.rate.to_string()),
                (format!("{n}.modulation_hz"), c.modulation_hz.to_string()),
            ]);
        }
        out
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sequence_seed(master: u64, id: usize) -> u64 {
    mix(mix(master) ^ id as u64)
}

pub fn sequence_name(id: usize) -> String {
    format!("{id:05}")
}

/// Events in whole 10 ms steps: `(onset step, length in steps)`.
fn place_class<R: Rng>(cfg: &SynthConfig, c: &ClassSpec, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let steps = cfg.frames;
    let min_len = ((c.duration.0 / HOP).round() as usize).max(1);
    let max_len = ((c.duration.1 / HOP).round() as usize).clamp(min_len, steps);
    let gap = (cfg.min_gap / HOP).round() as usize;
    'layout: for _ in 0..LAYOUT_RETRIES {
        let count = if c.rate > 0.0 {
            Poisson::new(c.rate).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..EVENT_RETRIES {
                let len = rng.gen_range(min_len..=max_len);
                let on = rng.gen_range(0..=steps - len);
                let clear = placed
                    .iter()
                    .all(|&(o, l)| on >= o + l + gap || on + len + gap <= o);
                if clear {
                    placed.push((on, len));
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
        }
        placed.sort_unstable();
        return Ok(placed);
    }
    Err(Error::Generation(format!(
        "could not place {} events after {LAYOUT_RETRIES} layouts",
        c.name
    )))
}

/// One sequence's features and its annotations in seconds.
pub fn generate_sequence(cfg: &SynthConfig, id: usize) -> Result<(FeatureSequence, Vec<TimedEvent>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(cfg.seed, id));
    let (t_max, dim) = (cfg.frames, cfg.feature_dim);
    let mut x = vec![0.0; t_max * dim];
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("finite noise level");
        x.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let ramp = (cfg.ramp / HOP).round().max(1.0);
    let mut events = Vec::new();
    for c in &cfg.classes {
        for (on, len) in place_class(cfg, c, &mut rng)? {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for k in 0..len {
                let up = (k + 1) as f64 / ramp;
                let down = (len - k) as f64 / ramp;
                let mut env = up.min(down).min(1.0);
                if c.modulation_hz > 0.0 {
                    let time = k as f64 * HOP;
                    env *= 0.6 + 0.4 * (std::f64::consts::TAU * c.modulation_hz * time + phase).sin();
                }
                let row = &mut x[(on + k) * dim..(on + k + 1) * dim];
                for f in (c.band.0..c.band.1).step_by(c.stride) {
                    row[f] += c.amplitude * env;
                }
            }
            events.push(TimedEvent::new(
                on as f64 / 100.0,
                (on + len) as f64 / 100.0,
                c.name.clone(),
            ));
        }
    }
    // Stored as f32 on disk; round now so in-memory and file agree.
    x.iter_mut().for_each(|v| *v = *v as f32 as f64);
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
    Ok((
        FeatureSequence {
            id: sequence_name(id),
            frames: Tensor::new(vec![t_max, dim], x)?,
        },
        events,
    ))
}

/// Sequences of one split, in id order.
pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Vec<(FeatureSequence, Vec<TimedEvent>)>> {
    cfg.split_ids(split).map(|id| generate_sequence(cfg, id)).collect()
}

/// Writes `dir/{train,val,test}/<id>.fseq` and `<id>.csv`.
pub fn write_corpus(cfg: &SynthConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::from(e).at_path(&sub))?;
        for id in cfg.split_ids(split) {
            let (seq, events) = generate_sequence(cfg, id)?;
            write_features(&sub.join(format!("{}.fseq", seq.id)), &seq.frames)?;
            write_annotations(&sub.join(format!("{}.csv", seq.id)), &events)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 3,
            n_val: 2,
            n_test: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        assert_eq!(generate_sequence(&cfg, 4).unwrap(), generate_sequence(&cfg, 4).unwrap());
        assert_ne!(generate_sequence(&cfg, 4).unwrap().0, generate_sequence(&cfg, 5).unwrap().0);
    }

    #[test]
    fn zero_rate_is_pure_noise() {
        let mut cfg = small();
        cfg.classes.iter_mut().for_each(|c| c.rate = 0.0);
        let (seq, ev) = generate_sequence(&cfg, 0).unwrap();
        assert!(ev.is_empty());
        let mean = seq.frames.data().iter().sum::<f64>() / seq.frames.len() as f64;
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn filler_durations_in_range() {
        let cfg = SynthConfig::default();
        let mut n = 0;
        for id in 0.. {
            let (_, ev) = generate_sequence(&cfg, id).unwrap();
            for e in ev.iter().filter(|e| e.label == "filler") {
                let d = e.offset - e.onset;
                assert!((0.05 - 1e-9..=1.0 + 1e-9).contains(&d), "{d}");
                n += 1;
            }
            if n >= 1000 {
                break;
            }
        }
    }

    #[test]
    fn same_class_events_keep_their_gap() {
        let cfg = SynthConfig::default();
        for id in 0..200 {
            let (_, ev) = generate_sequence(&cfg, id).unwrap();
            for c in cfg.labels() {
                let v: Vec<_> = ev.iter().filter(|e| e.label == c).collect();
                for w in v.windows(2) {
                    assert!(w[1].onset - w[0].offset >= cfg.min_gap - 1e-9);
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = SynthConfig::default();
        let (a, b, c) = (
            cfg.split_ids(Split::Train),
            cfg.split_ids(Split::Val),
            cfg.split_ids(Split::Test),
        );
        assert!(a.end <= b.start && b.end <= c.start);
        assert_eq!((a.len(), b.len(), c.len()), (500, 100, 100));
    }

    #[test]
    fn keys_round_trip() {
        let mut cfg = SynthConfig::default();
        cfg.apply_text("noise = 0.5\nfiller.rate = 3\n").unwrap();
        assert_eq!((cfg.noise, cfg.classes[0].rate), (0.5, 3.0));
        let mut again = SynthConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert!(cfg.apply_override("filler.colour=3").is_err());
        assert!(cfg.apply_override("cough.rate=3").is_err());
    }

    #[test]
    fn rejects_bad_bands() {
        let mut cfg = small();
        cfg.classes[0].band = (30, 50);
        assert!(matches!(cfg.validate(), Err(Error::Contract(_))));
    }
}
