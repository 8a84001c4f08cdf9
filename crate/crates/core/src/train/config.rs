use crate::config::{parse_value, unknown_key, KeyValue};
use crate::encoder::{EncoderConfig, S4BlockConfig};
use crate::error::{Error, Result};
use crate::scorenet::ScoreNetConfig;
use crate::synth::HOP;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    SemiCrf,
    Framewise,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::SemiCrf => "semicrf",
            HeadKind::Framewise => "framewise",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semicrf" => Ok(HeadKind::SemiCrf),
            "framewise" => Ok(HeadKind::Framewise),
            _ => Err(Error::contract(format!("head must be semicrf or framewise, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head: HeadKind,
    /// Label resolution in seconds; a whole multiple of the 10 ms hop.
    pub resolution: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub classes: Vec<String>,
    pub input_dim: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub score_hidden: usize,
    pub d_pair: usize,
    pub c0: usize,
    pub cnn_channels: usize,
    /// Longest interval in frames; 0 picks `round(1 s / resolution) + 1`.
    pub span_cap: usize,
    pub median: usize,
    pub min_len: usize,
    pub collar: f64,
    pub segment_len: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadKind::SemiCrf,
            resolution: 0.05,
            batch_size: 8,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-2,
            min_lr: 1e-5,
            clip_norm: 5.0,
            seed: 42,
            classes: vec!["filler".into(), "speech".into(), "music".into()],
            input_dim: 40,
            model_dim: 32,
            state_dim: 16,
            n_blocks: 2,
            ffn_hidden: 64,
            score_hidden: 64,
            d_pair: 16,
            c0: 8,
            cnn_channels: 8,
            span_cap: 0,
            median: 3,
            min_len: 1,
            collar: 0.2,
            segment_len: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.downsample_factor()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("state_dim", self.state_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("score_hidden", self.score_hidden),
            ("d_pair", self.d_pair),
            ("c0", self.c0),
            ("cnn_channels", self.cnn_channels),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{k} must be at least 1")));
        }
        if !(self.lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return Err(Error::contract("learning rates must satisfy 0 < min_lr ≤ lr"));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::contract("weight_decay must be ≥ 0 and clip_norm > 0"));
        }
        if self.median.is_multiple_of(2) {
            return Err(Error::contract("median window must be odd"));
        }
        if !(self.collar >= 0.0 && self.segment_len > 0.0) {
            return Err(Error::contract("collar must be ≥ 0 and segment_len > 0"));
        }
        if self.classes.is_empty() || self.classes.iter().any(String::is_empty) {
            return Err(Error::contract("classes must be a non-empty list of labels"));
        }
        Ok(())
    }

    /// Feature frames per label frame.
    pub fn downsample_factor(&self) -> Result<usize> {
        let f = (self.resolution / HOP).round();
        if !(f >= 1.0) || (f * HOP - self.resolution).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "resolution {} is not a multiple of the {HOP} s hop",
                self.resolution
            )));
        }
        Ok(f as usize)
    }

    pub fn effective_span_cap(&self) -> usize {
        if self.span_cap > 0 {
            self.span_cap
        } else {
            (1.0 / self.resolution).round() as usize + 1
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.input_dim,
            n_blocks: self.n_blocks,
            block: S4BlockConfig {
                model_dim: self.model_dim,
                state_dim: self.state_dim,
                ffn_hidden: self.ffn_hidden,
                ..S4BlockConfig::default()
            },
        }
    }

    pub fn score_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            model_dim: self.model_dim,
            ffn_hidden: self.score_hidden,
            d_pair: self.d_pair,
            c0: self.c0,
            cnn_channels: self.cnn_channels,
            n_types: self.classes.len(),
            span_cap: self.effective_span_cap(),
        }
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "head" => self.head = value.parse()?,
            "resolution" => self.resolution = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "min_lr" => self.min_lr = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "classes" => self.classes = value.split(',').map(|s| s.trim().to_string()).collect(),
            "input_dim" => self.input_dim = parse_value(key, value)?,
            "model_dim" => self.model_dim = parse_value(key, value)?,
            "state_dim" => self.state_dim = parse_value(key, value)?,
            "n_blocks" => self.n_blocks = parse_value(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse_value(key, value)?,
            "score_hidden" => self.score_hidden = parse_value(key, value)?,
            "d_pair" => self.d_pair = parse_value(key, value)?,
            "c0" => self.c0 = parse_value(key, value)?,
            "cnn_channels" => self.cnn_channels = parse_value(key, value)?,
            "span_cap" => self.span_cap = parse_value(key, value)?,
            "median" => self.median = parse_value(key, value)?,
            "min_len" => self.min_len = parse_value(key, value)?,
            "collar" => self.collar = parse_value(key, value)?,
            "segment_len" => self.segment_len = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("head", self.head.name().to_string()),
            ("resolution", self.resolution.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("classes", self.classes.join(",")),
            ("input_dim", self.input_dim.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("score_hidden", self.score_hidden.to_string()),
            ("d_pair", self.d_pair.to_string()),
            ("c0", self.c0.to_string()),
            ("cnn_channels", self.cnn_channels.to_string()),
            ("span_cap", self.span_cap.to_string()),
            ("median", self.median.to_string()),
            ("min_len", self.min_len.to_string()),
            ("collar", self.collar.to_string()),
            ("segment_len", self.segment_len.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
