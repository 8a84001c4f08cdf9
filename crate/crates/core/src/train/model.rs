use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGrads, ParamStore, Var};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::formats::round_time;
use crate::metrics::TimedEvent;
use crate::postprocess::{bce_with_logits, frames_to_seconds, median_filter, threshold_to_events};
use crate::postprocess::{FrameProbabilities, FramewiseHead};
use crate::scorenet::ScoreNet;
use crate::semicrf::{viterbi, EventSet};
use crate::ssm::downsample;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::{HeadKind, TrainConfig};
use super::optim::AdamW;
use super::targets::frame_activity;

#[derive(Clone, Debug)]
pub enum Head {
    SemiCrf(ScoreNet),
    Framewise(FramewiseHead),
}

/// What a head produces for one sequence before conversion to seconds.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameOutput {
    Intervals(EventSet),
    Probabilities(FrameProbabilities),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.encoder_config(), config.seed)?;
        let head_seed = config.seed.wrapping_add(1);
        let head = match config.head {
            HeadKind::SemiCrf => Head::SemiCrf(ScoreNet::new(&mut store, config.score_config(), head_seed)?),
            HeadKind::Framewise => {
                let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
                Head::Framewise(FramewiseHead::new(&mut store, config.model_dim, config.classes.len(), &mut rng))
            }
        };
        Ok(Model {
            config: config.clone(),
            store,
            encoder,
            head,
        })
    }

    /// 10 ms features `[L×dim]` pooled to the label resolution.
    pub fn prepare(&self, features: &Tensor) -> Result<Tensor> {
        if features.rank() != 2 || features.shape()[1] != self.config.input_dim {
            return Err(Error::dim(format!(
                "features {:?} do not match input_dim {}",
                features.shape(),
                self.config.input_dim
            )));
        }
        downsample(features, self.config.downsample_factor()?)
    }

    fn encode(&self, g: &mut Graph<'_>, x: &Tensor) -> Result<Var> {
        let xv = g.constant(x);
        self.encoder.forward(g, xv)
    }

    /// Training loss for pooled features `x [T×input_dim]`.
    pub fn loss(&self, g: &mut Graph<'_>, x: &Tensor, target: &EventSet) -> Result<Var> {
        let h = self.encode(g, x)?;
        match &self.head {
            Head::SemiCrf(net) => {
                let raw = net.forward(g, h)?;
                g.semicrf_nll(raw, target, net.config.span_cap)
            }
            Head::Framewise(head) => {
                let z = head.logits(g, h)?;
                let y = g.constant(&frame_activity(target, x.shape()[0]));
                bce_with_logits(g, z, y)
            }
        }
    }

    pub fn loss_and_grads(&self, x: &Tensor, target: &EventSet) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::with_params(&self.store);
        let l = self.loss(&mut g, x, target)?;
        let value = g.scalar(l)?;
        let grads = g.backward(l)?.to_param_grads(&self.store);
        Ok((value, grads))
    }

    pub fn infer(&self, x: &Tensor) -> Result<FrameOutput> {
        let mut g = Graph::with_params(&self.store);
        let h = self.encode(&mut g, x)?;
        match &self.head {
            Head::SemiCrf(net) => {
                let raw = net.forward(&mut g, h)?;
                Ok(FrameOutput::Intervals(viterbi(&net.mask(&g, raw)?)))
            }
            Head::Framewise(head) => Ok(FrameOutput::Probabilities(head.probabilities(&mut g, h)?)),
        }
    }

    /// Events in seconds, rounded to the annotation precision. The
    /// framewise path needs a threshold.
    pub fn events(&self, out: &FrameOutput, threshold: Option<f64>) -> Result<Vec<TimedEvent>> {
        let res = self.config.resolution;
        let mut events = match out {
            FrameOutput::Intervals(set) => frames_to_seconds(set, res, &self.config.classes),
            FrameOutput::Probabilities(p) => {
                let tau = threshold.ok_or_else(|| Error::contract("framewise decoding needs a threshold"))?;
                let smooth = median_filter(p, self.config.median)?;
                threshold_to_events(&smooth, tau, res, self.config.min_len, &self.config.classes)?
            }
        };
        for e in &mut events {
            e.onset = round_time(e.onset);
            e.offset = round_time(e.offset);
        }
        Ok(events)
    }

    pub fn to_checkpoint(&self, config_hash: u64, adam: Option<&AdamW>, meta: &[(&str, f64)]) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash);
        for (name, t) in self.store.iter() {
            ck.push(name, Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()));
        }
        if let Some(a) = adam {
            for (k, (name, t)) in self.store.iter().enumerate() {
                ck.push(format!("adam.m.{name}"), Tensor::from_parts(t.shape().to_vec(), a.m[k].clone()));
                ck.push(format!("adam.v.{name}"), Tensor::from_parts(t.shape().to_vec(), a.v[k].clone()));
            }
            ck.push("meta.step", Tensor::scalar(a.step as f64));
        }
        for (k, v) in meta {
            ck.push(format!("meta.{k}"), Tensor::scalar(*v));
        }
        ck
    }

    /// Rebuilds a model from `config` and overwrites every parameter.
    pub fn from_checkpoint(config: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(config)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let saved = ck.get(&name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint lacks parameter {name}"),
            })?;
            let target = model.store.get_mut(id);
            if saved.shape() != target.shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("parameter {name} has shape {:?}, expected {:?}", saved.shape(), target.shape()),
                });
            }
            target.data_mut().copy_from_slice(saved.data());
        }
        Ok(model)
    }
}
