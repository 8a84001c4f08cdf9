//! Framewise baseline: per-frame sigmoid head, median filtering, and run
//! extraction into events.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::metrics::TimedEvent;
use crate::nn::Linear;
use crate::semicrf::{EventSet, Span};

/// Default threshold sweep grid `0.05, 0.10, …, 0.95`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// `T×N` per-frame class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameProbabilities {
    frames: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl FrameProbabilities {
    pub fn new(frames: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != frames * classes {
            return Err(Error::dim(format!(
                "{} probabilities for {frames}×{classes} frames",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("probability {p} outside [0, 1]")));
        }
        Ok(FrameProbabilities { frames, classes, probs })
    }

    /// One class from a slice of per-frame values.
    pub fn single(probs: &[f64]) -> Result<Self> {
        Self::new(probs.len(), 1, probs.to_vec())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.probs[t * self.classes + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.get(t, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }
}

/// `Linear(model_dim → N)` whose logits feed a sigmoid.
#[derive(Clone, Debug)]
pub struct FramewiseHead {
    pub linear: Linear,
}

impl FramewiseHead {
    pub fn new<R: Rng>(store: &mut ParamStore, model_dim: usize, classes: usize, rng: &mut R) -> Self {
        FramewiseHead {
            linear: Linear::new(store, "framewise", model_dim, classes, true, rng),
        }
    }

    /// Per-frame logits `[T×N]`.
    pub fn logits(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        self.linear.forward(g, h)
    }

    pub fn probabilities(&self, g: &mut Graph<'_>, h: Var) -> Result<FrameProbabilities> {
        let z = self.logits(g, h)?;
        let p = g.sigmoid(z)?;
        let shape = g.shape(p);
        FrameProbabilities::new(shape[0], shape[1], g.value(p).to_vec())
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`,
/// written as `log(1 + e^z) − y·z`.
pub fn bce_with_logits(g: &mut Graph<'_>, logits: Var, targets: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if g.shape(targets) != shape.as_slice() {
        return Err(Error::dim(format!(
            "targets {:?} for logits {shape:?}",
            g.shape(targets)
        )));
    }
    let mut stacked_shape = vec![1];
    stacked_shape.extend(&shape);
    let z = g.reshape(logits, &stacked_shape)?;
    let zero = g.constant(&crate::Tensor::zeros(&stacked_shape));
    let both = g.concat(&[zero, z], 0)?;
    let softplus = g.logsumexp(both, 0)?;
    let yz = g.mul(targets, logits)?;
    let per = g.sub(softplus, yz)?;
    g.mean(per)
}

/// Sliding median per class with replicated edges.
pub fn median_filter(p: &FrameProbabilities, w: usize) -> Result<FrameProbabilities> {
    if w.is_multiple_of(2) {
        return Err(Error::contract(format!("median window must be odd, got {w}")));
    }
    let (t, n) = (p.frames, p.classes);
    let r = (w / 2) as isize;
    let mut out = vec![0.0; t * n];
    let mut window = Vec::with_capacity(w);
    for c in 0..n {
        for i in 0..t {
            window.clear();
            window.extend((-r..=r).map(|d| {
                let k = (i as isize + d).clamp(0, t as isize - 1) as usize;
                p.get(k, c)
            }));
            window.sort_by(f64::total_cmp);
            out[i * n + c] = window[w / 2];
        }
    }
    FrameProbabilities::new(t, n, out)
}

/// Maximal runs of frames with probability `≥ tau`, at least `min_len` long.
pub fn threshold_runs(p: &FrameProbabilities, tau: f64, min_len: usize) -> EventSet {
    let mut set = EventSet::new(p.classes);
    for c in 0..p.classes {
        let mut start = None;
        for t in 0..=p.frames {
            let on = t < p.frames && p.get(t, c) >= tau;
            match (on, start) {
                (true, None) => start = Some(t),
                (false, Some(a)) => {
                    if t - a >= min_len.max(1) {
                        set.spans_mut(c).push(Span::new(a, t - 1));
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    set
}

/// Runs converted to `[a·res, (b+1)·res)` seconds, labelled by class name.
pub fn threshold_to_events(
    p: &FrameProbabilities,
    tau: f64,
    resolution: f64,
    min_len: usize,
    labels: &[String],
) -> Result<Vec<TimedEvent>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::contract(format!("threshold {tau} outside (0, 1)")));
    }
    if labels.len() != p.classes {
        return Err(Error::dim(format!("{} labels for {} classes", labels.len(), p.classes)));
    }
    Ok(frames_to_seconds(&threshold_runs(p, tau, min_len), resolution, labels))
}

/// Frame intervals `[a, b]` to `[a·res, (b+1)·res)` seconds.
pub fn frames_to_seconds(set: &EventSet, resolution: f64, labels: &[String]) -> Vec<TimedEvent> {
    let mut out: Vec<TimedEvent> = set
        .iter()
        .map(|iv| TimedEvent {
            onset: iv.onset as f64 * resolution,
            offset: (iv.offset + 1) as f64 * resolution,
            label: labels[iv.event_type].clone(),
        })
        .collect();
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
    out
}
