//! Second-valued annotations to frame-valued training targets.

use crate::error::{Error, Result};
use crate::metrics::TimedEvent;
use crate::semicrf::{EventSet, Span};
use crate::tensor::Tensor;

/// Absorbs float noise when a time is an exact multiple of the resolution.
const GRID_EPS: f64 = 1e-9;

/// Rasterizes events onto frames of `resolution` seconds.
///
/// Onset frame `⌊u/res⌋`, offset frame `⌈v/res⌉ − 1`, both clamped to
/// `[0, frames−1]`. Same-class events that overlap in time, or collide after
/// rasterization beyond a shared endpoint, are merged.
pub fn build_targets(events: &[TimedEvent], labels: &[String], resolution: f64, frames: usize) -> Result<EventSet> {
    if !(resolution > 0.0) || frames == 0 {
        return Err(Error::contract(format!(
            "resolution {resolution} and frame count {frames} must be positive"
        )));
    }
    let mut per_class: Vec<Vec<(f64, f64)>> = vec![Vec::new(); labels.len()];
    for e in events {
        if !(e.offset > e.onset) {
            return Err(Error::contract(format!(
                "degenerate event [{}, {}) of {}",
                e.onset, e.offset, e.label
            )));
        }
        let c = labels
            .iter()
            .position(|l| *l == e.label)
            .ok_or_else(|| Error::contract(format!("unknown label {:?}", e.label)))?;
        per_class[c].push((e.onset, e.offset));
    }
    let last = frames - 1;
    let mut set = EventSet::new(labels.len());
    for (c, mut iv) in per_class.into_iter().enumerate() {
        iv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
        for (u, v) in iv {
            match merged.last_mut() {
                Some(prev) if u < prev.1 => prev.1 = prev.1.max(v),
                _ => merged.push((u, v)),
            }
        }
        let spans = set.spans_mut(c);
        for (u, v) in merged {
            let a = ((u / resolution + GRID_EPS).floor().max(0.0) as usize).min(last);
            let b = ((v / resolution - GRID_EPS).ceil() as usize).saturating_sub(1).clamp(a, last);
            match spans.last_mut() {
                Some(prev) if a <= prev.onset || a < prev.offset => prev.offset = prev.offset.max(b),
                _ => spans.push(Span::new(a, b)),
            }
        }
    }
    Ok(set)
}

/// `[T×N]` 0/1 activity matrix of a frame event set.
pub fn frame_activity(set: &EventSet, frames: usize) -> Tensor {
    let n = set.types();
    let mut data = vec![0.0; frames * n];
    for iv in set.iter() {
        for t in iv.onset..=iv.offset.min(frames.saturating_sub(1)) {
            data[t * n + iv.event_type] = 1.0;
        }
    }
    Tensor::from_parts(vec![frames, n], data)
}
