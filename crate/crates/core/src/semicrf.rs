//! Exact semi-Markov CRF over sets of non-overlapping intervals.
//!
//! A configuration for one event type is a set of frame intervals `[i, j]`
//! (inclusive, `i ≤ j`) with strictly increasing onsets where each onset is at
//! or after the previous offset, so neighbours may share an endpoint frame.
//! Its weight is `exp(Σ f(i, j, e))`; the empty set has weight 1. Types are
//! independent of one another.
//!
//! The partition function uses two prefix quantities per frame `t`:
//! `A(t)` sums every valid set inside `[0, t]`, and `A′(t)` the subset whose
//! last interval is not the point `[t, t]`:
//!
//! ```text
//! A′(t) = logaddexp(A(t−1), logsumexp_{a<t} f(a, t) + A′(a))
//! A(t)  = A′(t) + log(1 + exp f(t, t))
//! ```
//!
//! with `A(−1) = 0`. Marginals are the adjoint of this recursion, and Viterbi
//! is the same recursion in the max-plus semiring.

use std::fmt;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pairwise interval scores indexed `(end j, start i, type e)`.
///
/// Entries with `i > j` or `j − i ≥ span_cap` hold `−∞`. Other entries are
/// finite, or `−∞` where a caller masks them explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    frames: usize,
    types: usize,
    span_cap: usize,
    data: Vec<f64>,
}

impl ScoreTensor {
    /// Scores from `f(start, end, type)`; invalid entries are masked.
    pub fn from_fn(frames: usize, types: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![f64::NEG_INFINITY; frames * frames * types];
        for j in 0..frames {
            for i in 0..=j {
                for e in 0..types {
                    data[(j * frames + i) * types + e] = f(i, j, e);
                }
            }
        }
        Self::checked(frames, types, frames.max(1), data)
    }

    /// Masks a raw `[T×T×N]` network output with the interval cap.
    pub fn from_raw(raw: &[f64], frames: usize, types: usize, span_cap: usize) -> Result<Self> {
        if raw.len() != frames * frames * types {
            return Err(Error::dim(format!(
                "{} raw scores for a {frames}×{frames}×{types} tensor",
                raw.len()
            )));
        }
        if span_cap == 0 {
            return Err(Error::contract("interval cap must be at least 1"));
        }
        let mut data = raw.to_vec();
        for j in 0..frames {
            for i in 0..frames {
                if i > j || j - i >= span_cap {
                    data[(j * frames + i) * types..][..types].fill(f64::NEG_INFINITY);
                }
            }
        }
        Self::checked(frames, types, span_cap.min(frames.max(1)), data)
    }

    fn checked(frames: usize, types: usize, span_cap: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(Error::numeric(format!("score tensor holds {v}")));
        }
        Ok(ScoreTensor {
            frames,
            types,
            span_cap,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn span_cap(&self) -> usize {
        self.span_cap
    }

    /// `f(start, end, e)`.
    #[inline]
    pub fn get(&self, start: usize, end: usize, e: usize) -> f64 {
        self.data[(end * self.frames + start) * self.types + e]
    }

    pub fn set(&mut self, start: usize, end: usize, e: usize, value: f64) {
        assert!(start <= end && end - start < self.span_cap, "cannot set a masked entry");
        assert!(!value.is_nan() && value != f64::INFINITY);
        self.data[(end * self.frames + start) * self.types + e] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn index(&self, start: usize, end: usize, e: usize) -> usize {
        (end * self.frames + start) * self.types + e
    }
}

/// Inclusive frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub onset: usize,
    pub offset: usize,
}

impl Span {
    pub fn new(onset: usize, offset: usize) -> Self {
        Span { onset, offset }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.onset, self.offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventInterval {
    pub onset: usize,
    pub offset: usize,
    pub event_type: usize,
}

/// Frame intervals grouped by event type.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct EventSet {
    spans: Vec<Vec<Span>>,
}

impl EventSet {
    pub fn new(types: usize) -> Self {
        EventSet {
            spans: vec![Vec::new(); types],
        }
    }

    pub fn from_spans(spans: Vec<Vec<Span>>) -> Self {
        EventSet { spans }
    }

    pub fn types(&self) -> usize {
        self.spans.len()
    }

    pub fn push(&mut self, e: usize, onset: usize, offset: usize) {
        self.spans[e].push(Span::new(onset, offset));
    }

    pub fn spans(&self, e: usize) -> &[Span] {
        &self.spans[e]
    }

    pub fn spans_mut(&mut self, e: usize) -> &mut Vec<Span> {
        &mut self.spans[e]
    }

    pub fn len(&self) -> usize {
        self.spans.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = EventInterval> + '_ {
        self.spans.iter().enumerate().flat_map(|(e, s)| {
            s.iter().map(move |sp| EventInterval {
                onset: sp.onset,
                offset: sp.offset,
                event_type: e,
            })
        })
    }

    /// Checks the validity rule, and `offset < frames` when given.
    pub fn validate(&self, frames: Option<usize>) -> Result<()> {
        for (e, spans) in self.spans.iter().enumerate() {
            check_spans(spans, frames).map_err(|m| Error::contract(format!("type {e}: {m}")))?;
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate(None).is_ok()
    }
}

/// The validity rule for one type: `i ≤ j`, onsets strictly increasing, each
/// onset at or after the previous offset.
pub fn check_spans(spans: &[Span], frames: Option<usize>) -> std::result::Result<(), String> {
    let mut prev: Option<Span> = None;
    for s in spans {
        if s.onset > s.offset {
            return Err(format!("interval {s} ends before it starts"));
        }
        if let Some(t) = frames {
            if s.offset >= t {
                return Err(format!("interval {s} exceeds {t} frames"));
            }
        }
        if let Some(p) = prev {
            if s.onset <= p.onset || s.onset < p.offset {
                return Err(format!("interval {s} overlaps {p}"));
            }
        }
        prev = Some(*s);
    }
    Ok(())
}

/// `log(1 + exp x)`, never below `max(0, x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_type(scores: &ScoreTensor, e: usize) -> Result<()> {
    if e >= scores.types {
        return Err(Error::contract(format!(
            "event type {e} out of range for {} types",
            scores.types
        )));
    }
    Ok(())
}

struct Inside {
    /// `A(t)`.
    full: Vec<f64>,
    /// `A′(t)`.
    open: Vec<f64>,
    reads: usize,
}

fn inside(scores: &ScoreTensor, e: usize) -> Inside {
    let t_max = scores.frames;
    let cap = scores.span_cap;
    let mut full = vec![0.0; t_max];
    let mut open = vec![0.0; t_max];
    let mut reads = 0;
    let mut terms = Vec::with_capacity(cap + 1);
    for t in 0..t_max {
        terms.clear();
        terms.push(if t == 0 { 0.0 } else { full[t - 1] });
        for a in t.saturating_sub(cap - 1)..t {
            reads += 1;
            terms.push(scores.get(a, t, e) + open[a]);
        }
        open[t] = crate::autodiff::logsumexp_iter(terms.iter().copied());
        reads += 1;
        full[t] = open[t] + softplus(scores.get(t, t, e));
    }
    Inside { full, open, reads }
}

/// `log Z(e)`: log-sum of weights of every valid set of type `e`.
pub fn log_partition(scores: &ScoreTensor, e: usize) -> Result<f64> {
    check_type(scores, e)?;
    Ok(inside(scores, e).full.last().copied().unwrap_or(0.0))
}

/// `log Z(e)` together with the number of score entries the DP read.
pub fn log_partition_counted(scores: &ScoreTensor, e: usize) -> Result<(f64, usize)> {
    check_type(scores, e)?;
    let ins = inside(scores, e);
    Ok((ins.full.last().copied().unwrap_or(0.0), ins.reads))
}

/// `log Z(e)` and `∂ log Z(e) / ∂ f(·, ·, e)`, written into `grad` (same
/// layout as the score tensor).
fn log_partition_adjoint(scores: &ScoreTensor, e: usize, grad: &mut [f64]) -> f64 {
    let t_max = scores.frames;
    if t_max == 0 {
        return 0.0;
    }
    let cap = scores.span_cap;
    let Inside { full, open, .. } = inside(scores, e);
    let mut g_full = vec![0.0; t_max];
    let mut g_open = vec![0.0; t_max];
    g_full[t_max - 1] = 1.0;
    for t in (0..t_max).rev() {
        let gf = g_full[t];
        let fp = scores.get(t, t, e);
        g_open[t] += gf;
        if fp != f64::NEG_INFINITY {
            grad[scores.index(t, t, e)] += gf * crate::autodiff::sigmoid(fp);
        }
        let go = g_open[t];
        if go == 0.0 {
            continue;
        }
        if t > 0 {
            g_full[t - 1] += go * (full[t - 1] - open[t]).exp();
        }
        for a in t.saturating_sub(cap - 1)..t {
            let f = scores.get(a, t, e);
            if f == f64::NEG_INFINITY {
                continue;
            }
            let w = go * (f + open[a] - open[t]).exp();
            grad[scores.index(a, t, e)] += w;
            g_open[a] += w;
        }
    }
    full[t_max - 1]
}

/// Posterior inclusion probability of every interval, `[T×T×N]` in score
/// layout, computed as the gradient of `Σ_e log Z(e)`.
pub fn marginals(scores: &ScoreTensor) -> Tensor {
    let mut grad = vec![0.0; scores.data.len()];
    for e in 0..scores.types {
        log_partition_adjoint(scores, e, &mut grad);
    }
    Tensor::from_parts(vec![scores.frames, scores.frames, scores.types], grad)
}

/// Sum of the target's scores for type `e`, in onset order from 0.
fn path_score(scores: &ScoreTensor, spans: &[Span], e: usize) -> f64 {
    spans
        .iter()
        .fold(0.0, |acc, s| acc + scores.get(s.onset, s.offset, e))
}

fn check_target(scores: &ScoreTensor, target: &EventSet) -> Result<()> {
    if target.types() != scores.types {
        return Err(Error::contract(format!(
            "target has {} types, scores have {}",
            target.types(),
            scores.types
        )));
    }
    target.validate(Some(scores.frames))?;
    for iv in target.iter() {
        if scores.get(iv.onset, iv.offset, iv.event_type) == f64::NEG_INFINITY {
            return Err(Error::contract(format!(
                "target interval [{},{}] of type {} lies in the masked region",
                iv.onset, iv.offset, iv.event_type
            )));
        }
    }
    Ok(())
}

/// `−Σ_e [Σ_{(i,j)∈Y_e} f(i,j,e) − log Z(e)]`.
pub fn nll_loss(scores: &ScoreTensor, target: &EventSet) -> Result<f64> {
    check_target(scores, target)?;
    let mut loss = 0.0;
    for e in 0..scores.types {
        loss += log_partition(scores, e)? - path_score(scores, target.spans(e), e);
    }
    Ok(loss)
}

/// NLL and its gradient `marginals − 1[target]`.
pub fn nll_with_grad(scores: &ScoreTensor, target: &EventSet) -> Result<(f64, Vec<f64>)> {
    check_target(scores, target)?;
    let mut grad = vec![0.0; scores.data.len()];
    let mut loss = 0.0;
    for e in 0..scores.types {
        let log_z = log_partition_adjoint(scores, e, &mut grad);
        loss += log_z - path_score(scores, target.spans(e), e);
        for s in target.spans(e) {
            grad[scores.index(s.onset, s.offset, e)] -= 1.0;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Back {
    Skip,
    From(usize),
}

/// Highest-scoring valid set of one type, and its score.
pub fn viterbi_type(scores: &ScoreTensor, e: usize) -> Result<(Vec<Span>, f64)> {
    check_type(scores, e)?;
    let t_max = scores.frames;
    if t_max == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let cap = scores.span_cap;
    let mut full = vec![0.0; t_max];
    let mut open = vec![0.0; t_max];
    let mut back = vec![Back::Skip; t_max];
    let mut point = vec![false; t_max];
    for t in 0..t_max {
        let mut best = if t == 0 { 0.0 } else { full[t - 1] };
        let mut arg = Back::Skip;
        // Largest onset first, and only a strict improvement replaces the
        // incumbent: ties keep exclusion, then the shortest interval.
        for a in (t.saturating_sub(cap - 1)..t).rev() {
            let cand = open[a] + scores.get(a, t, e);
            if cand > best {
                best = cand;
                arg = Back::From(a);
            }
        }
        open[t] = best;
        back[t] = arg;
        let fp = scores.get(t, t, e);
        point[t] = fp > 0.0;
        full[t] = if point[t] { best + fp } else { best };
    }

    let mut spans = Vec::new();
    let mut t = t_max - 1;
    let mut in_open = false;
    loop {
        if !in_open && point[t] {
            spans.push(Span::new(t, t));
        }
        match back[t] {
            Back::From(a) => {
                spans.push(Span::new(a, t));
                t = a;
                in_open = true;
            }
            Back::Skip => {
                if t == 0 {
                    break;
                }
                t -= 1;
                in_open = false;
            }
        }
    }
    spans.reverse();
    Ok((spans, full[t_max - 1]))
}

/// Maximum-scoring valid set for every type independently.
pub fn viterbi(scores: &ScoreTensor) -> EventSet {
    EventSet::from_spans(
        (0..scores.types)
            .map(|e| viterbi_type(scores, e).map(|(s, _)| s).unwrap_or_default())
            .collect(),
    )
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;

/// Every valid set of type `e` with its total score. Masked (`−∞`)
/// intervals carry zero weight and are not listed.
pub fn brute_force_enumerate(scores: &ScoreTensor, e: usize) -> Result<Vec<(Vec<Span>, f64)>> {
    check_type(scores, e)?;
    if scores.frames > BRUTE_FORCE_MAX_FRAMES {
        return Err(Error::contract(format!(
            "brute force is limited to {BRUTE_FORCE_MAX_FRAMES} frames, got {}",
            scores.frames
        )));
    }
    let mut out = Vec::new();
    let mut stack = Vec::new();
    enumerate_from(scores, e, None, &mut stack, &mut out);
    Ok(out)
}

fn enumerate_from(
    scores: &ScoreTensor,
    e: usize,
    last: Option<Span>,
    stack: &mut Vec<Span>,
    out: &mut Vec<(Vec<Span>, f64)>,
) {
    out.push((stack.clone(), path_score(scores, stack, e)));
    let t = scores.frames;
    let first_onset = last.map_or(0, |s| (s.onset + 1).max(s.offset));
    for i in first_onset..t {
        for j in i..t {
            if scores.get(i, j, e) == f64::NEG_INFINITY {
                continue;
            }
            let s = Span::new(i, j);
            stack.push(s);
            enumerate_from(scores, e, Some(s), stack, out);
            stack.pop();
        }
    }
}

impl Graph<'_> {
    /// Semi-CRF negative log-likelihood of `target` under raw scores
    /// `[T×T×N]`, masked with `span_cap` before use.
    pub fn semicrf_nll(&mut self, raw: Var, target: &EventSet, span_cap: usize) -> Result<Var> {
        let shape = self.shape(raw).to_vec();
        if shape.len() != 3 || shape[0] != shape[1] {
            return Err(Error::dim(format!("semi-CRF scores must be [T×T×N], got {shape:?}")));
        }
        let scores = ScoreTensor::from_raw(self.value(raw), shape[0], shape[2], span_cap)?;
        let (loss, grad) = nll_with_grad(&scores, target)?;
        self.scalar_fn(raw, loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(t: usize) -> ScoreTensor {
        ScoreTensor::from_fn(t, 1, |_, _, _| 0.0).unwrap()
    }

    #[test]
    fn small_partition_constants() {
        for (t, count) in [(1usize, 2.0f64), (2, 6.0), (3, 20.0)] {
            let s = zeros(t);
            assert!((log_partition(&s, 0).unwrap() - count.ln()).abs() < 1e-12);
            assert_eq!(brute_force_enumerate(&s, 0).unwrap().len(), count as usize);
        }
    }

    #[test]
    fn all_masked_is_empty_set_only() {
        let s = ScoreTensor::from_fn(4, 2, |_, _, _| f64::NEG_INFINITY).unwrap();
        assert_eq!(log_partition(&s, 1).unwrap(), 0.0);
        assert_eq!(nll_loss(&s, &EventSet::new(2)).unwrap(), 0.0);
        assert!(marginals(&s).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn point_interval_nll_and_marginal() {
        let s = zeros(1);
        let mut target = EventSet::new(1);
        target.push(0, 0, 0);
        assert!((nll_loss(&s, &target).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((marginals(&s).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lone_interval_marginal() {
        let s = ScoreTensor::from_fn(2, 1, |i, j, _| if (i, j) == (0, 1) { 0.0 } else { f64::NEG_INFINITY }).unwrap();
        let m = marginals(&s);
        assert!((m.at(&[1, 0, 0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn viterbi_simple_cases() {
        let neg = ScoreTensor::from_fn(5, 2, |i, j, e| -1.0 - (i + j + e) as f64).unwrap();
        assert!(viterbi(&neg).is_empty());
        let s = ScoreTensor::from_fn(2, 1, |i, j, _| if (i, j) == (0, 1) { 5.0 } else { -10.0 }).unwrap();
        assert_eq!(viterbi(&s).spans(0), &[Span::new(0, 1)]);
    }

    #[test]
    fn viterbi_ties_prefer_exclusion_then_short() {
        // Every interval scores zero: the empty set wins.
        assert!(viterbi(&zeros(4)).is_empty());
        // Two equal options ending at frame 2: [1,2] and [0,2]; prefer onset 1.
        let s = ScoreTensor::from_fn(3, 1, |i, j, _| match (i, j) {
            (0, 2) | (1, 2) => 1.0,
            _ => -5.0,
        })
        .unwrap();
        assert_eq!(viterbi(&s).spans(0), &[Span::new(1, 2)]);
    }

    #[test]
    fn endpoint_sharing_and_point_after_interval() {
        let s = ScoreTensor::from_fn(4, 1, |i, j, _| match (i, j) {
            (0, 2) | (2, 3) | (3, 3) => 2.0,
            _ => -3.0,
        })
        .unwrap();
        let (spans, score) = viterbi_type(&s, 0).unwrap();
        assert_eq!(spans, vec![Span::new(0, 2), Span::new(2, 3), Span::new(3, 3)]);
        assert_eq!(score, 6.0);
        assert!(check_spans(&spans, Some(4)).is_ok());
    }

    #[test]
    fn validity_rule() {
        let ok = [Span::new(0, 2), Span::new(2, 2), Span::new(3, 5)];
        assert!(check_spans(&ok, Some(6)).is_ok());
        assert!(check_spans(&[Span::new(2, 2), Span::new(2, 2)], None).is_err());
        assert!(check_spans(&[Span::new(2, 2), Span::new(2, 4)], None).is_err());
        assert!(check_spans(&[Span::new(0, 3), Span::new(2, 4)], None).is_err());
        assert!(check_spans(&[Span::new(3, 2)], None).is_err());
        assert!(check_spans(&ok, Some(5)).is_err());
    }

    #[test]
    fn nll_rejects_bad_targets() {
        let s = ScoreTensor::from_raw(&[0.0; 9], 3, 1, 2).unwrap();
        let mut overlapping = EventSet::new(1);
        overlapping.push(0, 0, 1);
        overlapping.push(0, 0, 1);
        assert!(matches!(nll_loss(&s, &overlapping), Err(Error::Contract(_))));
        let mut masked = EventSet::new(1);
        masked.push(0, 0, 2);
        assert!(matches!(nll_loss(&s, &masked), Err(Error::Contract(_))));
    }

    #[test]
    fn cap_bounds_score_reads() {
        let t = 60;
        let s = ScoreTensor::from_raw(&vec![0.1; t * t], t, 1, 20).unwrap();
        let (_, reads) = log_partition_counted(&s, 0).unwrap();
        assert!(reads <= t * 20, "{reads} reads");
        let uncapped = ScoreTensor::from_raw(&vec![0.1; t * t], t, 1, t).unwrap();
        let (_, all) = log_partition_counted(&uncapped, 0).unwrap();
        assert_eq!(all, t * (t + 1) / 2);
    }

    #[test]
    fn brute_force_refuses_long_inputs() {
        assert!(brute_force_enumerate(&zeros(9), 0).is_err());
    }
}
