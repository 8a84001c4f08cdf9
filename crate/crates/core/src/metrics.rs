//! Segment-based and event-based detection metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for comparing times that went through decimal rounding.
const TIME_EPS: f64 = 1e-9;

/// A labelled event in seconds; `offset` is exclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub onset: f64,
    pub offset: f64,
    pub label: String,
}

impl TimedEvent {
    pub fn new(onset: f64, offset: f64, label: impl Into<String>) -> Self {
        TimedEvent {
            onset,
            offset,
            label: label.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<Counts> for ClassScores {
    fn from(c: Counts) -> Self {
        ClassScores {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

/// Per-class counts with micro averaging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub classes: BTreeMap<String, Counts>,
}

impl MetricsReport {
    pub fn micro(&self) -> Counts {
        let mut total = Counts::default();
        self.classes.values().for_each(|c| total.add(*c));
        total
    }

    pub fn class(&self, label: &str) -> Counts {
        self.classes.get(label).copied().unwrap_or_default()
    }

    /// Sums counts class by class.
    pub fn merge(&mut self, other: &MetricsReport) {
        for (k, c) in &other.classes {
            self.classes.entry(k.clone()).or_default().add(*c);
        }
    }

    pub fn scores(&self) -> BTreeMap<String, ClassScores> {
        let mut out: BTreeMap<String, ClassScores> =
            self.classes.iter().map(|(k, c)| (k.clone(), (*c).into())).collect();
        out.insert("micro".into(), self.micro().into());
        out
    }
}

/// Segment-based and event-based reports for one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvaluationReport {
    pub segment: MetricsReport,
    pub event: MetricsReport,
}

#[derive(Serialize)]
struct ReportJson {
    segment: BTreeMap<String, ClassScores>,
    event: BTreeMap<String, ClassScores>,
}

impl EvaluationReport {
    pub fn merge(&mut self, other: &EvaluationReport) {
        self.segment.merge(&other.segment);
        self.event.merge(&other.event);
    }

    pub fn to_json(&self) -> String {
        let doc = ReportJson {
            segment: self.segment.scores(),
            event: self.event.scores(),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    /// Plain-text table of both metric families.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:<10} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n",
            "family", "class", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        for (family, report) in [("segment", &self.segment), ("event", &self.event)] {
            for (k, c) in report.scores() {
                s.push_str(&format!(
                    "{family:<10} {k:<10} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}\n",
                    c.precision, c.recall, c.f1, c.tp, c.fp, c.fn_
                ));
            }
        }
        s
    }
}

fn class_union(a: &[TimedEvent], b: &[TimedEvent], extra: &[String]) -> BTreeSet<String> {
    a.iter()
        .chain(b)
        .map(|e| e.label.clone())
        .chain(extra.iter().cloned())
        .collect()
}

/// Segments `[k·len, (k+1)·len)` with `k < ⌈dur/len⌉` that overlap an event
/// of `label` by a positive amount.
fn active_segments(events: &[TimedEvent], label: &str, segment_len: f64, n_seg: usize) -> Vec<bool> {
    let mut active = vec![false; n_seg];
    for e in events.iter().filter(|e| e.label == label) {
        let first = ((e.onset / segment_len).floor().max(0.0)) as usize;
        let last = ((e.offset / segment_len).ceil().max(0.0) as usize).min(n_seg);
        for (k, slot) in active.iter_mut().enumerate().take(last).skip(first) {
            let lo = e.onset.max(k as f64 * segment_len);
            let hi = e.offset.min((k + 1) as f64 * segment_len);
            if hi - lo > TIME_EPS {
                *slot = true;
            }
        }
    }
    active
}

fn segment_count(segment_len: f64, total_dur: f64) -> Result<usize> {
    if !(segment_len > 0.0) || !(total_dur >= 0.0) || !total_dur.is_finite() {
        return Err(Error::contract(format!(
            "segment length {segment_len} and duration {total_dur} must be positive"
        )));
    }
    Ok((total_dur / segment_len - 1e-6).ceil().max(0.0) as usize)
}

/// Segment-based counts over `[0, total_dur)`. Classes are the union of
/// labels in both lists and `classes`.
pub fn segment_metrics(
    reference: &[TimedEvent],
    predicted: &[TimedEvent],
    segment_len: f64,
    total_dur: f64,
    classes: &[String],
) -> Result<MetricsReport> {
    let n_seg = segment_count(segment_len, total_dur)?;
    let mut report = MetricsReport::default();
    for label in class_union(reference, predicted, classes) {
        let r = active_segments(reference, &label, segment_len, n_seg);
        let p = active_segments(predicted, &label, segment_len, n_seg);
        let mut c = Counts::default();
        for (r, p) in r.into_iter().zip(p) {
            match (r, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        report.classes.insert(label, c);
    }
    Ok(report)
}

/// Maximum-cardinality bipartite matching by augmenting paths.
///
/// `adj[l]` lists the right vertices compatible with left vertex `l`, tried
/// in order. Returns the matching size and each left vertex's partner.
pub fn max_matching(adj: &[Vec<usize>], n_right: usize) -> (usize, Vec<Option<usize>>) {
    fn augment(l: usize, adj: &[Vec<usize>], seen: &mut [bool], right_of: &mut [Option<usize>]) -> bool {
        for &r in &adj[l] {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            if right_of[r].is_none_or(|l2| augment(l2, adj, seen, right_of)) {
                right_of[r] = Some(l);
                return true;
            }
        }
        false
    }
    let mut right_of = vec![None; n_right];
    let mut size = 0;
    for l in 0..adj.len() {
        let mut seen = vec![false; n_right];
        if augment(l, adj, &mut seen, &mut right_of) {
            size += 1;
        }
    }
    let mut left_of = vec![None; adj.len()];
    for (r, l) in right_of.iter().enumerate() {
        if let Some(l) = l {
            left_of[*l] = Some(r);
        }
    }
    (size, left_of)
}

/// Event-based counts: a prediction matches a reference of the same class
/// when both onset and offset lie within `collar` seconds.
pub fn event_metrics(
    reference: &[TimedEvent],
    predicted: &[TimedEvent],
    collar: f64,
    classes: &[String],
) -> Result<MetricsReport> {
    if !(collar >= 0.0) {
        return Err(Error::contract(format!("collar {collar} must be non-negative")));
    }
    let mut report = MetricsReport::default();
    for label in class_union(reference, predicted, classes) {
        let refs: Vec<&TimedEvent> = reference.iter().filter(|e| e.label == label).collect();
        let preds: Vec<&TimedEvent> = predicted.iter().filter(|e| e.label == label).collect();
        let adj: Vec<Vec<usize>> = preds
            .iter()
            .map(|p| {
                refs.iter()
                    .enumerate()
                    .filter(|(_, r)| {
                        (p.onset - r.onset).abs() <= collar + TIME_EPS
                            && (p.offset - r.offset).abs() <= collar + TIME_EPS
                    })
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect();
        let (tp, _) = max_matching(&adj, refs.len());
        report.classes.insert(
            label,
            Counts {
                tp,
                fp: preds.len() - tp,
                fn_: refs.len() - tp,
            },
        );
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub collar: f64,
    pub segment_len: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            collar: 0.2,
            segment_len: 0.05,
        }
    }
}

/// Both metric families for one file of duration `total_dur`.
pub fn evaluate(
    reference: &[TimedEvent],
    predicted: &[TimedEvent],
    total_dur: f64,
    settings: &EvalSettings,
    classes: &[String],
) -> Result<EvaluationReport> {
    Ok(EvaluationReport {
        segment: segment_metrics(reference, predicted, settings.segment_len, total_dur, classes)?,
        event: event_metrics(reference, predicted, settings.collar, classes)?,
    })
}
