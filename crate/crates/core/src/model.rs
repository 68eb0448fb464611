//! Spans, traces, and the newline-delimited trace interchange format.
//!
//! A [`Trace`] is validated on construction: exactly one root, parent links
//! forming a tree, and every child interval nested inside its parent's
//! interval (up to a configurable clock-skew slack). Once built a trace is
//! immutable and can be shared freely across threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a span, unique within its trace.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanId(pub String);

impl SpanId {
    pub fn new(value: impl Into<String>) -> Self {
        SpanId(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SpanId {
    fn from(s: &str) -> Self {
        SpanId(s.to_string())
    }
}

/// One timed operation. Times are integer microseconds since the epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub span_id: SpanId,
    pub trace_id: String,
    pub parent_id: Option<SpanId>,
    pub operation: String,
    pub service: String,
    pub start_time: u64,
    pub duration: u64,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl Span {
    pub fn end_time(&self) -> u64 {
        self.start_time + self.duration
    }
}

/// Serialized form of a trace: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub spans: Vec<Span>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed trace document: {0}")]
    MalformedDocument(String),
    #[error("invariant violated at span {span}: {reason}")]
    InvariantViolation { span: SpanId, reason: String },
    #[error("unknown span {0}")]
    UnknownSpan(SpanId),
}

/// Options applied when validating traces at ingest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Allowed overhang (microseconds) of a child interval beyond its parent's.
    pub clock_skew_slack: u64,
}

/// A validated tree of spans.
#[derive(Clone, Debug)]
pub struct Trace {
    trace_id: String,
    spans: Vec<Span>,
    index: HashMap<SpanId, usize>,
    children: Vec<Vec<usize>>,
    root: usize,
}

impl PartialEq for Trace {
    fn eq(&self, other: &Self) -> bool {
        self.trace_id == other.trace_id && self.spans == other.spans
    }
}

impl Trace {
    /// Builds and validates a trace with zero clock-skew slack.
    pub fn new(trace_id: impl Into<String>, spans: Vec<Span>) -> Result<Self, ModelError> {
        Self::with_options(trace_id, spans, IngestOptions::default())
    }

    pub fn with_options(
        trace_id: impl Into<String>,
        spans: Vec<Span>,
        opts: IngestOptions,
    ) -> Result<Self, ModelError> {
        let trace_id = trace_id.into();
        if spans.is_empty() {
            return Err(ModelError::MalformedDocument(format!(
                "trace {trace_id} has no spans"
            )));
        }
        let mut index = HashMap::with_capacity(spans.len());
        for (i, span) in spans.iter().enumerate() {
            if span.span_id.0.is_empty() {
                return Err(ModelError::InvariantViolation {
                    span: span.span_id.clone(),
                    reason: "empty span id".into(),
                });
            }
            if span.trace_id != trace_id {
                return Err(ModelError::InvariantViolation {
                    span: span.span_id.clone(),
                    reason: format!("belongs to trace {} not {trace_id}", span.trace_id),
                });
            }
            if index.insert(span.span_id.clone(), i).is_some() {
                return Err(ModelError::InvariantViolation {
                    span: span.span_id.clone(),
                    reason: "duplicate span id".into(),
                });
            }
        }

        let mut children = vec![Vec::new(); spans.len()];
        let mut root = None;
        for (i, span) in spans.iter().enumerate() {
            match &span.parent_id {
                None => {
                    if root.is_some() {
                        return Err(ModelError::InvariantViolation {
                            span: span.span_id.clone(),
                            reason: "second root span".into(),
                        });
                    }
                    root = Some(i);
                }
                Some(parent) => match index.get(parent) {
                    Some(&p) => children[p].push(i),
                    None => {
                        return Err(ModelError::InvariantViolation {
                            span: span.span_id.clone(),
                            reason: format!("dangling parent {parent}"),
                        })
                    }
                },
            }
        }
        let Some(root) = root else {
            // every span has a parent, so the links must contain a cycle
            let first = spans.iter().map(|s| &s.span_id).min().cloned();
            return Err(ModelError::InvariantViolation {
                span: first.unwrap_or_else(|| SpanId::new("")),
                reason: "no root span (parent links form a cycle)".into(),
            });
        };

        for list in &mut children {
            list.sort_by(|&a, &b| {
                spans[a]
                    .start_time
                    .cmp(&spans[b].start_time)
                    .then_with(|| spans[a].span_id.cmp(&spans[b].span_id))
            });
        }

        // reachability from the root rules out cycles detached from it
        let mut seen = vec![false; spans.len()];
        let mut stack = vec![root];
        while let Some(i) = stack.pop() {
            seen[i] = true;
            stack.extend(children[i].iter().copied());
        }
        if let Some(i) = (0..spans.len()).filter(|&i| !seen[i]).min_by(|&a, &b| spans[a].span_id.cmp(&spans[b].span_id)) {
            return Err(ModelError::InvariantViolation {
                span: spans[i].span_id.clone(),
                reason: "not reachable from root (parent links form a cycle)".into(),
            });
        }

        let slack = opts.clock_skew_slack;
        for (p, kids) in children.iter().enumerate() {
            let parent = &spans[p];
            for &c in kids {
                let child = &spans[c];
                let starts_early = child.start_time + slack < parent.start_time;
                let ends_late = child.end_time() > parent.end_time() + slack;
                if starts_early || ends_late {
                    return Err(ModelError::InvariantViolation {
                        span: child.span_id.clone(),
                        reason: format!(
                            "interval [{}, {}] escapes parent {} [{}, {}]",
                            child.start_time,
                            child.end_time(),
                            parent.span_id,
                            parent.start_time,
                            parent.end_time()
                        ),
                    });
                }
            }
        }

        Ok(Trace {
            trace_id,
            spans,
            index,
            children,
            root,
        })
    }

    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    /// Spans in their original document order.
    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn root(&self) -> &Span {
        &self.spans[self.root]
    }

    pub fn get(&self, id: &SpanId) -> Option<&Span> {
        self.index.get(id).map(|&i| &self.spans[i])
    }

    pub fn contains(&self, id: &SpanId) -> bool {
        self.index.contains_key(id)
    }

    fn position(&self, id: &SpanId) -> Result<usize, ModelError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| ModelError::UnknownSpan(id.clone()))
    }

    /// Direct children ordered by start time, ties broken by span id.
    pub fn children_of(&self, id: &SpanId) -> Result<Vec<SpanId>, ModelError> {
        let i = self.position(id)?;
        Ok(self.children[i]
            .iter()
            .map(|&c| self.spans[c].span_id.clone())
            .collect())
    }

    pub(crate) fn child_indices(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub(crate) fn root_index(&self) -> usize {
        self.root
    }

    pub(crate) fn index_of(&self, id: &SpanId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Span duration minus the union of its direct children's intervals.
    pub fn exclusive_duration(&self, id: &SpanId) -> Result<u64, ModelError> {
        let i = self.position(id)?;
        Ok(self.exclusive_duration_at(i))
    }

    pub(crate) fn exclusive_duration_at(&self, i: usize) -> u64 {
        let span = &self.spans[i];
        let intervals = self.children[i]
            .iter()
            .map(|&c| (self.spans[c].start_time, self.spans[c].end_time()));
        let covered = covered_length(intervals, span.start_time, span.end_time());
        span.duration.saturating_sub(covered)
    }

    /// Span indices in preorder, children visited in start-time order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.spans.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            out.push(i);
            stack.extend(self.children[i].iter().rev().copied());
        }
        out
    }

    pub fn to_record(&self) -> TraceRecord {
        TraceRecord {
            trace_id: self.trace_id.clone(),
            spans: self.spans.clone(),
        }
    }

    pub fn into_spans(self) -> Vec<Span> {
        self.spans
    }
}

/// Length of the union of `intervals`, clipped to `[lo, hi]`.
fn covered_length(intervals: impl Iterator<Item = (u64, u64)>, lo: u64, hi: u64) -> u64 {
    let mut clipped: Vec<(u64, u64)> = intervals
        .map(|(s, e)| (s.max(lo), e.min(hi)))
        .filter(|(s, e)| s < e)
        .collect();
    clipped.sort_unstable();
    let mut total = 0;
    let mut current: Option<(u64, u64)> = None;
    for (s, e) in clipped {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total
}

/// Parses one trace record (a single JSON object).
pub fn parse_trace(document: &str) -> Result<Trace, ModelError> {
    parse_trace_with(document, IngestOptions::default())
}

pub fn parse_trace_with(document: &str, opts: IngestOptions) -> Result<Trace, ModelError> {
    let record: TraceRecord = serde_json::from_str(document)
        .map_err(|e| ModelError::MalformedDocument(e.to_string()))?;
    Trace::with_options(record.trace_id, record.spans, opts)
}

pub fn serialize_trace(trace: &Trace) -> String {
    serde_json::to_string(&trace.to_record()).expect("trace records always serialize")
}

/// Streams traces from newline-delimited records, skipping blank lines.
pub fn read_traces<R: BufRead>(
    reader: R,
    opts: IngestOptions,
) -> impl Iterator<Item = Result<Trace, ModelError>> {
    reader.lines().filter_map(move |line| match line {
        Ok(line) if line.trim().is_empty() => None,
        Ok(line) => Some(parse_trace_with(&line, opts)),
        Err(e) => Some(Err(ModelError::MalformedDocument(e.to_string()))),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn span(id: &str, parent: Option<&str>, op: &str, start: u64, dur: u64) -> Span {
        Span {
            span_id: SpanId::new(id),
            trace_id: "t1".into(),
            parent_id: parent.map(SpanId::new),
            operation: op.into(),
            service: "svc".into(),
            start_time: start,
            duration: dur,
            attributes: BTreeMap::new(),
        }
    }

    fn fig2() -> Trace {
        Trace::new(
            "t1",
            vec![
                span("a", None, "OrderController.getTicketListByDateAndTripId", 0, 100),
                span("b", Some("a"), "Seat.getTravelDate", 10, 20),
                span("c", Some("a"), "Seat.getSoldTickets", 40, 30),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_span_document() {
        let doc = r#"{"trace_id":"t1","spans":[{"span_id":"a","trace_id":"t1","parent_id":null,
            "operation":"A.f","service":"s","start_time":5,"duration":10,"attributes":{}}]}"#;
        let t = parse_trace(doc).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.root().span_id, SpanId::new("a"));
    }

    #[test]
    fn fig2_root_has_two_children_in_start_order() {
        let t = fig2();
        assert_eq!(
            t.children_of(&SpanId::new("a")).unwrap(),
            vec![SpanId::new("b"), SpanId::new("c")]
        );
        assert!(t.children_of(&SpanId::new("b")).unwrap().is_empty());
    }

    #[test]
    fn equal_start_children_ordered_by_id() {
        let t = Trace::new(
            "t1",
            vec![
                span("r", None, "A.f", 0, 100),
                span("z", Some("r"), "A.g", 10, 5),
                span("m", Some("r"), "A.h", 10, 5),
            ],
        )
        .unwrap();
        assert_eq!(
            t.children_of(&SpanId::new("r")).unwrap(),
            vec![SpanId::new("m"), SpanId::new("z")]
        );
    }

    #[test]
    fn dangling_parent_names_the_span() {
        let err = Trace::new(
            "t1",
            vec![span("a", None, "A.f", 0, 10), span("b", Some("nope"), "A.g", 0, 1)],
        )
        .unwrap_err();
        match err {
            ModelError::InvariantViolation { span, .. } => assert_eq!(span, SpanId::new("b")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cycles_and_multiple_roots_rejected() {
        let err = Trace::new(
            "t1",
            vec![
                span("r", None, "A.f", 0, 10),
                span("x", Some("y"), "A.g", 0, 1),
                span("y", Some("x"), "A.h", 0, 1),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::InvariantViolation { ref span, .. } if span.0 == "x"));
        let err = Trace::new(
            "t1",
            vec![span("r", None, "A.f", 0, 10), span("s", None, "A.g", 0, 1)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::InvariantViolation { ref span, .. } if span.0 == "s"));
    }

    #[test]
    fn child_escaping_parent_needs_slack() {
        let spans = vec![span("r", None, "A.f", 10, 10), span("c", Some("r"), "A.g", 8, 4)];
        assert!(Trace::new("t1", spans.clone()).is_err());
        let opts = IngestOptions { clock_skew_slack: 2 };
        assert!(Trace::with_options("t1", spans, opts).is_ok());
    }

    #[test]
    fn malformed_json_is_reported() {
        assert!(matches!(
            parse_trace("{not json"),
            Err(ModelError::MalformedDocument(_))
        ));
    }

    #[test]
    fn exclusive_duration_cases() {
        let leaf = Trace::new("t1", vec![span("a", None, "A.f", 0, 100)]).unwrap();
        assert_eq!(leaf.exclusive_duration(&SpanId::new("a")).unwrap(), 100);

        let disjoint = Trace::new(
            "t1",
            vec![
                span("a", None, "A.f", 0, 100),
                span("b", Some("a"), "A.g", 10, 30),
                span("c", Some("a"), "A.h", 50, 20),
            ],
        )
        .unwrap();
        assert_eq!(disjoint.exclusive_duration(&SpanId::new("a")).unwrap(), 50);

        let overlapping = Trace::new(
            "t1",
            vec![
                span("a", None, "A.f", 0, 100),
                span("b", Some("a"), "A.g", 10, 30),
                span("c", Some("a"), "A.h", 30, 30),
            ],
        )
        .unwrap();
        assert_eq!(overlapping.exclusive_duration(&SpanId::new("a")).unwrap(), 50);

        assert!(matches!(
            overlapping.exclusive_duration(&SpanId::new("zz")),
            Err(ModelError::UnknownSpan(_))
        ));
    }

    #[test]
    fn covered_length_matches_unit_grid_oracle() {
        // brute force: count covered unit cells
        let cases: &[&[(u64, u64)]] = &[
            &[(10, 40), (30, 60)],
            &[(0, 5), (5, 10), (20, 25)],
            &[(3, 9), (1, 4), (8, 12), (50, 51)],
        ];
        for ivs in cases {
            let mut grid = vec![false; 100];
            for &(s, e) in *ivs {
                for cell in grid.iter_mut().take(e as usize).skip(s as usize) {
                    *cell = true;
                }
            }
            let oracle = grid.iter().filter(|&&c| c).count() as u64;
            assert_eq!(covered_length(ivs.iter().copied(), 0, 100), oracle);
        }
    }

    #[test]
    fn preorder_visits_children_in_start_order() {
        let t = Trace::new(
            "t1",
            vec![
                span("r", None, "A.f", 0, 100),
                span("c2", Some("r"), "A.h", 50, 10),
                span("c1", Some("r"), "A.g", 10, 30),
                span("g", Some("c1"), "A.k", 15, 5),
            ],
        )
        .unwrap();
        let order: Vec<&str> = t.preorder().into_iter().map(|i| t.spans()[i].span_id.as_str()).collect();
        assert_eq!(order, vec!["r", "c1", "g", "c2"]);
    }
}
