//! Span-level sampling over dominate span sets.
//!
//! Every set is guaranteed one kept span so that each branch decision stays
//! witnessed. The rest of the budget is spread proportionally to set size;
//! inside a set the most anomalous spans go first, and what remains is
//! filled with the span types sampled least recently.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::{Resolution, SpanFunctionMap};
use crate::model::{Span, SpanId, Trace};
use crate::partition::DominantSpanSet;
use crate::scoring::{ScoreKey, Scorer, ScoringConfig, ZScore, DEFAULT_THETA};

pub const DEFAULT_LRS_HORIZON: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("no span sets to allocate a budget over")]
    EmptyPartition,
    #[error("span sets do not partition trace {trace_id}: {reason}")]
    PartitionMismatch { trace_id: String, reason: String },
    #[error("invalid sampling configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub ratio: f64,
    pub theta_quantile: f64,
    /// Fixed Z threshold used instead of the per-key quantile.
    pub theta_override: Option<f64>,
    pub window: usize,
    pub min_obs: u64,
    pub z_cap: f64,
    pub lrs_horizon: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let s = ScoringConfig::default();
        SamplingConfig {
            ratio: 0.1,
            theta_quantile: DEFAULT_THETA,
            theta_override: None,
            window: s.window,
            min_obs: s.min_obs,
            z_cap: s.z_cap,
            lrs_horizon: DEFAULT_LRS_HORIZON,
        }
    }
}

impl SamplingConfig {
    pub fn with_ratio(ratio: f64) -> Self {
        SamplingConfig {
            ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: String| Err(SampleError::InvalidConfig(m));
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad(format!("ratio {} outside (0, 1]", self.ratio));
        }
        if !(self.theta_quantile > 0.0 && self.theta_quantile < 1.0) {
            return bad(format!("theta quantile {} outside (0, 1)", self.theta_quantile));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.lrs_horizon == 0 {
            return bad("lrs horizon must be positive".into());
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            window: self.window,
            min_obs: self.min_obs,
            theta_quantile: self.theta_quantile,
            z_cap: self.z_cap,
            exact: false,
        }
    }
}

/// Per-set budgets for sets of the given sizes.
pub fn allocate_budget(sizes: &[usize], p: f64) -> Result<Vec<usize>, SampleError> {
    if sizes.is_empty() {
        return Err(SampleError::EmptyPartition);
    }
    let n = sizes.len();
    let total_spans: usize = sizes.iter().sum();
    let total_budget = (p * total_spans as f64).floor() as usize;
    if total_budget < n {
        return Ok(vec![1; n]);
    }
    let leftover = total_budget - n;
    Ok(sizes
        .iter()
        .map(|&d| 1 + (leftover as u128 * d as u128 / total_spans as u128) as usize)
        .collect())
}

/// Recency and frequency of sampling per span type over the last `horizon` decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct LrsLedger {
    horizon: usize,
    seq: u64,
    recent: VecDeque<Vec<ScoreKey>>,
    last: HashMap<ScoreKey, u64>,
    counts: HashMap<ScoreKey, u64>,
}

impl Default for LrsLedger {
    fn default() -> Self {
        Self::new(DEFAULT_LRS_HORIZON)
    }
}

impl LrsLedger {
    pub fn new(horizon: usize) -> Self {
        LrsLedger {
            horizon: horizon.max(1),
            seq: 0,
            recent: VecDeque::new(),
            last: HashMap::new(),
            counts: HashMap::new(),
        }
    }

    pub fn last_sampled(&self, key: &ScoreKey) -> Option<u64> {
        self.last.get(key).copied()
    }

    /// Times `key` was kept within the horizon.
    pub fn count(&self, key: &ScoreKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn decisions(&self) -> u64 {
        self.seq
    }

    pub fn record(&mut self, kept: impl IntoIterator<Item = ScoreKey>) {
        self.seq += 1;
        let keys: Vec<ScoreKey> = kept.into_iter().collect();
        for k in &keys {
            self.last.insert(k.clone(), self.seq);
            *self.counts.entry(k.clone()).or_insert(0) += 1;
        }
        self.recent.push_back(keys);
        while self.recent.len() > self.horizon {
            for k in self.recent.pop_front().expect("non-empty") {
                if let Some(c) = self.counts.get_mut(&k) {
                    *c -= 1;
                    if *c == 0 {
                        self.counts.remove(&k);
                    }
                }
            }
        }
    }

    pub fn record_decision(&mut self, decision: &SamplingDecision, keys: &HashMap<SpanId, ScoreKey>) {
        self.record(decision.kept.iter().filter_map(|id| keys.get(id).cloned()));
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DssReport {
    pub dss_id: usize,
    pub branch_tag: String,
    pub size: usize,
    pub budget: usize,
    pub picked_by_z: usize,
    pub picked_by_lrs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDecision {
    pub trace_id: String,
    /// Kept span ids in trace preorder.
    pub kept: Vec<SpanId>,
    pub dss: Vec<DssReport>,
    pub effective_ratio: f64,
}

impl SamplingDecision {
    pub fn kept_set(&self) -> BTreeSet<&SpanId> {
        self.kept.iter().collect()
    }
}

pub fn score_key(span: &Span, map: &SpanFunctionMap) -> ScoreKey {
    match map.resolve(span) {
        Resolution::Resolved(f) => ScoreKey::Function(f),
        Resolution::Unmapped(_) => ScoreKey::Operation(span.operation.clone()),
    }
}

/// Per-span score, indexed like `trace.spans()`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanScore {
    pub key: ScoreKey,
    pub z: ZScore,
    pub threshold: f64,
}

/// Scores every span in preorder, updating the windows as it goes.
pub fn score_trace(trace: &Trace, map: &SpanFunctionMap, scorer: &mut Scorer) -> Vec<SpanScore> {
    let mut out: Vec<Option<SpanScore>> = vec![None; trace.len()];
    for i in trace.preorder() {
        let span = &trace.spans()[i];
        let key = score_key(span, map);
        let exclusive = trace.exclusive_duration_at(i);
        let window = scorer.window_mut(&key);
        let threshold = window.z_threshold();
        let z = window.observe(exclusive);
        window.record_duration(span.duration);
        out[i] = Some(SpanScore { key, z, threshold });
    }
    out.into_iter().map(|s| s.expect("preorder visits every span")).collect()
}

/// Trace indices of each set, checking that the sets partition the trace.
pub fn dss_indices(trace: &Trace, dss: &[DominantSpanSet]) -> Result<Vec<Vec<usize>>, SampleError> {
    let mismatch = |reason: String| SampleError::PartitionMismatch {
        trace_id: trace.trace_id().to_string(),
        reason,
    };
    let mut seen = vec![false; trace.len()];
    let mut out = Vec::with_capacity(dss.len());
    for d in dss {
        if d.spans.is_empty() {
            return Err(mismatch(format!("set {} is empty", d.dss_id)));
        }
        let mut idx = Vec::with_capacity(d.spans.len());
        for id in &d.spans {
            let i = trace
                .index_of(id)
                .ok_or_else(|| mismatch(format!("span {id} is not in the trace")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(mismatch(format!("span {id} is in two sets")));
            }
            idx.push(i);
        }
        out.push(idx);
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(mismatch(format!("span {} is in no set", trace.spans()[i].span_id)));
    }
    Ok(out)
}

/// Picks the spans to keep from one trace and records them in the ledger.
pub fn sample_trace(
    trace: &Trace,
    dss: &[DominantSpanSet],
    map: &SpanFunctionMap,
    scorer: &mut Scorer,
    ledger: &mut LrsLedger,
    cfg: &SamplingConfig,
) -> Result<SamplingDecision, SampleError> {
    let sets = dss_indices(trace, dss)?;
    let scores = score_trace(trace, map, scorer);
    select(trace, dss, &sets, &scores, ledger, cfg)
}

/// Selection given precomputed scores.
pub fn select(
    trace: &Trace,
    dss: &[DominantSpanSet],
    sets: &[Vec<usize>],
    scores: &[SpanScore],
    ledger: &mut LrsLedger,
    cfg: &SamplingConfig,
) -> Result<SamplingDecision, SampleError> {
    let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let budgets = allocate_budget(&sizes, cfg.ratio)?;
    let spans = trace.spans();
    let mut kept = vec![false; trace.len()];
    let mut reports = Vec::with_capacity(dss.len());
    for ((d, set), &budget) in dss.iter().zip(sets).zip(&budgets) {
        let threshold = |i: usize| cfg.theta_override.unwrap_or(scores[i].threshold);
        let mut flagged: Vec<usize> = set.iter().copied().filter(|&i| scores[i].z.value >= threshold(i)).collect();
        flagged.sort_by(|&a, &b| {
            scores[b].z.value
                .total_cmp(&scores[a].z.value)
                .then_with(|| spans[a].span_id.cmp(&spans[b].span_id))
        });
        flagged.truncate(budget);
        let by_z = flagged.len();
        for &i in &flagged {
            kept[i] = true;
        }
        let mut rest: Vec<usize> = set.iter().copied().filter(|&i| !kept[i]).collect();
        rest.sort_by(|&a, &b| {
            let (ka, kb) = (&scores[a].key, &scores[b].key);
            ledger
                .last_sampled(ka)
                .cmp(&ledger.last_sampled(kb))
                .then_with(|| ledger.count(ka).cmp(&ledger.count(kb)))
                .then_with(|| spans[a].span_id.cmp(&spans[b].span_id))
        });
        let mut by_z = by_z;
        let by_lrs = budget.saturating_sub(by_z).min(rest.len());
        for &i in &rest[..by_lrs] {
            kept[i] = true;
        }
        // an unmapped span says nothing about the path, so a set with mapped
        // spans keeps at least one of them
        let mapped = |i: usize| matches!(scores[i].key, ScoreKey::Function(_));
        let mut picks: Vec<usize> = flagged.iter().chain(&rest[..by_lrs]).copied().collect();
        let mut by_lrs = by_lrs;
        if !picks.iter().any(|&i| mapped(i)) {
            if let Some(&sub) = rest[by_lrs..].iter().find(|&&i| mapped(i)) {
                let out = picks.pop().expect("budget is at least one");
                kept[out] = false;
                kept[sub] = true;
                if by_lrs == 0 {
                    by_z -= 1;
                    by_lrs += 1;
                }
            }
        }
        reports.push(DssReport {
            dss_id: d.dss_id,
            branch_tag: d.branch_tag.clone(),
            size: set.len(),
            budget,
            picked_by_z: by_z,
            picked_by_lrs: by_lrs,
        });
    }
    let kept_ids: Vec<SpanId> = trace
        .preorder()
        .into_iter()
        .filter(|&i| kept[i])
        .map(|i| spans[i].span_id.clone())
        .collect();
    ledger.record(
        trace
            .preorder()
            .into_iter()
            .filter(|&i| kept[i])
            .map(|i| scores[i].key.clone()),
    );
    Ok(SamplingDecision {
        trace_id: trace.trace_id().to_string(),
        effective_ratio: kept_ids.len() as f64 / trace.len() as f64,
        kept: kept_ids,
        dss: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::span;

    fn dss(id: usize, spans: &[&str]) -> DominantSpanSet {
        DominantSpanSet {
            dss_id: id,
            spans: spans.iter().map(|s| SpanId::new(*s)).collect(),
            anchor: vec![],
            branch_tag: "trunk".into(),
        }
    }

    fn flat(n: usize) -> Trace {
        let mut spans = vec![span("r", None, "R.root", 0, 1000)];
        for i in 1..=n {
            spans.push(span(&format!("s{i}"), Some("r"), &format!("Op.f{i}"), 10 * i as u64, 5));
        }
        Trace::new("t1", spans).unwrap()
    }

    fn score(key: &str, z: f64, threshold: f64) -> SpanScore {
        SpanScore {
            key: ScoreKey::Operation(key.into()),
            z: ZScore {
                value: z,
                degenerate: false,
            },
            threshold,
        }
    }

    #[test]
    fn budget_examples() {
        assert_eq!(allocate_budget(&[3, 9], 0.5).unwrap(), vec![2, 4]);
        assert_eq!(allocate_budget(&[5, 5, 5], 0.1).unwrap(), vec![1, 1, 1]);
        assert_eq!(allocate_budget(&[10], 1.0).unwrap(), vec![10]);
        assert_eq!(allocate_budget(&[], 0.5).unwrap_err(), SampleError::EmptyPartition);
    }

    #[test]
    fn top_z_above_threshold() {
        let t = flat(3);
        let d = vec![dss(0, &["r"]), dss(1, &["s1", "s2", "s3"])];
        let sets = vec![vec![0], vec![1, 2, 3]];
        let scores = vec![score("r", 0.0, 2.0), score("a", 5.2, 2.0), score("b", 0.1, 2.0), score("c", 0.3, 2.0)];
        let mut ledger = LrsLedger::new(8);
        let cfg = SamplingConfig::with_ratio(0.1);
        let dec = select(&t, &d, &sets, &scores, &mut ledger, &cfg).unwrap();
        assert_eq!(dec.kept, vec![SpanId::new("r"), SpanId::new("s1")]);
        assert_eq!(dec.dss[1].picked_by_z, 1);
        assert_eq!(dec.effective_ratio, 0.5);
    }

    #[test]
    fn lrs_fill_prefers_never_sampled() {
        let t = flat(4);
        let d = vec![dss(0, &["r", "s1", "s2", "s3", "s4"])];
        let sets = vec![vec![0, 1, 2, 3, 4]];
        let scores = vec![
            score("r", 0.0, 9.0),
            score("a", 0.0, 9.0),
            score("b", 0.0, 9.0),
            score("c", 0.0, 9.0),
            score("d", 0.0, 9.0),
        ];
        let mut ledger = LrsLedger::new(8);
        // r and b were sampled long ago, a just now; c and d never
        ledger.record([ScoreKey::Operation("r".into()), ScoreKey::Operation("b".into())]);
        ledger.record([ScoreKey::Operation("d".into())]);
        ledger.record([ScoreKey::Operation("a".into())]);
        let cfg = SamplingConfig::with_ratio(0.4);
        let dec = select(&t, &d, &sets, &scores, &mut ledger, &cfg).unwrap();
        // s3 was never sampled; r and s2 tie on recency and count, r has the smaller id
        assert_eq!(dec.kept, vec![SpanId::new("r"), SpanId::new("s3")]);
        assert_eq!(dec.dss[0].picked_by_lrs, 2);
    }

    #[test]
    fn alternation_under_low_scores() {
        let t = Trace::new("t1", vec![span("r", None, "R.root", 0, 100), span("a", Some("r"), "Op.a", 1, 5)]).unwrap();
        let d = vec![dss(0, &["r", "a"])];
        let sets = vec![vec![0, 1]];
        let scores = vec![score("r", 0.0, 9.0), score("a", 0.0, 9.0)];
        let mut ledger = LrsLedger::new(16);
        let cfg = SamplingConfig::with_ratio(0.5);
        let picks: Vec<String> = (0..10)
            .map(|_| select(&t, &d, &sets, &scores, &mut ledger, &cfg).unwrap().kept[0].0.clone())
            .collect();
        for w in picks.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }

    #[test]
    fn unmapped_span_never_stands_alone() {
        let t = Trace::new("t1", vec![span("u", None, "GET /x", 0, 100), span("a", Some("u"), "Op.a", 1, 5)]).unwrap();
        let d = vec![dss(0, &["u", "a"])];
        let sets = vec![vec![0, 1]];
        let mut scores = vec![score("GET /x", 50.0, 1.0), score("a", 0.0, 1.0)];
        scores[1].key = ScoreKey::Function(crate::cscfg::FunctionRef::new("svc", "Op", "a"));
        let mut ledger = LrsLedger::new(16);
        let cfg = SamplingConfig::with_ratio(0.01);
        let dec = select(&t, &d, &sets, &scores, &mut ledger, &cfg).unwrap();
        assert_eq!(dec.kept, vec![SpanId::new("a")]);
        assert_eq!((dec.dss[0].picked_by_z, dec.dss[0].picked_by_lrs), (0, 1));
    }

    #[test]
    fn ledger_basics_and_decay() {
        let k = |s: &str| ScoreKey::Operation(s.into());
        let mut l = LrsLedger::new(2);
        l.record([k("s1")]);
        assert_eq!(l.count(&k("s1")), 1);
        assert_eq!(l.count(&k("s2")), 0);
        l.record([k("s2")]);
        l.record([k("s2")]);
        assert_eq!(l.count(&k("s1")), 0);
        assert_eq!(l.count(&k("s2")), 2);
        assert_eq!(l.last_sampled(&k("s1")), Some(1));
    }

    #[test]
    fn full_budget_keeps_everything() {
        let t = flat(3);
        let d = vec![dss(0, &["r", "s1"]), dss(1, &["s2", "s3"])];
        let map = SpanFunctionMap::default();
        let mut scorer = Scorer::new(ScoringConfig::default());
        let mut ledger = LrsLedger::default();
        let dec = sample_trace(&t, &d, &map, &mut scorer, &mut ledger, &SamplingConfig::with_ratio(1.0)).unwrap();
        assert_eq!(dec.kept.len(), 4);
        assert_eq!(dec.effective_ratio, 1.0);
    }

    #[test]
    fn partition_mismatch() {
        let t = flat(2);
        let map = SpanFunctionMap::default();
        let mut scorer = Scorer::default();
        let mut ledger = LrsLedger::default();
        let cfg = SamplingConfig::default();
        let err = sample_trace(&t, &[dss(0, &["r", "s1"])], &map, &mut scorer, &mut ledger, &cfg).unwrap_err();
        assert!(matches!(err, SampleError::PartitionMismatch { .. }));
        let err = sample_trace(&t, &[dss(0, &["r", "s1"]), dss(1, &["s1", "s2"])], &map, &mut scorer, &mut ledger, &cfg)
            .unwrap_err();
        assert!(matches!(err, SampleError::PartitionMismatch { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(SamplingConfig::with_ratio(0.0).validate().is_err());
        assert!(SamplingConfig::with_ratio(1.0).validate().is_ok());
        let cfg = SamplingConfig {
            theta_quantile: 1.0,
            ..SamplingConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
