//! Rebuilding full traces from sampled spans.
//!
//! Kept spans are embedded into an interprocedural path through the graph.
//! A derivation of an invocation picks a path through its function body and
//! fills each callee slot either with a kept span of that callee (whose own
//! kept descendants are derived recursively) or with an inferred invocation
//! covering a contiguous run of kept spans. Kept spans whose parent was
//! dropped hang under one inferred node that reuses the dropped parent's id.
//!
//! Only control-equivalence class occurrences that are witnessed by a kept
//! span are entered; the entry class of each invocation needs no witness.
//! Among derivations that embed every kept span, the one with the fewest
//! unwitnessed occurrences is chosen; if two remain the path is ambiguous.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cscfg::{Cscfg, DominanceInfo, FunctionRef};
use crate::mapping::SpanFunctionMap;
use crate::model::{ModelError, Span, SpanId, Trace};
use crate::sampler::SamplingDecision;
use crate::scoring::{ScoreKey, StatsSnapshot};

const MAX_DEPTH: usize = 64;
const SEARCH_BUDGET: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Sampled,
    Inferred,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DurationSource {
    HistoricalMean,
    ZeroFallback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebuiltSpan {
    #[serde(flatten)]
    pub span: Span,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_source: Option<DurationSource>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructedTrace {
    pub trace_id: String,
    pub spans: Vec<RebuiltSpan>,
}

impl ReconstructedTrace {
    pub fn inferred(&self) -> impl Iterator<Item = &RebuiltSpan> {
        self.spans.iter().filter(|s| s.origin == Origin::Inferred)
    }

    pub fn to_trace(&self) -> Result<Trace, ModelError> {
        Trace::new(&self.trace_id, self.spans.iter().map(|s| s.span.clone()).collect())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReconstructError {
    #[error("decision for trace {0} keeps no spans")]
    NoKeptSpans(String),
    #[error("span {span} is not part of the decision for trace {trace_id}")]
    NotInDecision { trace_id: String, span: SpanId },
    #[error("trace {0}: no entry function explains the kept spans")]
    UnknownEntry(String),
    #[error("trace {trace_id}: kept spans fit more than one path, diverging at {candidates:?}")]
    AmbiguousPath { trace_id: String, candidates: Vec<String> },
    #[error("trace {0}: path search exceeded its budget")]
    SearchLimit(String),
}

// ---------------------------------------------------------------------------
// derivations

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Label {
    Kept(usize),
    Dropped(SpanId),
    Bare,
}

#[derive(Debug)]
enum Fill {
    Kept { k: usize, sub: Arc<Deriv> },
    Inferred { label: Label, sub: Arc<Deriv> },
}

#[derive(Debug)]
struct DStep {
    block: usize,
    fill: Fill,
}

#[derive(Debug)]
struct Deriv {
    function: FunctionRef,
    steps: Vec<DStep>,
}

impl Deriv {
    /// Block ids in execution order, for reporting divergence.
    fn block_trail(&self, body: &dyn Fn(&FunctionRef) -> Option<Arc<BodyInfo>>, out: &mut Vec<String>) {
        let info = body(&self.function);
        for s in &self.steps {
            if let Some(info) = &info {
                out.push(info.blocks[s.block].clone());
            }
            match &s.fill {
                Fill::Kept { sub, .. } | Fill::Inferred { sub, .. } => sub.block_trail(body, out),
            }
        }
    }
}

#[derive(Debug)]
struct Best {
    unwitnessed: u32,
    /// Number of derivations reaching `unwitnessed`, capped at 2.
    count: u8,
    reprs: Vec<Arc<Deriv>>,
}

#[derive(Default)]
struct Acc {
    best: Option<(u32, u8, Vec<Arc<Deriv>>)>,
}

impl Acc {
    fn offer(&mut self, u: u32, count: u8, build: impl Fn(usize) -> Deriv) {
        match &mut self.best {
            Some((bu, _, _)) if u > *bu => {}
            Some((bu, bc, reprs)) if u == *bu => {
                *bc = (*bc + count).min(2);
                if reprs.len() < 2 {
                    reprs.push(Arc::new(build(0)));
                }
            }
            _ => {
                let mut reprs = vec![Arc::new(build(0))];
                if count >= 2 {
                    reprs.push(Arc::new(build(1)));
                }
                self.best = Some((u, count.min(2), reprs));
            }
        }
    }

    fn bound(&self) -> Option<u32> {
        self.best.as_ref().map(|b| b.0)
    }

    fn settled(&self) -> bool {
        matches!(self.best, Some((0, 2, _)))
    }

    fn finish(self) -> Option<Arc<Best>> {
        self.best.map(|(u, c, reprs)| {
            Arc::new(Best {
                unwitnessed: u,
                count: c,
                reprs,
            })
        })
    }
}

/// Precomputed view of one function body.
struct BodyInfo {
    blocks: Vec<String>,
    callees: Vec<Vec<FunctionRef>>,
    succ: Vec<Vec<usize>>,
    exit: Vec<bool>,
    entries: Vec<usize>,
    skippable: bool,
    class: Vec<usize>,
}

impl BodyInfo {
    fn new(graph: &Cscfg, f: &FunctionRef) -> Option<Self> {
        let body = graph.function(f).filter(|b| !b.blocks.is_empty())?;
        let dom = graph.dominance(f).ok()?;
        let index: HashMap<&str, usize> = body.blocks.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
        let sorted = |ids: &mut Vec<usize>| ids.sort_by(|a, b| body.blocks[*a].cmp(&body.blocks[*b]));
        let mut entries: Vec<usize> = body.entries.iter().map(|b| index[b.as_str()]).collect();
        sorted(&mut entries);
        let succ = body
            .blocks
            .iter()
            .map(|b| {
                let mut s: Vec<usize> = body.successors(b).map(|t| index[t.as_str()]).collect();
                sorted(&mut s);
                s
            })
            .collect();
        Some(BodyInfo {
            blocks: body.blocks.iter().map(|b| b.0.clone()).collect(),
            callees: body
                .blocks
                .iter()
                .map(|b| graph.block(b).expect("body block").callees.iter().map(|c| c.callee.clone()).collect())
                .collect(),
            succ,
            exit: body.blocks.iter().map(|b| body.exits.contains(b)).collect(),
            entries,
            skippable: body.skippable,
            class: body.blocks.iter().map(|b| dom.class_of(b).expect("class")).collect(),
        })
    }
}

struct KeptSpan {
    span: Span,
    func: FunctionRef,
    /// Parent after skipping kept unmapped spans.
    parent: Option<SpanId>,
}

type MemoKey = (FunctionRef, Label, usize, usize);

struct Search<'a> {
    graph: &'a Cscfg,
    kept: Vec<KeptSpan>,
    by_id: HashMap<SpanId, usize>,
    groups: HashMap<SpanId, Vec<usize>>,
    nest_end: Vec<usize>,
    bodies: HashMap<FunctionRef, Option<Arc<BodyInfo>>>,
    reach: HashMap<FunctionRef, Arc<HashSet<FunctionRef>>>,
    memo: HashMap<MemoKey, Option<Arc<Best>>>,
    on_stack: HashSet<MemoKey>,
    depth: usize,
    steps: u64,
    exhausted: bool,
}

struct Walk<'w> {
    f: &'w FunctionRef,
    info: &'w BodyInfo,
    label: &'w Label,
    j: usize,
    bound: u32,
}

struct Trail {
    visits: Vec<u32>,
    /// `(block, visit, witnessed)` per block visit.
    occ: Vec<(usize, u32, bool)>,
    steps: Vec<(usize, FillChoice)>,
    sub_u: u32,
    direct: usize,
}

#[derive(Clone)]
enum FillChoice {
    Kept(usize, Arc<Best>),
    Inferred(Label, Arc<Best>),
}

impl FillChoice {
    fn best(&self) -> &Arc<Best> {
        match self {
            FillChoice::Kept(_, b) | FillChoice::Inferred(_, b) => b,
        }
    }
}

impl<'a> Search<'a> {
    fn body(&mut self, f: &FunctionRef) -> Option<Arc<BodyInfo>> {
        if let Some(b) = self.bodies.get(f) {
            return b.clone();
        }
        let b = BodyInfo::new(self.graph, f).map(Arc::new);
        self.bodies.insert(f.clone(), b.clone());
        b
    }

    /// Functions reachable from `f` through at least one call.
    fn reach(&mut self, f: &FunctionRef) -> Arc<HashSet<FunctionRef>> {
        if let Some(r) = self.reach.get(f) {
            return Arc::clone(r);
        }
        let mut seen: HashSet<FunctionRef> = HashSet::new();
        let mut queue: VecDeque<FunctionRef> = VecDeque::from([f.clone()]);
        while let Some(g) = queue.pop_front() {
            let Some(body) = self.graph.function(&g) else { continue };
            for b in &body.blocks {
                for c in &self.graph.block(b).expect("body block").callees {
                    if seen.insert(c.callee.clone()) {
                        queue.push_back(c.callee.clone());
                    }
                }
            }
        }
        let r = Arc::new(seen);
        self.reach.insert(f.clone(), Arc::clone(&r));
        r
    }

    fn parent_ok(&self, label: &Label, a: usize) -> bool {
        let p = self.kept[a].parent.as_ref();
        match label {
            Label::Kept(k) => p == Some(&self.kept[*k].span.span_id),
            Label::Dropped(id) => p == Some(id),
            Label::Bare => false,
        }
    }

    /// A run of kept spans that can sit under one inferred invocation.
    fn closed(&self, a: usize, e: usize) -> bool {
        (a..e).all(|x| match &self.kept[x].parent {
            None => false,
            Some(p) => match self.by_id.get(p) {
                Some(&k) => (a..e).contains(&k),
                None => self.groups[p].iter().all(|m| (a..e).contains(m)),
            },
        })
    }

    fn labels(&self, a: usize, e: usize) -> Vec<Label> {
        let mut ids: BTreeSet<&SpanId> = BTreeSet::new();
        for x in a..e {
            if let Some(p) = &self.kept[x].parent {
                if !self.by_id.contains_key(p) {
                    ids.insert(p);
                }
            }
        }
        let mut out: Vec<Label> = ids.into_iter().map(|p| Label::Dropped(p.clone())).collect();
        out.push(Label::Bare);
        out
    }

    fn derive(&mut self, f: &FunctionRef, label: Label, i: usize, j: usize) -> Option<Arc<Best>> {
        let (i, j) = if i == j && label == Label::Bare { (0, 0) } else { (i, j) };
        let key = (f.clone(), label.clone(), i, j);
        if let Some(r) = self.memo.get(&key) {
            return r.clone();
        }
        if self.on_stack.contains(&key) || self.depth >= MAX_DEPTH || self.exhausted {
            return None;
        }
        self.on_stack.insert(key.clone());
        self.depth += 1;
        let result = match self.body(f) {
            None => (i == j && !matches!(label, Label::Dropped(_))).then(|| {
                Arc::new(Best {
                    unwitnessed: 0,
                    count: 1,
                    reprs: vec![Arc::new(Deriv {
                        function: f.clone(),
                        steps: Vec::new(),
                    })],
                })
            }),
            Some(info) => {
                let mut acc = Acc::default();
                let walk = Walk {
                    f,
                    info: &info,
                    label: &label,
                    j,
                    bound: (j - i) as u32 + 1,
                };
                let mut trail = Trail {
                    visits: vec![0; info.blocks.len()],
                    occ: Vec::new(),
                    steps: Vec::new(),
                    sub_u: 0,
                    direct: 0,
                };
                for &e in &info.entries {
                    self.enter(&walk, e, i, &mut trail, &mut acc);
                }
                if info.skippable {
                    self.at_exit(&walk, i, &mut trail, &mut acc);
                }
                acc.finish()
            }
        };
        self.depth -= 1;
        self.on_stack.remove(&key);
        if !self.exhausted {
            self.memo.insert(key, result.clone());
        }
        result
    }

    fn tick(&mut self) -> bool {
        self.steps += 1;
        if self.steps > SEARCH_BUDGET {
            self.exhausted = true;
        }
        !self.exhausted
    }

    fn enter(&mut self, w: &Walk, b: usize, a: usize, t: &mut Trail, acc: &mut Acc) {
        if t.visits[b] >= w.bound {
            return;
        }
        t.occ.push((b, t.visits[b], false));
        t.visits[b] += 1;
        self.slot(w, b, 0, a, t, acc);
        t.visits[b] -= 1;
        t.occ.pop();
    }

    fn slot(&mut self, w: &Walk, b: usize, k: usize, a: usize, t: &mut Trail, acc: &mut Acc) {
        if !self.tick() || acc.settled() || acc.bound().is_some_and(|u| t.sub_u > u) {
            return;
        }
        if k == w.info.callees[b].len() {
            if w.info.exit[b] {
                self.at_exit(w, a, t, acc);
            }
            for &s in &w.info.succ[b] {
                self.enter(w, s, a, t, acc);
            }
            return;
        }
        let g = w.info.callees[b][k].clone();
        // a kept span of the callee
        if a < w.j && self.kept[a].func == g && self.parent_ok(w.label, a) {
            let e = self.nest_end[a];
            if e <= w.j {
                if let Some(sub) = self.derive(&g, Label::Kept(a), a + 1, e) {
                    self.push_fill(w, b, k, a, e, FillChoice::Kept(a, sub), t, acc);
                }
            }
        }
        // an inferred invocation over kept[a..e]
        let reach = self.reach(&g);
        for e in a..=w.j {
            if e > a && !(reach.contains(&self.kept[e - 1].func) && self.closed(a, e)) {
                continue;
            }
            let labels = if e == a { vec![Label::Bare] } else { self.labels(a, e) };
            for label in labels {
                if matches!(label, Label::Dropped(_)) && &label == w.label {
                    continue;
                }
                if let Some(sub) = self.derive(&g, label.clone(), a, e) {
                    self.push_fill(w, b, k, a, e, FillChoice::Inferred(label, sub), t, acc);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push_fill(&mut self, w: &Walk, b: usize, k: usize, a: usize, e: usize, fill: FillChoice, t: &mut Trail, acc: &mut Acc) {
        let direct = matches!(fill, FillChoice::Kept(..));
        let prev = t.occ.last().expect("inside a block").2;
        t.occ.last_mut().expect("inside a block").2 = prev || e > a;
        t.sub_u += fill.best().unwitnessed;
        t.direct += usize::from(direct);
        t.steps.push((b, fill));
        self.slot(w, b, k + 1, e, t, acc);
        let (_, fill) = t.steps.pop().expect("pushed");
        t.direct -= usize::from(direct);
        t.sub_u -= fill.best().unwitnessed;
        t.occ.last_mut().expect("inside a block").2 = prev;
    }

    fn at_exit(&mut self, w: &Walk, a: usize, t: &mut Trail, acc: &mut Acc) {
        if a != w.j {
            return;
        }
        if matches!(w.label, Label::Dropped(_)) && t.direct == 0 {
            return;
        }
        let mut occurrences: HashMap<(usize, u32), bool> = HashMap::new();
        for &(b, visit, witnessed) in &t.occ {
            *occurrences.entry((w.info.class[b], visit)).or_insert(false) |= witnessed;
        }
        let local = occurrences
            .iter()
            .filter(|(&(class, visit), &wit)| !wit && !(class == DominanceInfo::ENTRY_CLASS && visit == 0))
            .count() as u32;
        let u = local + t.sub_u;
        let mut count: u8 = 1;
        let mut split = None;
        for (n, (_, fill)) in t.steps.iter().enumerate() {
            if fill.best().count >= 2 && split.is_none() {
                split = Some(n);
            }
            count = count.saturating_mul(fill.best().count).min(2);
        }
        let f = w.f.clone();
        let steps = &t.steps;
        acc.offer(u, count, |which| Deriv {
            function: f.clone(),
            steps: steps
                .iter()
                .enumerate()
                .map(|(n, (block, fill))| {
                    let r = if which == 1 && Some(n) == split { 1 } else { 0 };
                    let fill = match fill {
                        FillChoice::Kept(k, best) => Fill::Kept {
                            k: *k,
                            sub: Arc::clone(&best.reprs[r.min(best.reprs.len() - 1)]),
                        },
                        FillChoice::Inferred(label, best) => Fill::Inferred {
                            label: label.clone(),
                            sub: Arc::clone(&best.reprs[r.min(best.reprs.len() - 1)]),
                        },
                    };
                    DStep { block: *block, fill }
                })
                .collect(),
        });
    }
}

// ---------------------------------------------------------------------------
// output

struct Node {
    id: SpanId,
    func: Option<FunctionRef>,
    kept: Option<Span>,
    parent: Option<usize>,
    children: Vec<usize>,
}

fn emit(nodes: &mut Vec<Node>, trace_id: &str, deriv: &Deriv, at: usize, kept: &[KeptSpan]) {
    for step in &deriv.steps {
        let (node, sub) = match &step.fill {
            Fill::Kept { k, sub } => (
                Node {
                    id: kept[*k].span.span_id.clone(),
                    func: Some(kept[*k].func.clone()),
                    kept: Some(kept[*k].span.clone()),
                    parent: Some(at),
                    children: Vec::new(),
                },
                sub,
            ),
            Fill::Inferred { label, sub } => (
                Node {
                    id: match label {
                        Label::Dropped(p) => p.clone(),
                        _ => SpanId::new(format!("{trace_id}:inf{:05}", nodes.len())),
                    },
                    func: Some(sub.function.clone()),
                    kept: None,
                    parent: Some(at),
                    children: Vec::new(),
                },
                sub,
            ),
        };
        nodes.push(node);
        let idx = nodes.len() - 1;
        nodes[at].children.push(idx);
        emit(nodes, trace_id, sub, idx, kept);
    }
}

/// Rebuilds the full trace behind a sampling decision.
pub fn reconstruct(
    decision: &SamplingDecision,
    kept_spans: &[Span],
    graph: &Cscfg,
    map: &SpanFunctionMap,
    stats: &StatsSnapshot,
) -> Result<ReconstructedTrace, ReconstructError> {
    let trace_id = decision.trace_id.clone();
    if kept_spans.is_empty() {
        return Err(ReconstructError::NoKeptSpans(trace_id));
    }
    let in_decision = decision.kept_set();
    if let Some(s) = kept_spans.iter().find(|s| !in_decision.contains(&s.span_id)) {
        return Err(ReconstructError::NotInDecision {
            trace_id,
            span: s.span_id.clone(),
        });
    }
    let all: HashMap<&SpanId, &Span> = kept_spans.iter().map(|s| (&s.span_id, s)).collect();
    let resolved: HashMap<&SpanId, Option<FunctionRef>> = kept_spans
        .iter()
        .map(|s| (&s.span_id, map.resolve(s).function().cloned()))
        .collect();
    // parent after skipping kept unmapped spans
    let effective_parent = |s: &Span| -> Option<SpanId> {
        let mut p = s.parent_id.clone();
        let mut guard = 0;
        while let Some(id) = &p {
            match (all.get(id), resolved.get(id)) {
                (Some(ps), Some(None)) if guard < kept_spans.len() => {
                    p = ps.parent_id.clone();
                    guard += 1;
                }
                _ => break,
            }
        }
        p
    };
    let mut kept: Vec<KeptSpan> = kept_spans
        .iter()
        .filter_map(|s| {
            resolved[&s.span_id].clone().map(|func| KeptSpan {
                span: s.clone(),
                func,
                parent: effective_parent(s),
            })
        })
        .collect();
    kept.sort_by(|a, b| {
        a.span
            .start_time
            .cmp(&b.span.start_time)
            .then(b.span.end_time().cmp(&a.span.end_time()))
            .then(a.span.span_id.cmp(&b.span.span_id))
    });
    if kept.is_empty() {
        return Err(ReconstructError::UnknownEntry(trace_id));
    }
    let n = kept.len();
    let by_id: HashMap<SpanId, usize> = kept.iter().enumerate().map(|(i, k)| (k.span.span_id.clone(), i)).collect();
    let mut groups: HashMap<SpanId, Vec<usize>> = HashMap::new();
    for (i, k) in kept.iter().enumerate() {
        if let Some(p) = &k.parent {
            if !by_id.contains_key(p) {
                groups.entry(p.clone()).or_default().push(i);
            }
        }
    }
    let nest_end = (0..n)
        .map(|a| {
            let (s, e) = (kept[a].span.start_time, kept[a].span.end_time());
            let mut b = a + 1;
            while b < n && kept[b].span.start_time >= s && kept[b].span.end_time() <= e {
                b += 1;
            }
            b
        })
        .collect();

    let mut search = Search {
        graph,
        kept,
        by_id,
        groups,
        nest_end,
        bodies: HashMap::new(),
        reach: HashMap::new(),
        memo: HashMap::new(),
        on_stack: HashSet::new(),
        depth: 0,
        steps: 0,
        exhausted: false,
    };

    // candidate roots
    let entry_points = graph.entry_points();
    let first = &search.kept[0];
    let first_fn = first.func.clone();
    let kept_root_ok = search.nest_end[0] == n && (graph.is_defined(&first.func) || graph.is_external(&first.func));
    let kept_root_only = first.parent.is_none() || entry_points.contains(&first.func);
    let mut options: Vec<(Option<(FunctionRef, Label)>, Arc<Best>)> = Vec::new();
    if !kept_root_only && search.closed(0, n) {
        for e in &entry_points {
            let reach = search.reach(e);
            if !search.kept.iter().all(|k| reach.contains(&k.func)) {
                continue;
            }
            for label in search.labels(0, n) {
                if let Some(b) = search.derive(e, label.clone(), 0, n) {
                    options.push((Some((e.clone(), label)), b));
                }
            }
        }
    }
    // a kept span with a dropped parent is the root only when nothing above explains it
    if kept_root_ok && (kept_root_only || options.is_empty()) {
        if let Some(b) = search.derive(&first_fn, Label::Kept(0), 1, n) {
            options.push((None, b));
        }
    }
    if search.exhausted {
        return Err(ReconstructError::SearchLimit(trace_id));
    }
    let Some(min_u) = options.iter().map(|(_, b)| b.unwitnessed).min() else {
        return Err(ReconstructError::UnknownEntry(trace_id));
    };
    let best: Vec<&(Option<(FunctionRef, Label)>, Arc<Best>)> = options.iter().filter(|(_, b)| b.unwitnessed == min_u).collect();
    let total: u32 = best.iter().map(|(_, b)| b.count as u32).sum();
    if total >= 2 {
        let mut reprs: Vec<Arc<Deriv>> = best.iter().flat_map(|(_, b)| b.reprs.iter().cloned()).collect();
        reprs.truncate(2);
        let bodies = std::cell::RefCell::new(&mut search);
        let lookup = |f: &FunctionRef| bodies.borrow_mut().body(f);
        let trails: Vec<Vec<String>> = reprs
            .iter()
            .map(|d| {
                let mut t = Vec::new();
                d.block_trail(&lookup, &mut t);
                t
            })
            .collect();
        let at = (0..).find(|&i| trails[0].get(i) != trails[1].get(i)).unwrap_or(0);
        let mut candidates: Vec<String> = trails
            .iter()
            .map(|t| t.get(at).cloned().unwrap_or_else(|| "exit".into()))
            .collect();
        candidates.sort();
        candidates.dedup();
        return Err(ReconstructError::AmbiguousPath { trace_id, candidates });
    }
    let (root_fn, chosen) = best[0];
    let deriv = Arc::clone(&chosen.reprs[0]);

    // build the node tree
    let mut nodes: Vec<Node> = Vec::new();
    match root_fn {
        None => nodes.push(Node {
            id: search.kept[0].span.span_id.clone(),
            func: Some(search.kept[0].func.clone()),
            kept: Some(search.kept[0].span.clone()),
            parent: None,
            children: Vec::new(),
        }),
        Some((f, label)) => {
            let id = match label {
                Label::Dropped(p) => p.clone(),
                _ => SpanId::new(format!("{trace_id}:inf{:05}", 0)),
            };
            nodes.push(Node {
                id,
                func: Some(f.clone()),
                kept: None,
                parent: None,
                children: Vec::new(),
            });
        }
    }
    emit(&mut nodes, &trace_id, &deriv, 0, &search.kept);

    // attach kept unmapped spans
    let mut unmapped: Vec<&Span> = kept_spans.iter().filter(|s| resolved[&s.span_id].is_none()).collect();
    unmapped.sort_by(|a, b| {
        a.start_time
            .cmp(&b.start_time)
            .then(b.end_time().cmp(&a.end_time()))
            .then(a.span_id.cmp(&b.span_id))
    });
    let mut root = 0usize;
    for u in unmapped {
        let by_node: HashMap<&SpanId, usize> = nodes.iter().enumerate().map(|(i, n)| (&n.id, i)).collect();
        let parent = u.parent_id.as_ref().and_then(|p| by_node.get(p).copied());
        let idx = nodes.len();
        match (parent, &u.parent_id) {
            (None, None) => {
                nodes.push(Node {
                    id: u.span_id.clone(),
                    func: None,
                    kept: Some(u.clone()),
                    parent: None,
                    children: vec![root],
                });
                nodes[root].parent = Some(idx);
                root = idx;
            }
            (p, _) => {
                let p = p.unwrap_or(root);
                nodes.push(Node {
                    id: u.span_id.clone(),
                    func: None,
                    kept: Some(u.clone()),
                    parent: Some(p),
                    children: Vec::new(),
                });
                nodes[p].children.push(idx);
            }
        }
    }
    // kept spans hanging under kept unmapped spans keep their recorded parent
    {
        let by_node: HashMap<SpanId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        for i in 0..nodes.len() {
            let Some(recorded) = nodes[i].kept.as_ref().and_then(|s| s.parent_id.clone()) else { continue };
            let Some(&want) = by_node.get(&recorded) else { continue };
            let Some(cur) = nodes[i].parent else { continue };
            if want == cur || nodes[want].func.is_some() || is_ancestor(&nodes, i, want) {
                continue;
            }
            nodes[cur].children.retain(|&c| c != i);
            nodes[want].children.push(i);
            nodes[i].parent = Some(want);
            if nodes[want].parent.is_none() && want != root {
                nodes[want].parent = Some(cur);
                nodes[cur].children.push(want);
            }
        }
    }

    let spans = assign_times(&nodes, root, &trace_id, stats);
    Ok(ReconstructedTrace { trace_id, spans })
}

fn is_ancestor(nodes: &[Node], anc: usize, mut n: usize) -> bool {
    loop {
        if n == anc {
            return true;
        }
        match nodes[n].parent {
            Some(p) => n = p,
            None => return false,
        }
    }
}

/// Lays out inferred spans around the kept ones.
struct Packer<'a> {
    nodes: &'a [Node],
    /// Interval spanned by each node's kept descendants, itself included.
    cover: Vec<Option<(u64, u64)>>,
    /// Historical fill per inferred node.
    fill: Vec<(u64, DurationSource, f64)>,
    /// Duration estimate: real for kept nodes, packed children or fill otherwise.
    est: Vec<u64>,
    /// Time an inferred node needs before its first kept descendant.
    prefix: Vec<u64>,
    interval: Vec<(u64, u64)>,
}

impl<'a> Packer<'a> {
    fn new(nodes: &'a [Node], root: usize, stats: &StatsSnapshot) -> Self {
        let fill = nodes
            .iter()
            .map(|n| match n.func.as_ref().and_then(|f| stats.duration(&ScoreKey::Function(f.clone()))) {
                Some((m, sd)) => (m.round().max(0.0) as u64, DurationSource::HistoricalMean, sd),
                None => (0, DurationSource::ZeroFallback, 0.0),
            })
            .collect();
        let mut p = Packer {
            nodes,
            cover: vec![None; nodes.len()],
            fill,
            est: vec![0; nodes.len()],
            prefix: vec![0; nodes.len()],
            interval: vec![(0, 0); nodes.len()],
        };
        p.measure(root);
        p
    }

    fn measure(&mut self, n: usize) {
        let node = &self.nodes[n];
        let mut cover = node.kept.as_ref().map(|s| (s.start_time, s.end_time()));
        let mut sum = 0;
        let mut prefix = 0;
        let mut anchored = false;
        for &c in &node.children {
            self.measure(c);
            sum += self.est[c];
            if let Some((s, e)) = self.cover[c] {
                cover = Some(cover.map_or((s, e), |(cs, ce)| (cs.min(s), ce.max(e))));
                if !anchored {
                    prefix += if self.nodes[c].kept.is_some() { 0 } else { self.prefix[c] };
                    anchored = true;
                }
            } else if !anchored {
                prefix += self.est[c];
            }
        }
        self.cover[n] = cover;
        match &node.kept {
            Some(s) => self.est[n] = s.duration,
            None => {
                self.est[n] = self.fill[n].0.max(sum);
                self.prefix[n] = prefix;
            }
        }
    }

    /// Places `n` at `start`; `bound` caps inferred ends. Returns the end.
    fn place(&mut self, n: usize, start: u64, bound: Option<u64>) -> u64 {
        let node = &self.nodes[n];
        let (start, bound) = match &node.kept {
            Some(s) => (s.start_time, Some(s.end_time())),
            None => (bound.map_or(start, |b| start.min(b)), bound),
        };
        let cursor = self.pack_children(n, start, bound);
        let end = match &node.kept {
            Some(s) => s.end_time(),
            None => {
                let end = cursor.max(start + self.fill[n].0).max(self.cover[n].map_or(0, |c| c.1));
                bound.map_or(end, |b| end.min(b.max(start)))
            }
        };
        self.interval[n] = (start, end);
        end
    }

    fn pack_children(&mut self, n: usize, start: u64, bound: Option<u64>) -> u64 {
        let nodes = self.nodes;
        let kids = &nodes[n].children;
        // start each anchored child aims for, and what it can tolerate at the latest
        let anchor: Vec<Option<(u64, u64)>> = kids
            .iter()
            .map(|&c| {
                let (ds, _) = self.cover[c]?;
                Some(match &nodes[c].kept {
                    Some(s) => (s.start_time, s.start_time),
                    None => (ds.saturating_sub(self.prefix[c]), ds),
                })
            })
            .collect();
        // latest end for each child that leaves room before the next anchor
        let mut limit: Vec<Option<u64>> = vec![bound; kids.len()];
        let mut next: Option<u64> = bound;
        let mut need = 0u64;
        for k in (0..kids.len()).rev() {
            limit[k] = next.map(|a| a.saturating_sub(need));
            match anchor[k] {
                Some((target, _)) => {
                    next = Some(next.map_or(target, |a| a.min(target)));
                    need = 0;
                }
                None => need += self.est[kids[k]],
            }
        }
        let mut cursor = start;
        let mut run: Vec<usize> = Vec::new();
        for (k, &c) in kids.iter().enumerate() {
            let Some((target, latest)) = anchor[k] else {
                run.push(c);
                continue;
            };
            let ds = self.cover[c].map_or(latest, |v| v.0);
            let need: u64 = run.iter().map(|&r| self.est[r]).sum();
            // when the gap is short the run and the child's prefix shrink together
            let pre = ds.saturating_sub(target);
            let room = ds.saturating_sub(cursor);
            let (run_start, space) = if need + pre <= room {
                (target.saturating_sub(need).max(cursor), need)
            } else {
                let share = (room as f64 * need as f64 / (need + pre).max(1) as f64).floor() as u64;
                (cursor, share)
            };
            let pos = self.pack_run(&std::mem::take(&mut run), run_start, Some(space));
            let c_start = pos.max(target).min(ds).max(cursor.min(ds));
            let de = self.cover[c].map_or(0, |v| v.1);
            let end = self.place(c, c_start, limit[k].map(|l| l.max(de)));
            if nodes[c].func.is_some() || nodes[c].kept.is_none() {
                cursor = cursor.max(end);
            }
        }
        let space = bound.map(|b| b.saturating_sub(cursor));
        self.pack_run(&run, cursor, space)
    }

    /// Packs unanchored siblings from `start`, squeezing them into `space`.
    fn pack_run(&mut self, run: &[usize], start: u64, space: Option<u64>) -> u64 {
        let need: u64 = run.iter().map(|&r| self.est[r]).sum();
        let scale = match space {
            Some(s) if s < need => s as f64 / need as f64,
            _ => 1.0,
        };
        let mut pos = start;
        for &r in run {
            let d = ((self.est[r] as f64) * scale).floor() as u64;
            pos = self.place(r, pos, Some(pos + d));
        }
        pos
    }
}

fn assign_times(nodes: &[Node], root: usize, trace_id: &str, stats: &StatsSnapshot) -> Vec<RebuiltSpan> {
    let mut packer = Packer::new(nodes, root, stats);
    let fallback = packer.cover[root].map_or(0, |c| c.0).saturating_sub(packer.prefix[root]);
    packer.place(root, fallback, None);
    let interval = packer.interval;
    let source: Vec<Option<(DurationSource, f64)>> = packer.fill.iter().map(|f| Some((f.1, f.2))).collect();

    // preorder output
    let mut out = Vec::with_capacity(nodes.len());
    let mut order = vec![root];
    while let Some(n) = order.pop() {
        let node = &nodes[n];
        let parent_id = node.parent.map(|p| nodes[p].id.clone());
        match &node.kept {
            Some(s) => {
                let mut span = s.clone();
                span.parent_id = match (&s.parent_id, &parent_id) {
                    (Some(rec), Some(actual)) if rec == actual => Some(rec.clone()),
                    (_, actual) => actual.clone(),
                };
                out.push(RebuiltSpan {
                    span,
                    origin: Origin::Sampled,
                    duration_source: None,
                });
            }
            None => {
                let func = node.func.as_ref().expect("inferred nodes have a function");
                let (start, end) = interval[n];
                let (src, sd) = source[n].unwrap_or((DurationSource::ZeroFallback, 0.0));
                let mut attributes = std::collections::BTreeMap::new();
                attributes.insert("duration_std".to_string(), format!("{sd:.3}"));
                out.push(RebuiltSpan {
                    span: Span {
                        span_id: node.id.clone(),
                        trace_id: trace_id.to_string(),
                        parent_id,
                        operation: func.operation(),
                        service: func.service.clone(),
                        start_time: start,
                        duration: end - start,
                        attributes,
                    },
                    origin: Origin::Inferred,
                    duration_source: Some(src),
                });
            }
        }
        for &c in node.children.iter().rev() {
            order.push(c);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// fidelity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub structure_exact: bool,
    /// Share of the original's mapped spans matched in the rebuilt tree.
    pub span_recall: f64,
    /// Mean relative duration error over inferred spans; needs an exact structure.
    pub duration_error: Option<f64>,
    pub inferred: usize,
}

#[derive(Debug)]
struct LNode {
    label: FunctionRef,
    duration: u64,
    inferred: bool,
    children: Vec<LNode>,
}

fn label_forest(trace: &Trace, map: &SpanFunctionMap, inferred: &HashSet<SpanId>) -> Vec<LNode> {
    fn build(t: &Trace, i: usize, map: &SpanFunctionMap, inferred: &HashSet<SpanId>, out: &mut Vec<LNode>) {
        let s = &t.spans()[i];
        let mut kids = Vec::new();
        for &c in t.child_indices(i) {
            build(t, c, map, inferred, &mut kids);
        }
        match map.resolve(s).function() {
            Some(f) => out.push(LNode {
                label: f.clone(),
                duration: s.duration,
                inferred: inferred.contains(&s.span_id),
                children: kids,
            }),
            None => out.extend(kids),
        }
    }
    let mut out = Vec::new();
    build(trace, trace.root_index(), map, inferred, &mut out);
    out
}

fn same_shape(a: &[LNode], b: &[LNode]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.label == y.label && same_shape(&x.children, &y.children))
}

fn count(a: &[LNode]) -> usize {
    a.iter().map(|n| 1 + count(&n.children)).sum()
}

/// Matched node count under an ordered LCS of children.
fn matched(a: &[LNode], b: &[LNode]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            let skip = dp[i + 1][j].max(dp[i][j + 1]);
            let take = if a[i].label == b[j].label {
                1 + matched(&a[i].children, &b[j].children) + dp[i + 1][j + 1]
            } else {
                0
            };
            dp[i][j] = skip.max(take);
        }
    }
    dp[0][0]
}

fn duration_errors(orig: &[LNode], rebuilt: &[LNode], out: &mut Vec<f64>) {
    for (o, r) in orig.iter().zip(rebuilt) {
        if r.inferred {
            let truth = o.duration as f64;
            out.push((truth - r.duration as f64).abs() / truth.max(1.0));
        }
        duration_errors(&o.children, &r.children, out);
    }
}

/// Compares the function-level structure of a rebuilt trace with the original.
pub fn structural_fidelity(original: &Trace, rebuilt: &ReconstructedTrace, map: &SpanFunctionMap) -> FidelityReport {
    let inferred: HashSet<SpanId> = rebuilt.inferred().map(|s| s.span.span_id.clone()).collect();
    let orig = label_forest(original, map, &HashSet::new());
    let Ok(rt) = rebuilt.to_trace() else {
        return FidelityReport {
            structure_exact: false,
            span_recall: 0.0,
            duration_error: None,
            inferred: inferred.len(),
        };
    };
    let rebuilt_forest = label_forest(&rt, map, &inferred);
    let exact = same_shape(&orig, &rebuilt_forest);
    let total = count(&orig);
    let recall = if total == 0 { 1.0 } else { matched(&orig, &rebuilt_forest) as f64 / total as f64 };
    let duration_error = exact.then(|| {
        let mut errs = Vec::new();
        duration_errors(&orig, &rebuilt_forest, &mut errs);
        if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        }
    });
    FidelityReport {
        structure_exact: exact,
        span_recall: recall,
        duration_error,
        inferred: inferred.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::tests::comfort_graph;
    use crate::mapping::build_map;
    use crate::model::tests::span;
    use crate::scoring::KeyStats;

    fn original() -> Trace {
        Trace::new(
            "t1",
            vec![
                span("r", None, "C.preserve", 0, 100),
                span("a", Some("r"), "C.createOrder", 1, 10),
                span("b", Some("r"), "C.getComfortClass", 20, 10),
                span("c", Some("r"), "C.dispatchComfort", 40, 10),
                span("d", Some("r"), "C.getPrice", 60, 12),
            ],
        )
        .unwrap()
    }

    fn decision(kept: &[&Span]) -> SamplingDecision {
        SamplingDecision {
            trace_id: "t1".into(),
            kept: kept.iter().map(|s| s.span_id.clone()).collect(),
            dss: Vec::new(),
            effective_ratio: 0.0,
        }
    }

    fn stats() -> StatsSnapshot {
        let mut snap = StatsSnapshot::empty();
        for (f, mean) in [("dispatchComfort", 9.0), ("getPrice", 12.0)] {
            snap.keys.push(KeyStats {
                key: ScoreKey::Function(FunctionRef::new("svc", "C", f)),
                count: 10,
                median: None,
                mad: None,
                q_z: None,
                duration_count: 10,
                duration_mean: Some(mean),
                duration_std: Some(1.0),
            });
        }
        snap.keys.sort_by(|a, b| a.key.cmp(&b.key));
        snap
    }

    #[test]
    fn all_kept_is_identity() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = original();
        let kept: Vec<&Span> = t.spans().iter().collect();
        let spans: Vec<Span> = t.spans().to_vec();
        let r = reconstruct(&decision(&kept), &spans, &g, &map, &StatsSnapshot::empty()).unwrap();
        assert_eq!(r.inferred().count(), 0);
        assert_eq!(r.to_trace().unwrap(), t);
        let fid = structural_fidelity(&t, &r, &map);
        assert!(fid.structure_exact);
        assert_eq!(fid.span_recall, 1.0);
        assert_eq!(fid.duration_error, Some(0.0));
    }

    #[test]
    fn fills_the_comfort_branch() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = original();
        let kept = vec![t.spans()[1].clone(), t.spans()[2].clone()];
        let refs: Vec<&Span> = kept.iter().collect();
        let r = reconstruct(&decision(&refs), &kept, &g, &map, &stats()).unwrap();
        let ops: Vec<(&str, Origin)> = r.spans.iter().map(|s| (s.span.operation.as_str(), s.origin)).collect();
        assert_eq!(
            ops,
            vec![
                ("C.preserve", Origin::Inferred),
                ("C.createOrder", Origin::Sampled),
                ("C.getComfortClass", Origin::Sampled),
                ("C.dispatchComfort", Origin::Inferred),
                ("C.getPrice", Origin::Inferred),
            ]
        );
        // the dropped root keeps its id
        assert_eq!(r.spans[0].span.span_id, SpanId::new("r"));
        assert_eq!(r.spans[0].duration_source, Some(DurationSource::ZeroFallback));
        assert_eq!(r.spans[3].duration_source, Some(DurationSource::HistoricalMean));
        assert_eq!(r.spans[3].span.start_time, 30);
        assert_eq!(r.spans[3].span.duration, 9);
        assert_eq!(r.spans[4].span.start_time, 39);
        let rt = r.to_trace().unwrap();
        assert_eq!(rt.len(), 5);
        let fid = structural_fidelity(&t, &r, &map);
        assert!(fid.structure_exact);
        assert_eq!(fid.inferred, 3);
        let err = fid.duration_error.unwrap();
        // root 100 -> 50, dispatchComfort 10 -> 9, getPrice 12 -> 12
        let want = (50.0 / 100.0 + 1.0 / 10.0 + 0.0) / 3.0;
        assert!((err - want).abs() < 1e-9, "{err}");
    }

    #[test]
    fn unwitnessed_fork_is_ambiguous() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = original();
        let kept = vec![t.spans()[1].clone()];
        let refs: Vec<&Span> = kept.iter().collect();
        match reconstruct(&decision(&refs), &kept, &g, &map, &stats()) {
            Err(ReconstructError::AmbiguousPath { candidates, .. }) => {
                assert_eq!(candidates, vec!["comfort".to_string(), "economy".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_span_is_rejected() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = original();
        let kept = vec![t.spans()[1].clone()];
        let err = reconstruct(&decision(&[]), &kept, &g, &map, &stats()).unwrap_err();
        assert!(matches!(err, ReconstructError::NotInDecision { .. }));
    }

    #[test]
    fn unknown_function_has_no_entry() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let kept = vec![span("x", Some("r"), "C.nowhere", 0, 5)];
        let refs: Vec<&Span> = kept.iter().collect();
        let err = reconstruct(&decision(&refs), &kept, &g, &map, &stats()).unwrap_err();
        assert_eq!(err, ReconstructError::UnknownEntry("t1".into()));
    }

    #[test]
    fn recall_counts_matched_nodes() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = original();
        let partial = ReconstructedTrace {
            trace_id: "t1".into(),
            spans: t.spans()[..3]
                .iter()
                .map(|s| RebuiltSpan {
                    span: s.clone(),
                    origin: Origin::Sampled,
                    duration_source: None,
                })
                .collect(),
        };
        let fid = structural_fidelity(&t, &partial, &map);
        assert!(!fid.structure_exact);
        assert!((fid.span_recall - 0.6).abs() < 1e-12);
        assert_eq!(fid.duration_error, None);
    }
}
